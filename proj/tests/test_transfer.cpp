#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poolkv/transfer.hpp"
#include "test_util.hpp"

#include <random>

using namespace poolkv;

namespace {

struct Fixture {
    testutil::ScopedPoolFile file{"xfer"};
    PoolHandle pool;
    explicit Fixture(std::uint64_t block_bytes = kDefaultBlockBytes, std::uint64_t pool_mib = 16) {
        PoolConfig cfg;
        cfg.pool_bytes = pool_mib * kMiB;
        cfg.device_count = 1;
        cfg.block_bytes = block_bytes;
        cfg.backing_path = file.path;
        pool = PoolHandle::create(cfg);
    }
};

// Independent oracle: serialize the block by walking the layout directly,
// never touching descriptor lists.
std::vector<std::uint8_t> naive_serialize(const FragmentedBuffer& buf, std::uint32_t block) {
    std::vector<std::uint8_t> out;
    out.reserve(buf.layout().block_bytes());
    for (std::uint32_t l = 0; l < buf.layout().n_layers; ++l)
        for (std::uint32_t kv = 0; kv < 2; ++kv) {
            auto span = buf.chunk_span(l, kv, block);
            out.insert(out.end(), span.begin(), span.end());
        }
    return out;
}

bool buffers_equal_block(const FragmentedBuffer& a, const FragmentedBuffer& b, std::uint32_t block) {
    for (std::uint32_t l = 0; l < a.layout().n_layers; ++l)
        for (std::uint32_t kv = 0; kv < 2; ++kv) {
            auto sa = a.chunk_span(l, kv, block);
            auto sb = b.chunk_span(l, kv, block);
            if (!std::equal(sa.begin(), sa.end(), sb.begin(), sb.end())) return false;
        }
    return true;
}

} // namespace

TEST_CASE("profile descriptor counts match the shipped models") {
    auto qwen = qwen32b_like();
    CHECK(qwen.chunks_per_block() == 128);
    CHECK(qwen.chunk_bytes() == 20 * kKiB);
    CHECK(qwen.block_bytes() == kDefaultBlockBytes);
    CHECK(qwen.per_token_per_head_bytes() == 160);

    auto llama = llama8b_like();
    CHECK(llama.chunks_per_block() == 64);

    FragmentedBuffer qbuf(qwen, 1, 1);
    CHECK(build_gather_descriptors(qwen, qbuf, 0).size() == 128);
    FragmentedBuffer lbuf(llama, 1, 1);
    CHECK(build_gather_descriptors(llama, lbuf, 0).size() == 64);

    KVLayoutSpec one{1, 4, 32, 2, 16};
    FragmentedBuffer obuf(one, 1, 1);
    CHECK(build_gather_descriptors(one, obuf, 0).size() == 2); // K and V
}

TEST_CASE("dense descriptors tile the block contiguously in (layer, K/V) order") {
    auto layout = llama8b_like();
    FragmentedBuffer buf(layout, 2, 3);
    auto descs = build_gather_descriptors(layout, buf, 1);
    std::uint64_t expect = 0;
    for (const auto& d : descs) {
        CHECK(d.pool_offset == expect);
        CHECK(d.length == layout.chunk_bytes());
        expect += d.length;
    }
    CHECK(expect == layout.block_bytes());
}

TEST_CASE("profiles file round-trips") {
    auto path = testutil::scratch_path("profiles");
    save_profiles(path, builtin_profiles());
    auto loaded = load_profiles(path);
    REQUIRE(loaded.size() == 3);
    CHECK(loaded.at("qwen32b-like").n_layers == 64);
    CHECK(loaded.at("qwen32b-like").head_dim == 80);
    CHECK(loaded.at("llama8b-like").n_layers == 32);
    CHECK(loaded.at("qwen32b-fp8-like").bytes_per_element == 1);
    ::unlink(path.c_str());
}

TEST_CASE("gather_write matches the naive serializer oracle") {
    Fixture fx;
    CoherentSession s(fx.pool);
    auto layout = qwen32b_like();
    FragmentedBuffer buf(layout, 1, 7);
    buf.fill_random(1234);
    auto addr = fx.pool.alloc_block();
    gather_write(s, buf, build_gather_descriptors(layout, buf, 0), addr);

    std::vector<std::uint8_t> in_pool(addr.length);
    fx.pool.read_bytes(addr.offset, in_pool.data(), in_pool.size());
    CHECK(in_pool == naive_serialize(buf, 0));
}

TEST_CASE("zero-filled sources produce a zero-filled block") {
    Fixture fx;
    CoherentSession s(fx.pool);
    auto layout = llama8b_like();
    FragmentedBuffer buf(layout, 1, 9);
    PoolAddress addr{0, layout.block_bytes()};
    // dirty the pool range first so zeros are actually written
    std::vector<std::uint8_t> junk(addr.length, 0xEE);
    fx.pool.write_bytes(addr.offset, junk.data(), junk.size());

    gather_write(s, buf, build_gather_descriptors(layout, buf, 0), addr);
    std::vector<std::uint8_t> in_pool(addr.length);
    fx.pool.read_bytes(addr.offset, in_pool.data(), in_pool.size());
    CHECK(in_pool == std::vector<std::uint8_t>(addr.length, 0));
}

TEST_CASE("descriptor order does not matter when pool offsets are fixed") {
    Fixture fx;
    CoherentSession s(fx.pool);
    auto layout = llama8b_like();
    FragmentedBuffer buf(layout, 1, 11);
    buf.fill_random(99);
    auto addr = fx.pool.alloc_block();
    PoolAddress range{addr.offset, layout.block_bytes()};

    auto descs = build_gather_descriptors(layout, buf, 0);
    gather_write(s, buf, descs, range);
    std::vector<std::uint8_t> a(range.length);
    fx.pool.read_bytes(range.offset, a.data(), a.size());

    std::mt19937_64 rng(5);
    std::shuffle(descs.begin(), descs.end(), rng);
    gather_write(s, buf, descs, range);
    std::vector<std::uint8_t> b(range.length);
    fx.pool.read_bytes(range.offset, b.data(), b.size());
    CHECK(a == b);
}

TEST_CASE("gather_write validates lengths and ranges") {
    Fixture fx;
    CoherentSession s(fx.pool);
    auto layout = llama8b_like();
    FragmentedBuffer buf(layout, 1, 2);
    auto descs = build_gather_descriptors(layout, buf, 0);
    PoolAddress range{0, layout.block_bytes()};

    auto short_descs = descs;
    short_descs.pop_back(); // sum no longer covers the range
    CHECK_THROWS_AS(gather_write(s, buf, short_descs, range), Error);

    auto bad = descs;
    bad[0].gpu_offset = buf.arena_bytes(); // source out of range
    CHECK_THROWS_AS(gather_write(s, buf, bad, range), Error);

    PoolAddress small{0, layout.block_bytes() - 64};
    CHECK_THROWS_AS(gather_write(s, buf, descs, small), Error);
}

TEST_CASE("scatter_read after gather_write restores the buffer byte-identically") {
    Fixture fx;
    CoherentSession s(fx.pool);
    auto layout = qwen32b_like();
    FragmentedBuffer src(layout, 1, 21);
    src.fill_random(777);
    auto addr = fx.pool.alloc_block();
    gather_write(s, src, build_gather_descriptors(layout, src, 0), addr);

    FragmentedBuffer dst(layout, 1, 22); // different fragmentation geometry
    scatter_read(s, addr, dst, build_gather_descriptors(layout, dst, 0));
    CHECK(buffers_equal_block(src, dst, 0));
}

TEST_CASE("round trip holds across random layouts and seeds") {
    Fixture fx(/*block_bytes=*/4 * kMiB, /*pool_mib=*/16);
    CoherentSession s(fx.pool);
    std::mt19937_64 rng(31337);
    for (int trial = 0; trial < 40; ++trial) {
        KVLayoutSpec layout;
        layout.n_layers = 1 + rng() % 64;
        layout.n_kv_heads = 1 + rng() % 16;
        layout.head_dim = 8 * (1 + rng() % 8);
        layout.bytes_per_element = 1 + rng() % 2;
        layout.tokens_per_block = 16;
        if (layout.block_bytes() > 4 * kMiB) continue;

        FragmentedBuffer src(layout, 1, rng());
        src.fill_random(rng());
        PoolAddress range{0, layout.block_bytes()};
        gather_write(s, src, build_gather_descriptors(layout, src, 0), range);

        std::vector<std::uint8_t> in_pool(range.length);
        fx.pool.read_bytes(range.offset, in_pool.data(), in_pool.size());
        REQUIRE(in_pool == naive_serialize(src, 0));

        FragmentedBuffer dst(layout, 1, rng());
        scatter_read(s, range, dst, build_gather_descriptors(layout, dst, 0));
        REQUIRE(buffers_equal_block(src, dst, 0));
    }
}

TEST_CASE("single descriptor covering the whole block is a plain copy") {
    Fixture fx;
    CoherentSession s(fx.pool);
    auto layout = llama8b_like();
    FragmentedBuffer src(layout, 1, 1);
    src.fill_random(42);
    PoolAddress range{0, layout.block_bytes()};
    gather_write(s, src, build_gather_descriptors(layout, src, 0), range);

    // read the full block through a single descriptor into a flat arena
    DescriptorList one = {{0, 0, layout.block_bytes()}};
    FragmentedBuffer big(KVLayoutSpec{1, 1, static_cast<std::uint32_t>(layout.block_bytes()), 1, 1}, 1, 0);
    scatter_read(s, range, big, one);
    std::vector<std::uint8_t> expect(range.length);
    fx.pool.read_bytes(range.offset, expect.data(), expect.size());
    CHECK(std::equal(expect.begin(), expect.end(), big.arena()));
}

TEST_CASE("a reader that skips read_fresh sees stale block bytes") {
    Fixture fx(/*block_bytes=*/64 * kKiB, /*pool_mib=*/4);
    KVLayoutSpec layout{2, 2, 16, 2, 16}; // small block: fits in the reader cache
    PoolAddress range{0, layout.block_bytes()};

    CoherentSession writer(fx.pool);
    CoherentSession reader(fx.pool);

    FragmentedBuffer v1(layout, 1, 1);
    v1.fill_random(101);
    gather_write(writer, v1, build_gather_descriptors(layout, v1, 0), range);

    FragmentedBuffer warm(layout, 1, 2);
    scatter_read(reader, range, warm, build_gather_descriptors(layout, warm, 0));
    REQUIRE(buffers_equal_block(v1, warm, 0));

    FragmentedBuffer v2(layout, 1, 3);
    v2.fill_random(202);
    gather_write(writer, v2, build_gather_descriptors(layout, v2, 0), range);

    // plain reads serve the reader's stale cache
    reader.set_break_read_fresh(true);
    FragmentedBuffer stale(layout, 1, 4);
    scatter_read(reader, range, stale, build_gather_descriptors(layout, stale, 0));
    CHECK(buffers_equal_block(v1, stale, 0));
    CHECK(!buffers_equal_block(v2, stale, 0));

    // protocol-compliant reads see the new block
    reader.set_break_read_fresh(false);
    FragmentedBuffer fresh(layout, 1, 5);
    scatter_read(reader, range, fresh, build_gather_descriptors(layout, fresh, 0));
    CHECK(buffers_equal_block(v2, fresh, 0));
}

TEST_CASE("device writes steered into the cache stay invisible until flushed") {
    Fixture fx(/*block_bytes=*/64 * kKiB, /*pool_mib=*/4);
    KVLayoutSpec layout{2, 2, 16, 2, 16}; // 4 KiB block, fits the writer cache
    PoolAddress range{0, layout.block_bytes()};

    CoherentSession writer(fx.pool);
    CoherentSession reader(fx.pool);
    writer.set_device_write_caching(true); // DDIO-on analog

    FragmentedBuffer src(layout, 1, 6);
    src.fill_random(11);
    gather_write(writer, src, build_gather_descriptors(layout, src, 0), range);

    FragmentedBuffer remote(layout, 1, 7);
    scatter_read(reader, range, remote, build_gather_descriptors(layout, remote, 0));
    CHECK(!buffers_equal_block(src, remote, 0)); // stuck in the writer's cache

    writer.flush(range.offset, range.length);
    FragmentedBuffer after(layout, 1, 8);
    scatter_read(reader, range, after, build_gather_descriptors(layout, after, 0));
    CHECK(buffers_equal_block(src, after, 0));

    // with the default (bypassing) device path no flush is needed
    writer.set_device_write_caching(false);
    FragmentedBuffer src2(layout, 1, 9);
    src2.fill_random(12);
    gather_write(writer, src2, build_gather_descriptors(layout, src2, 0), range);
    FragmentedBuffer direct(layout, 1, 10);
    scatter_read(reader, range, direct, build_gather_descriptors(layout, direct, 0));
    CHECK(buffers_equal_block(src2, direct, 0));
}

TEST_CASE("sparse: single token over all heads and layers") {
    auto layout = qwen32b_like();
    FragmentedBuffer buf(layout, 1, 1);
    auto descs = build_sparse_descriptors(layout, buf, SparseSelection::single_token(layout, 5));
    CHECK(descs.size() == 1024); // n_layers x n_kv_heads x 2
    for (const auto& d : descs) CHECK(d.length == 160);
}

TEST_CASE("sparse: full-block runs coalesce to chunk level") {
    auto layout = qwen32b_like();
    FragmentedBuffer buf(layout, 1, 1);
    auto descs = build_sparse_descriptors(layout, buf, SparseSelection::full_block(layout, 0));
    CHECK(descs.size() == 128);
    for (const auto& d : descs) CHECK(d.length == layout.chunk_bytes());
}

TEST_CASE("sparse: empty selection and bad indices") {
    auto layout = llama8b_like();
    FragmentedBuffer buf(layout, 1, 1);
    CHECK(build_sparse_descriptors(layout, buf, SparseSelection(layout)).empty());
    CHECK_THROWS_AS(
        build_sparse_descriptors(layout, buf, SparseSelection::single_token(layout, 16)), Error);
}

TEST_CASE("sparse descriptors match a byte-interval brute-force oracle") {
    std::mt19937_64 rng(55);
    KVLayoutSpec layout{4, 3, 8, 2, 16};
    FragmentedBuffer buf(layout, 2, 6);

    for (int trial = 0; trial < 50; ++trial) {
        SparseSelection sel(layout);
        for (std::uint32_t l = 0; l < layout.n_layers; ++l)
            for (std::uint32_t h = 0; h < layout.n_kv_heads; ++h) {
                std::vector<std::uint32_t> toks;
                for (std::uint32_t t = 0; t < 32; ++t)
                    if (rng() % 3 == 0) toks.push_back(t);
                sel.select(l, h, toks);
            }
        auto descs = build_sparse_descriptors(layout, buf, sel);

        // oracle: mark every selected byte on both sides, then extract runs
        std::map<std::uint64_t, std::uint64_t> expected; // pool byte -> gpu byte
        for (std::uint32_t l = 0; l < layout.n_layers; ++l)
            for (std::uint32_t kv = 0; kv < 2; ++kv)
                for (std::uint32_t h = 0; h < layout.n_kv_heads; ++h)
                    for (std::uint32_t t : sel.at(l, h)) {
                        const std::uint32_t block = t / 16, pos = t % 16;
                        const std::uint64_t in_chunk =
                            h * layout.head_span_bytes() + pos * layout.per_token_per_head_bytes();
                        const std::uint64_t p = block * layout.block_bytes() +
                                                (l * 2ull + kv) * layout.chunk_bytes() + in_chunk;
                        const std::uint64_t g = buf.chunk_offset(l, kv, block) + in_chunk;
                        for (std::uint64_t b = 0; b < layout.per_token_per_head_bytes(); ++b)
                            expected[p + b] = g + b;
                    }
        std::map<std::uint64_t, std::uint64_t> got;
        for (const auto& d : descs)
            for (std::uint64_t b = 0; b < d.length; ++b)
                got[d.pool_offset + b] = d.gpu_offset + b;
        REQUIRE(got == expected);

        // and the list is maximally coalesced: no two neighbors mergeable
        for (std::size_t i = 1; i < descs.size(); ++i) {
            const bool mergeable =
                descs[i - 1].gpu_offset + descs[i - 1].length == descs[i].gpu_offset &&
                descs[i - 1].pool_offset + descs[i - 1].length == descs[i].pool_offset;
            CHECK(!mergeable);
        }
    }
}

TEST_CASE("no descriptor-count ceiling: 10^4 descriptors execute in one call") {
    Fixture fx(/*block_bytes=*/2 * kMiB, /*pool_mib=*/4);
    CoherentSession s(fx.pool);
    // 50 layers x 2 x 100 heads, one selected token out of two per head:
    // 10^4 disjoint 4-byte fragments that cannot coalesce
    KVLayoutSpec layout{50, 100, 2, 2, 2};
    FragmentedBuffer src(layout, 1, 8);
    src.fill_random(404);
    PoolAddress range{0, layout.block_bytes()};
    gather_write(s, src, build_gather_descriptors(layout, src, 0), range);

    auto sel = SparseSelection::single_token(layout, 0);
    FragmentedBuffer dst(layout, 1, 9);
    auto descs = build_sparse_descriptors(layout, dst, sel);
    REQUIRE(descs.size() == 10000);

    TransferStats stats;
    scatter_read(s, range, dst, descs, &stats, ExecMode::Batched);
    CHECK(stats.launch_calls == 1);
    CHECK(stats.bytes_moved == 10000 * layout.per_token_per_head_bytes());

    // every selected fragment arrived intact
    const std::uint64_t per_tok = layout.per_token_per_head_bytes();
    for (std::uint32_t l = 0; l < layout.n_layers; ++l)
        for (std::uint32_t kv = 0; kv < 2; ++kv)
            for (std::uint32_t h = 0; h < layout.n_kv_heads; ++h) {
                const std::uint64_t in_chunk = h * layout.head_span_bytes();
                const auto* a = src.arena() + src.chunk_offset(l, kv, 0) + in_chunk;
                const auto* b = dst.arena() + dst.chunk_offset(l, kv, 0) + in_chunk;
                REQUIRE(std::memcmp(a, b, per_tok) == 0);
            }
}

TEST_CASE("data movement accounting: direct moves sum, staged moves twice") {
    Fixture fx;
    CoherentSession s(fx.pool);
    auto layout = qwen32b_like();
    FragmentedBuffer buf(layout, 1, 77);
    buf.fill_random(88);
    auto addr = fx.pool.alloc_block();
    auto descs = build_gather_descriptors(layout, buf, 0);

    TransferStats direct;
    gather_write(s, buf, descs, addr, &direct);
    CHECK(direct.bytes_moved == layout.block_bytes());
    CHECK(direct.launch_calls == 1);

    std::vector<std::uint8_t> direct_bytes(addr.length);
    fx.pool.read_bytes(addr.offset, direct_bytes.data(), direct_bytes.size());

    TransferStats staged;
    std::vector<std::uint8_t> staging(layout.block_bytes());
    staged_copy_baseline(s, buf, descs, staging, addr, &staged);
    CHECK(staged.bytes_moved == 2 * layout.block_bytes());

    std::vector<std::uint8_t> staged_bytes(addr.length);
    fx.pool.read_bytes(addr.offset, staged_bytes.data(), staged_bytes.size());
    CHECK(staged_bytes == direct_bytes);

    std::vector<std::uint8_t> tiny(16);
    CHECK_THROWS_AS(staged_copy_baseline(s, buf, descs, tiny, addr, nullptr), Error);
}

TEST_CASE("staging reuse leaves no cross-contamination") {
    Fixture fx;
    CoherentSession s(fx.pool);
    KVLayoutSpec layout{2, 2, 16, 2, 16};
    PoolAddress a{0, layout.block_bytes()};
    PoolAddress b{layout.block_bytes(), layout.block_bytes()};

    std::vector<std::uint8_t> staging(layout.block_bytes(), 0xCD); // canary pattern

    FragmentedBuffer first(layout, 1, 1);
    first.fill_random(1);
    staged_copy_baseline(s, first, build_gather_descriptors(layout, first, 0), staging, a);

    FragmentedBuffer second(layout, 1, 2);
    second.fill_random(2);
    staged_copy_baseline(s, second, build_gather_descriptors(layout, second, 0), staging, b);

    std::vector<std::uint8_t> got(b.length);
    fx.pool.read_bytes(b.offset, got.data(), got.size());
    CHECK(got == naive_serialize(second, 0));
}

TEST_CASE("select_copy_method thresholds") {
    CHECK(select_copy_method(2 * kKiB, CopyDirection::Cpu) == CopyMethod::DirectSmall);
    CHECK(select_copy_method(4 * kKiB, CopyDirection::Cpu) == CopyMethod::BulkEngine);
    CHECK(select_copy_method(16 * kKiB, CopyDirection::DeviceRead) == CopyMethod::CustomKernelPath);
    CHECK(select_copy_method(24 * kKiB, CopyDirection::DeviceRead) == CopyMethod::BulkEngine);
    CHECK(select_copy_method(1 * kMiB, CopyDirection::Cpu) == CopyMethod::BulkEngine);
    CHECK(select_copy_method(1 * kMiB, CopyDirection::DeviceRead) == CopyMethod::BulkEngine);
    CHECK(select_copy_method(1 * kMiB, CopyDirection::DeviceWrite) == CopyMethod::BulkEngine);
    CHECK_THROWS_AS(select_copy_method(0, CopyDirection::Cpu), Error);

    CopyThresholds custom{8 * kKiB, 32 * kKiB};
    CHECK(select_copy_method(6 * kKiB, CopyDirection::Cpu, custom) == CopyMethod::DirectSmall);
    CHECK(select_copy_method(24 * kKiB, CopyDirection::DeviceRead, custom) ==
          CopyMethod::CustomKernelPath);
}

TEST_CASE("per-descriptor mode counts one launch per fragment") {
    Fixture fx;
    CoherentSession s(fx.pool);
    auto layout = llama8b_like();
    FragmentedBuffer buf(layout, 1, 12);
    buf.fill_random(13);
    PoolAddress range{0, layout.block_bytes()};
    auto descs = build_gather_descriptors(layout, buf, 0);

    TransferStats stats;
    gather_write(s, buf, descs, range, &stats, ExecMode::PerDescriptor);
    CHECK(stats.launch_calls == descs.size());
}
