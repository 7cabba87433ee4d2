#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poolkv/coherence_check.hpp"
#include "test_util.hpp"

#include <random>

using namespace poolkv;

namespace {

struct Fixture {
    testutil::ScopedPoolFile file{"coh"};
    PoolHandle pool;
    Fixture() {
        PoolConfig cfg;
        cfg.pool_bytes = 4 * kMiB;
        cfg.device_count = 1;
        cfg.block_bytes = 64 * kKiB;
        cfg.backing_path = file.path;
        pool = PoolHandle::create(cfg);
    }
};

std::vector<std::uint8_t> random_bytes(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::uint8_t> v(n);
    for (auto& b : v) b = static_cast<std::uint8_t>(rng());
    return v;
}

} // namespace

TEST_CASE("cached_write stays in the writer's cache until flushed") {
    Fixture fx;
    CoherentSession a(fx.pool);
    CoherentSession b(fx.pool);
    const std::uint64_t X = 4096;
    const std::uint64_t v = 0xDEADBEEF;

    a.cached_write(X, &v, 8);

    // read-your-writes on the writing session
    std::uint64_t own = 0;
    a.read(X, &own, 8);
    CHECK(own == v);

    // constructed schedule: B sees the old value, even with a fresh read
    std::uint64_t remote = 1;
    b.read_fresh(X, &remote, 8);
    CHECK(remote == 0);

    a.flush(X, 8);
    b.read_fresh(X, &remote, 8);
    CHECK(remote == v);
}

TEST_CASE("cached_write into an uncacheable range degenerates to bypass_write") {
    Fixture fx;
    CoherentSession a(fx.pool);
    const std::uint64_t X = 8192;
    a.set_region_uncacheable(X, 64);
    const std::uint64_t v = 77;
    a.cached_write(X, &v, 8);
    CHECK(!a.cache().contains(X));
    std::uint64_t in_pool = 0;
    fx.pool.read_bytes(X, &in_pool, 8);
    CHECK(in_pool == v); // reached the pool without a flush
}

TEST_CASE("bypass_write: protocol pair and byte-exact 16 KiB round trip") {
    Fixture fx;
    CoherentSession a(fx.pool);
    CoherentSession b(fx.pool);
    const std::uint64_t X = 64 * kKiB;

    const std::uint64_t v = 1234567;
    a.bypass_write(X, &v, 8);
    b.invalidate(X, 8);
    std::uint64_t got = 0;
    b.read(X, &got, 8);
    CHECK(got == v);

    // same-session read after bypass
    std::uint64_t own = 0;
    a.read(X, &own, 8);
    CHECK(own == v);

    auto payload = random_bytes(16 * kKiB, 99);
    a.bypass_write(X, payload.data(), payload.size());
    auto back = b.read_fresh(X, payload.size());
    CHECK(back == payload);
}

TEST_CASE("bypass_write invalidates the session's own stale cached lines") {
    Fixture fx;
    CoherentSession a(fx.pool);
    const std::uint64_t X = 128 * kKiB;
    const std::uint64_t v1 = 1, v2 = 2;
    a.cached_write(X, &v1, 8);
    CHECK(a.cache().dirty(X));
    a.bypass_write(X, &v2, 8);
    CHECK(!a.cache().contains(X));
    std::uint64_t got = 0;
    a.read(X, &got, 8);
    CHECK(got == v2);
    // the dropped dirty line must not resurface via flush
    a.flush(X, 8);
    fx.pool.read_bytes(X, &got, 8);
    CHECK(got == v2);
}

TEST_CASE("flush of a clean line leaves the pool unchanged") {
    Fixture fx;
    CoherentSession a(fx.pool);
    const std::uint64_t X = 4096;
    const std::uint64_t v = 31337;
    fx.pool.write_bytes(X, &v, 8);
    std::uint64_t warm = 0;
    a.read(X, &warm, 8); // clean fill
    CHECK(a.cache().contains(X));
    a.flush(X, 8);
    CHECK(!a.cache().contains(X));
    std::uint64_t after = 0;
    fx.pool.read_bytes(X, &after, 8);
    CHECK(after == v);
}

TEST_CASE("flush over a 3-line range removes exactly those lines") {
    Fixture fx;
    CoherentSession a(fx.pool);
    const std::uint64_t base = 16 * kKiB;
    std::uint8_t byte = 0x5A;
    for (int i = 0; i < 5; ++i) a.cached_write(base + i * 64, &byte, 1);
    CHECK(a.cache().size() == 5);
    a.flush(base + 64, 3 * 64);
    CHECK(a.cache().size() == 2);
    CHECK(a.cache().contains(base));
    CHECK(!a.cache().contains(base + 64));
    CHECK(!a.cache().contains(base + 128));
    CHECK(!a.cache().contains(base + 192));
    CHECK(a.cache().contains(base + 256));
}

TEST_CASE("plain read may stay stale; read_fresh never does") {
    Fixture fx;
    CoherentSession a(fx.pool);
    CoherentSession b(fx.pool);
    const std::uint64_t X = 0;

    std::uint64_t got = 1;
    b.read(X, &got, 8);
    CHECK(got == 0);

    const std::uint64_t v = 555;
    a.bypass_write(X, &v, 8);

    b.read(X, &got, 8);
    CHECK(got == 0); // still the cached copy

    b.read_fresh(X, &got, 8);
    CHECK(got == v);
}

TEST_CASE("reads in an uncacheable range never populate the cache") {
    Fixture fx;
    CoherentSession b(fx.pool);
    const std::uint64_t X = 32 * kKiB;
    b.set_region_uncacheable(X, 256);
    auto bytes = b.read(X, 256);
    CHECK(bytes == std::vector<std::uint8_t>(256, 0));
    CHECK(b.cache().size() == 0);
}

TEST_CASE("uncacheable region: writer and remote reader are always coherent") {
    Fixture fx;
    CoherentSession a(fx.pool);
    CoherentSession b(fx.pool);
    const std::uint64_t X = 256 * kKiB;
    a.set_region_uncacheable(X, 64);
    b.set_region_uncacheable(X, 64);
    for (std::uint64_t v = 1; v <= 8; ++v) {
        a.cached_write(X, &v, 8);
        std::uint64_t got = 0;
        b.read(X, &got, 8);
        CHECK(got == v);
    }
}

TEST_CASE("marking a range UC flushes existing dirty lines out") {
    Fixture fx;
    CoherentSession a(fx.pool);
    const std::uint64_t X = 512 * kKiB;
    const std::uint64_t v = 4242;
    a.cached_write(X, &v, 8);
    std::uint64_t before = 0;
    fx.pool.read_bytes(X, &before, 8);
    CHECK(before == 0);
    a.set_region_uncacheable(X, 8);
    std::uint64_t after = 0;
    fx.pool.read_bytes(X, &after, 8); // pool-inspection oracle
    CHECK(after == v);
    CHECK(!a.cache().contains(X));
}

TEST_CASE("set_region_uncacheable rejects empty ranges") {
    Fixture fx;
    CoherentSession a(fx.pool);
    CHECK_THROWS_AS(a.set_region_uncacheable(0, 0), Error);
}

TEST_CASE("partial-line UC ranges round outward to line boundaries") {
    Fixture fx;
    CoherentSession a(fx.pool);
    const std::uint64_t line = 4096;
    a.set_region_uncacheable(line + 10, 20); // bytes 10..30 of the line
    // the whole line became uncacheable: a write to byte 0 bypasses the cache
    const std::uint8_t v = 0x77;
    a.cached_write(line, &v, 1);
    CHECK(!a.cache().contains(line));
    std::uint8_t got = 0;
    fx.pool.read_bytes(line, &got, 1);
    CHECK(got == v);
    // and so does the next line up (30 > 64 would be false; range ends at 30 -> rounded to 64)
    a.cached_write(line + 64, &v, 1);
    CHECK(a.cache().contains(line + 64)); // next line is outside the rounded range
}

TEST_CASE("out-of-range accesses are rejected") {
    Fixture fx;
    CoherentSession a(fx.pool);
    std::uint64_t v = 0;
    CHECK_THROWS_AS(a.cached_write(fx.pool.shared_extent(), &v, 8), Error);
    CHECK_THROWS_AS(a.bypass_write(fx.pool.shared_extent() - 4, &v, 8), Error);
    CHECK_THROWS_AS(a.read(fx.pool.shared_extent(), &v, 8), Error);
}

TEST_CASE("flush is idempotent") {
    Fixture fx;
    CoherentSession a(fx.pool);
    const std::uint64_t X = 4096;
    auto payload = random_bytes(300, 5);
    a.cached_write(X, payload.data(), payload.size());
    a.flush(X, payload.size());
    std::vector<std::uint8_t> once(payload.size());
    fx.pool.read_bytes(X, once.data(), once.size());
    const auto cache_once = a.cache().dump();
    a.flush(X, payload.size());
    std::vector<std::uint8_t> twice(payload.size());
    fx.pool.read_bytes(X, twice.data(), twice.size());
    CHECK(once == twice);
    CHECK(a.cache().dump() == cache_once);
}

TEST_CASE("invalidate after bypass_write is a no-op on pool contents") {
    Fixture fx;
    CoherentSession a(fx.pool);
    const std::uint64_t X = 4096;
    auto payload = random_bytes(128, 6);
    a.bypass_write(X, payload.data(), payload.size());
    a.invalidate(X, payload.size());
    std::vector<std::uint8_t> got(payload.size());
    fx.pool.read_bytes(X, got.data(), got.size());
    CHECK(got == payload);
}

TEST_CASE("LRU eviction writes dirty lines back") {
    Fixture fx;
    CoherentSession a(fx.pool, /*capacity_lines=*/4);
    const std::uint64_t base = 4096;
    for (std::uint64_t i = 0; i < 8; ++i) {
        const std::uint64_t v = i + 1;
        a.cached_write(base + i * 64, &v, 8);
    }
    CHECK(a.cache().size() == 4);
    // the first four lines were evicted and must have reached the pool
    for (std::uint64_t i = 0; i < 4; ++i) {
        std::uint64_t got = 0;
        fx.pool.read_bytes(base + i * 64, &got, 8);
        CHECK(got == i + 1);
    }
    CHECK(a.stats().writebacks == 4);
}

TEST_CASE("shadow model: random unaligned ops on one session match a flat buffer") {
    Fixture fx;
    CoherentSession s(fx.pool, 32); // small cache forces eviction traffic
    const std::uint64_t base = 8 * kKiB, span = 4 * kKiB;
    std::vector<std::uint8_t> shadow(span, 0);
    std::mt19937_64 rng(2024);

    for (int op = 0; op < 5000; ++op) {
        const std::uint64_t off = rng() % span;
        const std::uint64_t len = 1 + rng() % std::min<std::uint64_t>(span - off, 300);
        const auto roll = rng() % 10;
        if (roll < 4) {
            std::vector<std::uint8_t> data(len);
            for (auto& b : data) b = static_cast<std::uint8_t>(rng());
            s.cached_write(base + off, data.data(), len);
            std::memcpy(shadow.data() + off, data.data(), len);
        } else if (roll < 6) {
            std::vector<std::uint8_t> data(len);
            for (auto& b : data) b = static_cast<std::uint8_t>(rng());
            s.bypass_write(base + off, data.data(), len);
            std::memcpy(shadow.data() + off, data.data(), len);
        } else if (roll < 7) {
            s.flush(base + off, len);
        } else {
            auto got = s.read(base + off, len);
            REQUIRE(std::memcmp(got.data(), shadow.data() + off, len) == 0);
        }
    }
    // after a full flush the pool itself must equal the shadow
    s.flush(base, span);
    std::vector<std::uint8_t> in_pool(span);
    fx.pool.read_bytes(base, in_pool.data(), in_pool.size());
    CHECK(in_pool == shadow);
}

TEST_CASE("constructed stale demo shows the hazard") {
    Fixture fx;
    bool stale = false;
    auto log = cohcheck::stale_demo(fx.pool, stale);
    CHECK(stale);
    CHECK(log.find("STALE") != std::string::npos);
}

TEST_CASE("randomized schedules: compliant reads are sound, hazards exist") {
    Fixture fx;
    auto out = cohcheck::explore_random(fx.pool, 5000, 1234);
    CHECK(out.compliant_mismatches == 0);
    CHECK(out.compliant_reads > 0);
    CHECK(out.plain_stale_reads > 0);
}

TEST_CASE("exhaustive 2-host 3-op enumeration is sound") {
    Fixture fx;
    auto out = cohcheck::explore_exhaustive(fx.pool);
    CHECK(out.schedules == 27 * 8 * 4 * 20);
    CHECK(out.compliant_mismatches == 0);
    CHECK(out.plain_stale_reads > 0);
}

TEST_CASE("breaking read_fresh makes the soundness check fail") {
    Fixture fx;
    auto out = cohcheck::explore_random(fx.pool, 2000, 99, /*break_read_fresh=*/true);
    CHECK(out.compliant_mismatches > 0);
}

TEST_CASE("cross-process coherence: bypass writer, fresh reader") {
    Fixture fx;
    const std::uint64_t X = kMiB;
    auto payload = random_bytes(4096, 17);
    int rc = testutil::wait_exit(testutil::spawn([&] {
        auto p = PoolHandle::attach(fx.file.path);
        CoherentSession w(p);
        w.bypass_write(X, payload.data(), payload.size());
        w.fence();
        return 0;
    }));
    REQUIRE(rc == 0);
    CoherentSession r(fx.pool);
    auto got = r.read_fresh(X, payload.size());
    CHECK(got == payload);
}
