#pragma once

/// Scatter/gather transfer engine between the fragmented per-layer/per-head
/// KVCache layout of an emulated device arena and contiguous pool blocks.
/// Descriptor lists are unbounded: one batched call executes the whole list,
/// standing in for a single custom copy kernel. Writers go through
/// bypass_write, readers through read_fresh, so transfers inherit the
/// coherence protocol.

#include "poolkv/coherence.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace poolkv {

struct KVLayoutSpec {
    std::uint32_t n_layers = 0;
    std::uint32_t n_kv_heads = 0;
    std::uint32_t head_dim = 0;
    std::uint32_t bytes_per_element = 0;
    std::uint32_t tokens_per_block = 16;

    std::uint64_t per_token_per_head_bytes() const {
        return std::uint64_t(head_dim) * bytes_per_element;
    }
    std::uint64_t head_span_bytes() const { // chunk layout is [head][token][dim]
        return std::uint64_t(tokens_per_block) * per_token_per_head_bytes();
    }
    std::uint64_t chunk_bytes() const { return std::uint64_t(n_kv_heads) * head_span_bytes(); }
    std::uint32_t chunks_per_block() const { return n_layers * 2; } // K and V per layer
    std::uint64_t block_bytes() const { return chunk_bytes() * chunks_per_block(); }

    void validate() const {
        if (!n_layers || !n_kv_heads || !head_dim || !bytes_per_element || !tokens_per_block)
            throw ConfigError("layout: all dimensions must be > 0");
    }
};

// Shipped profiles. Chunk byte sizes follow from the profile's assumed
// dimensions; descriptor counts are what the profiles pin down.
inline KVLayoutSpec qwen32b_like() { return {64, 8, 80, 2, 16}; }   // 128 x 20 KiB chunks
inline KVLayoutSpec llama8b_like() { return {32, 8, 128, 2, 16}; }  // 64 chunks
inline KVLayoutSpec qwen32b_fp8_like() { return {64, 8, 80, 1, 16}; }

inline std::map<std::string, KVLayoutSpec> builtin_profiles() {
    return {{"qwen32b-like", qwen32b_like()},
            {"llama8b-like", llama8b_like()},
            {"qwen32b-fp8-like", qwen32b_fp8_like()}};
}

/// Profile file: one `name n_layers n_kv_heads head_dim bytes_per_element`
/// line per profile, '#' comments.
inline std::map<std::string, KVLayoutSpec> load_profiles(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "r");
    if (!f) throw Error("cannot open profile file " + path);
    std::map<std::string, KVLayoutSpec> out;
    char line[256];
    while (std::fgets(line, sizeof line, f)) {
        char name[128];
        unsigned l, h, d, b;
        if (line[0] == '#' || line[0] == '\n') continue;
        if (std::sscanf(line, "%127s %u %u %u %u", name, &l, &h, &d, &b) == 5)
            out[name] = KVLayoutSpec{l, h, d, b, 16};
    }
    std::fclose(f);
    return out;
}

inline void save_profiles(const std::string& path, const std::map<std::string, KVLayoutSpec>& profiles) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw Error("cannot write profile file " + path);
    std::fprintf(f, "# name n_layers n_kv_heads head_dim bytes_per_element\n");
    for (const auto& [name, p] : profiles)
        std::fprintf(f, "%s %u %u %u %u\n", name.c_str(), p.n_layers, p.n_kv_heads, p.head_dim,
                     p.bytes_per_element);
    std::fclose(f);
}

/// One copy fragment: device-arena offset <-> offset inside the pool block
/// range. gather_write copies gpu -> pool, scatter_read copies pool -> gpu.
struct Descriptor {
    std::uint64_t gpu_offset = 0;
    std::uint64_t pool_offset = 0;
    std::uint64_t length = 0;
    bool operator==(const Descriptor&) const = default;
};

using DescriptorList = std::vector<Descriptor>;

/// Emulated device memory holding the fragmented KVCache: one region per
/// (layer, K/V), deliberately non-contiguous (shuffled order, random gaps).
class FragmentedBuffer {
public:
    FragmentedBuffer(const KVLayoutSpec& layout, std::uint32_t n_blocks, std::uint64_t seed = 0)
        : layout_(layout), n_blocks_(n_blocks) {
        layout.validate();
        const std::uint32_t regions = layout.chunks_per_block();
        std::vector<std::uint32_t> order(regions);
        for (std::uint32_t i = 0; i < regions; ++i) order[i] = i;
        std::mt19937_64 rng(seed ^ 0xF2A6'37C1'9B04'55EEull);
        std::shuffle(order.begin(), order.end(), rng);

        bases_.resize(regions);
        std::uint64_t off = 0;
        const std::uint64_t region_bytes = layout.chunk_bytes() * n_blocks;
        for (std::uint32_t r : order) {
            off += (rng() % 8) * kCacheLineBytes; // gap: regions are not back to back
            bases_[r] = off;
            off += region_bytes;
        }
        arena_.assign(off, 0);
    }

    const KVLayoutSpec& layout() const { return layout_; }
    std::uint32_t n_blocks() const { return n_blocks_; }
    std::uint64_t arena_bytes() const { return arena_.size(); }
    std::uint8_t* arena() { return arena_.data(); }
    const std::uint8_t* arena() const { return arena_.data(); }

    std::uint64_t region_base(std::uint32_t layer, std::uint32_t kv) const {
        if (layer >= layout_.n_layers || kv > 1) throw Error("region out of range");
        return bases_[layer * 2 + kv];
    }

    std::uint64_t chunk_offset(std::uint32_t layer, std::uint32_t kv, std::uint32_t block) const {
        if (block >= n_blocks_) throw Error("block index out of range");
        return region_base(layer, kv) + std::uint64_t(block) * layout_.chunk_bytes();
    }

    void fill_random(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (auto& b : arena_) b = static_cast<std::uint8_t>(rng());
    }

    std::span<const std::uint8_t> chunk_span(std::uint32_t layer, std::uint32_t kv,
                                             std::uint32_t block) const {
        return {arena_.data() + chunk_offset(layer, kv, block), layout_.chunk_bytes()};
    }

private:
    KVLayoutSpec layout_;
    std::uint32_t n_blocks_;
    std::vector<std::uint64_t> bases_; // index = layer * 2 + kv
    std::vector<std::uint8_t> arena_;
};

/// Dense plan: exactly chunks_per_block descriptors whose pool offsets tile
/// [0, block_bytes) in (layer-major, K before V) order.
inline DescriptorList build_gather_descriptors(const KVLayoutSpec& layout,
                                               const FragmentedBuffer& buffer,
                                               std::uint32_t block_index) {
    layout.validate();
    if (layout.block_bytes() != buffer.layout().block_bytes() ||
        layout.n_layers != buffer.layout().n_layers)
        throw Error("layout/buffer mismatch");
    if (block_index >= buffer.n_blocks()) throw Error("block index out of range");
    DescriptorList out;
    out.reserve(layout.chunks_per_block());
    const std::uint64_t chunk = layout.chunk_bytes();
    for (std::uint32_t l = 0; l < layout.n_layers; ++l)
        for (std::uint32_t kv = 0; kv < 2; ++kv)
            out.push_back({buffer.chunk_offset(l, kv, block_index),
                           (std::uint64_t(l) * 2 + kv) * chunk, chunk});
    return out;
}

/// Per-(layer, head) sorted token-index lists driving a sparse read plan.
class SparseSelection {
public:
    explicit SparseSelection(const KVLayoutSpec& layout)
        : layout_(layout), tokens_(std::size_t(layout.n_layers) * layout.n_kv_heads) {}

    void select(std::uint32_t layer, std::uint32_t head, std::vector<std::uint32_t> sorted_tokens) {
        tokens_.at(std::size_t(layer) * layout_.n_kv_heads + head) = std::move(sorted_tokens);
    }

    const std::vector<std::uint32_t>& at(std::uint32_t layer, std::uint32_t head) const {
        return tokens_.at(std::size_t(layer) * layout_.n_kv_heads + head);
    }

    /// token t selected for every head of every layer
    static SparseSelection single_token(const KVLayoutSpec& layout, std::uint32_t t) {
        SparseSelection s(layout);
        for (std::uint32_t l = 0; l < layout.n_layers; ++l)
            for (std::uint32_t h = 0; h < layout.n_kv_heads; ++h)
                s.select(l, h, {t});
        return s;
    }

    static SparseSelection full_block(const KVLayoutSpec& layout, std::uint32_t block) {
        SparseSelection s(layout);
        std::vector<std::uint32_t> run(layout.tokens_per_block);
        for (std::uint32_t i = 0; i < layout.tokens_per_block; ++i)
            run[i] = block * layout.tokens_per_block + i;
        for (std::uint32_t l = 0; l < layout.n_layers; ++l)
            for (std::uint32_t h = 0; h < layout.n_kv_heads; ++h)
                s.select(l, h, run);
        return s;
    }

private:
    KVLayoutSpec layout_;
    std::vector<std::vector<std::uint32_t>> tokens_;
};

/// Sparse plan: one descriptor per (layer, head, K/V, contiguous token run),
/// coalesced wherever both the pool side and the device side are contiguous.
/// Pool offsets are relative to block 0 of the selection's block range.
inline DescriptorList build_sparse_descriptors(const KVLayoutSpec& layout,
                                               const FragmentedBuffer& buffer,
                                               const SparseSelection& sel) {
    layout.validate();
    const std::uint64_t chunk = layout.chunk_bytes();
    const std::uint64_t head_span = layout.head_span_bytes();
    const std::uint64_t per_tok = layout.per_token_per_head_bytes();
    const std::uint32_t tpb = layout.tokens_per_block;

    DescriptorList out;
    for (std::uint32_t l = 0; l < layout.n_layers; ++l) {
        for (std::uint32_t kv = 0; kv < 2; ++kv) {
            for (std::uint32_t h = 0; h < layout.n_kv_heads; ++h) {
                const auto& toks = sel.at(l, h);
                std::size_t i = 0;
                while (i < toks.size()) {
                    // maximal run of consecutive tokens inside one block
                    std::size_t j = i + 1;
                    while (j < toks.size() && toks[j] == toks[j - 1] + 1 &&
                           toks[j] / tpb == toks[i] / tpb)
                        ++j;
                    const std::uint32_t block = toks[i] / tpb;
                    const std::uint32_t pos = toks[i] % tpb;
                    if (block >= buffer.n_blocks()) throw Error("sparse token index out of range");
                    const std::uint64_t in_chunk = h * head_span + pos * per_tok;
                    const std::uint64_t run_bytes = (j - i) * per_tok;
                    out.push_back({buffer.chunk_offset(l, kv, block) + in_chunk,
                                   std::uint64_t(block) * layout.block_bytes() +
                                       (std::uint64_t(l) * 2 + kv) * chunk + in_chunk,
                                   run_bytes});
                    i = j;
                }
            }
        }
    }
    // run coalescing: merge neighbors contiguous on both sides
    DescriptorList merged;
    for (const auto& d : out) {
        if (!merged.empty() && merged.back().gpu_offset + merged.back().length == d.gpu_offset &&
            merged.back().pool_offset + merged.back().length == d.pool_offset)
            merged.back().length += d.length;
        else
            merged.push_back(d);
    }
    return merged;
}

enum class ExecMode {
    Batched,       // whole list in one invocation (custom-kernel path)
    PerDescriptor, // one invocation per fragment (the sglist-style baseline)
};

struct TransferStats {
    std::uint64_t bytes_moved = 0;
    std::uint64_t launch_calls = 0;
};

namespace detail {
inline void validate_descriptors(const DescriptorList& descs, const FragmentedBuffer& buffer,
                                 PoolAddress pool_addr, bool require_full) {
    std::uint64_t total = 0;
    for (const auto& d : descs) {
        if (d.gpu_offset + d.length > buffer.arena_bytes())
            throw Error("descriptor source out of range");
        if (d.pool_offset + d.length > pool_addr.length)
            throw Error("descriptor exceeds pool range");
        total += d.length;
    }
    if (require_full && total != pool_addr.length)
        throw Error("descriptor lengths (" + std::to_string(total) + ") do not cover pool range (" +
                    std::to_string(pool_addr.length) + ")");
}
} // namespace detail

/// Gather write: many device fragments into one contiguous pool block range.
/// Descriptor lengths must cover pool_addr exactly. Writes take the session's
/// device path, so they bypass the cache unless DDIO steering is simulated.
inline void gather_write(CoherentSession& session, const FragmentedBuffer& buffer,
                         const DescriptorList& descs, PoolAddress pool_addr,
                         TransferStats* stats = nullptr, ExecMode mode = ExecMode::Batched) {
    detail::validate_descriptors(descs, buffer, pool_addr, /*require_full=*/true);
    for (const auto& d : descs) {
        session.device_write(pool_addr.offset + d.pool_offset, buffer.arena() + d.gpu_offset,
                             d.length);
        if (mode == ExecMode::PerDescriptor) {
            session.fence();
            if (stats) stats->launch_calls++;
        }
        if (stats) stats->bytes_moved += d.length;
    }
    if (mode == ExecMode::Batched) {
        session.fence();
        if (stats) stats->launch_calls++;
    }
}

/// Scatter read: slices of one contiguous pool range into device fragments.
/// Partial coverage is allowed (sparse reads).
inline void scatter_read(CoherentSession& session, PoolAddress pool_addr, FragmentedBuffer& buffer,
                         const DescriptorList& descs, TransferStats* stats = nullptr,
                         ExecMode mode = ExecMode::Batched) {
    detail::validate_descriptors(descs, buffer, pool_addr, /*require_full=*/false);
    for (const auto& d : descs) {
        session.read_fresh(pool_addr.offset + d.pool_offset, buffer.arena() + d.gpu_offset,
                           d.length);
        if (stats) {
            stats->bytes_moved += d.length;
            if (mode == ExecMode::PerDescriptor) stats->launch_calls++;
        }
    }
    if (mode == ExecMode::Batched && stats) stats->launch_calls++;
}

/// Two-hop baseline: fragments are serialized into a host staging arena and
/// the staging copy is then moved to the pool in bulk. Moves exactly twice
/// the payload bytes of the direct path.
inline void staged_copy_baseline(CoherentSession& session, const FragmentedBuffer& buffer,
                                 const DescriptorList& descs, std::vector<std::uint8_t>& staging,
                                 PoolAddress pool_addr, TransferStats* stats = nullptr) {
    detail::validate_descriptors(descs, buffer, pool_addr, /*require_full=*/true);
    if (staging.size() < pool_addr.length) throw Error("staging buffer too small");
    for (const auto& d : descs) {
        std::memcpy(staging.data() + d.pool_offset, buffer.arena() + d.gpu_offset, d.length);
        if (stats) stats->bytes_moved += d.length;
    }
    if (stats) stats->launch_calls++;
    // the host-to-pool hop is a CPU-originated bulk write
    session.bypass_write(pool_addr.offset, staging.data(), pool_addr.length);
    session.fence();
    if (stats) {
        stats->bytes_moved += pool_addr.length;
        stats->launch_calls++;
    }
}

enum class CopyDirection { Cpu, DeviceRead, DeviceWrite };
enum class CopyMethod { DirectSmall, BulkEngine, CustomKernelPath };

struct CopyThresholds {
    std::uint64_t cpu_small_bytes = 4 * kKiB;     // below: plain load/store beats the DMA engine
    std::uint64_t device_small_bytes = 24 * kKiB; // below: custom kernel beats the bulk path
};

/// Pure size-threshold method selection for a single transfer.
inline CopyMethod select_copy_method(std::uint64_t size_bytes, CopyDirection dir,
                                     const CopyThresholds& t = {}) {
    if (size_bytes == 0) throw Error("select_copy_method: size must be > 0");
    switch (dir) {
    case CopyDirection::Cpu:
        return size_bytes < t.cpu_small_bytes ? CopyMethod::DirectSmall : CopyMethod::BulkEngine;
    case CopyDirection::DeviceRead:
    case CopyDirection::DeviceWrite:
        return size_bytes < t.device_small_bytes ? CopyMethod::CustomKernelPath
                                                 : CopyMethod::BulkEngine;
    }
    throw Error("select_copy_method: bad direction");
}

} // namespace poolkv
