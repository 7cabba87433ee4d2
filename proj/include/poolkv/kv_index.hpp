#pragma once

/// Global KVCache index: chained 128-bit token-block hashes mapped to pool
/// addresses with two-phase (WRITING -> READY) visibility, reference counts,
/// and LRU eviction. A single metadata server process owns one of these; all
/// other hosts reach it through the RPC service in index_service.hpp.

#include "poolkv/common.hpp"
#include "poolkv/pool.hpp"

#include <cstdint>
#include <list>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace poolkv {

inline constexpr std::uint32_t kDefaultBlockTokens = 16;

struct BlockHash {
    std::uint64_t hi = 0;
    std::uint64_t lo = 0;
    bool operator==(const BlockHash&) const = default;
};

struct BlockHashHasher {
    std::size_t operator()(const BlockHash& h) const { return h.hi ^ (h.lo * 0x9E3779B97F4A7C15ull); }
};

namespace detail {

// MurmurHash3 x64 128-bit (public-domain algorithm). Non-cryptographic but
// well distributed; algorithm id 1 in the pool header.
inline std::uint64_t fmix64(std::uint64_t k) {
    k ^= k >> 33;
    k *= 0xff51afd7ed558ccdull;
    k ^= k >> 33;
    k *= 0xc4ceb9fe1a85ec53ull;
    k ^= k >> 33;
    return k;
}

inline BlockHash murmur3_x64_128(const void* key, std::size_t len, std::uint64_t seed) {
    const auto* data = static_cast<const std::uint8_t*>(key);
    const std::size_t nblocks = len / 16;
    std::uint64_t h1 = seed, h2 = seed;
    const std::uint64_t c1 = 0x87c37b91114253d5ull;
    const std::uint64_t c2 = 0x4cf5ad432745937full;

    auto rotl64 = [](std::uint64_t x, int r) { return (x << r) | (x >> (64 - r)); };

    for (std::size_t i = 0; i < nblocks; ++i) {
        std::uint64_t k1, k2;
        std::memcpy(&k1, data + i * 16, 8);
        std::memcpy(&k2, data + i * 16 + 8, 8);
        k1 *= c1; k1 = rotl64(k1, 31); k1 *= c2; h1 ^= k1;
        h1 = rotl64(h1, 27); h1 += h2; h1 = h1 * 5 + 0x52dce729;
        k2 *= c2; k2 = rotl64(k2, 33); k2 *= c1; h2 ^= k2;
        h2 = rotl64(h2, 31); h2 += h1; h2 = h2 * 5 + 0x38495ab5;
    }

    const std::uint8_t* tail = data + nblocks * 16;
    std::uint64_t k1 = 0, k2 = 0;
    switch (len & 15) {
    case 15: k2 ^= std::uint64_t(tail[14]) << 48; [[fallthrough]];
    case 14: k2 ^= std::uint64_t(tail[13]) << 40; [[fallthrough]];
    case 13: k2 ^= std::uint64_t(tail[12]) << 32; [[fallthrough]];
    case 12: k2 ^= std::uint64_t(tail[11]) << 24; [[fallthrough]];
    case 11: k2 ^= std::uint64_t(tail[10]) << 16; [[fallthrough]];
    case 10: k2 ^= std::uint64_t(tail[9]) << 8; [[fallthrough]];
    case 9:  k2 ^= std::uint64_t(tail[8]);
             k2 *= c2; k2 = rotl64(k2, 33); k2 *= c1; h2 ^= k2; [[fallthrough]];
    case 8:  k1 ^= std::uint64_t(tail[7]) << 56; [[fallthrough]];
    case 7:  k1 ^= std::uint64_t(tail[6]) << 48; [[fallthrough]];
    case 6:  k1 ^= std::uint64_t(tail[5]) << 40; [[fallthrough]];
    case 5:  k1 ^= std::uint64_t(tail[4]) << 32; [[fallthrough]];
    case 4:  k1 ^= std::uint64_t(tail[3]) << 24; [[fallthrough]];
    case 3:  k1 ^= std::uint64_t(tail[2]) << 16; [[fallthrough]];
    case 2:  k1 ^= std::uint64_t(tail[1]) << 8; [[fallthrough]];
    case 1:  k1 ^= std::uint64_t(tail[0]);
             k1 *= c1; k1 = rotl64(k1, 31); k1 *= c2; h1 ^= k1;
    }

    h1 ^= len; h2 ^= len;
    h1 += h2; h2 += h1;
    h1 = fmix64(h1); h2 = fmix64(h2);
    h1 += h2; h2 += h1;
    return {h1, h2};
}

} // namespace detail

/// Root of every hash chain (the empty prefix).
inline constexpr BlockHash kRootHash{0x6265746f6b656e73ull, 0x726f6f74626c6f63ull};
inline constexpr std::uint64_t kHashSeed = 0x42;

/// Digest over (parent || token_ids); exactly block_tokens tokens per block.
inline BlockHash chain_hash(const BlockHash& parent, std::span<const std::int32_t> token_ids,
                            std::uint32_t block_tokens = kDefaultBlockTokens) {
    if (token_ids.size() != block_tokens)
        throw Error("chain_hash: expected exactly " + std::to_string(block_tokens) + " tokens");
    std::vector<std::uint8_t> buf(16 + token_ids.size() * 4);
    std::memcpy(buf.data(), &parent.hi, 8);
    std::memcpy(buf.data() + 8, &parent.lo, 8);
    std::memcpy(buf.data() + 16, token_ids.data(), token_ids.size() * 4);
    return detail::murmur3_x64_128(buf.data(), buf.size(), kHashSeed);
}

/// Hashes for every complete block of a prompt, chained from the root.
inline std::vector<BlockHash> prompt_block_hashes(std::span<const std::int32_t> tokens,
                                                  std::uint32_t block_tokens = kDefaultBlockTokens) {
    std::vector<BlockHash> out;
    BlockHash parent = kRootHash;
    for (std::size_t i = 0; i + block_tokens <= tokens.size(); i += block_tokens) {
        parent = chain_hash(parent, tokens.subspan(i, block_tokens), block_tokens);
        out.push_back(parent);
    }
    return out;
}

enum class EntryState : std::uint8_t { Writing = 0, Ready = 1 };

struct IndexEntry {
    BlockHash hash;
    PoolAddress addr;
    EntryState state = EntryState::Writing;
    std::uint32_t ref_count = 0;
    std::uint64_t last_access = 0;
};

struct IndexStats {
    std::uint64_t entries = 0;
    std::uint64_t ready = 0;
    std::uint64_t writing = 0;
    std::uint64_t live_bytes = 0;
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    std::uint64_t evictions = 0;
};

class KvIndex {
public:
    enum class InsertStatus : std::uint8_t { Ok = 0, InFlight = 1, Exists = 2 };
    struct InsertResult {
        InsertStatus status;
        std::uint64_t ticket = 0;
    };
    struct EvictResult {
        std::vector<PoolAddress> freed;
        std::uint64_t freed_bytes = 0;
        bool satisfied = false;
    };

    explicit KvIndex(std::uint32_t block_tokens = kDefaultBlockTokens)
        : block_tokens_(block_tokens) {}

    std::uint32_t block_tokens() const { return block_tokens_; }

    /// Phase one: create a WRITING entry invisible to lookups. A concurrent
    /// second inserter for the same hash is told the write is in flight.
    InsertResult insert(const BlockHash& h, PoolAddress addr) {
        auto it = map_.find(h);
        if (it != map_.end()) {
            return {it->second.state == EntryState::Writing ? InsertStatus::InFlight
                                                            : InsertStatus::Exists, 0};
        }
        IndexEntry e;
        e.hash = h;
        e.addr = addr;
        e.state = EntryState::Writing;
        e.last_access = ++clock_;
        map_.emplace(h, e);
        const std::uint64_t ticket = next_ticket_++;
        pending_[ticket] = h;
        return {InsertStatus::Ok, ticket};
    }

    /// Phase two: flip to READY; the entry becomes visible to readers.
    void complete(std::uint64_t ticket) {
        auto p = pending_.find(ticket);
        if (p == pending_.end()) throw Error("complete: invalid ticket");
        auto it = map_.find(p->second);
        pending_.erase(p);
        if (it == map_.end()) throw Error("complete: entry vanished");
        it->second.state = EntryState::Ready;
        lru_.push_front(it->first);
        lru_pos_[it->first] = lru_.begin();
    }

    /// READY entries only. Does not touch LRU order (introspection).
    std::optional<IndexEntry> lookup(const BlockHash& h) const {
        auto it = map_.find(h);
        if (it == map_.end() || it->second.state != EntryState::Ready) return std::nullopt;
        return it->second;
    }

    /// Lookup on the read path: bumps LRU recency and hit/miss counters.
    std::optional<IndexEntry> match(const BlockHash& h) {
        auto it = map_.find(h);
        if (it == map_.end() || it->second.state != EntryState::Ready) {
            stats_.misses++;
            return std::nullopt;
        }
        it->second.last_access = ++clock_;
        touch_lru(h);
        stats_.hits++;
        return it->second;
    }

    /// Longest READY-cached chain of whole blocks of the prompt.
    std::vector<std::pair<BlockHash, PoolAddress>> match_prefix(std::span<const std::int32_t> tokens) {
        std::vector<std::pair<BlockHash, PoolAddress>> out;
        BlockHash parent = kRootHash;
        for (std::size_t i = 0; i + block_tokens_ <= tokens.size(); i += block_tokens_) {
            parent = chain_hash(parent, tokens.subspan(i, block_tokens_), block_tokens_);
            auto e = match(parent);
            if (!e) break;
            out.emplace_back(parent, e->addr);
        }
        return out;
    }

    void add_ref(const BlockHash& h) {
        auto it = map_.find(h);
        if (it == map_.end()) throw Error("add_ref: unknown hash");
        it->second.ref_count++;
    }

    void release(const BlockHash& h) {
        auto it = map_.find(h);
        if (it == map_.end() || it->second.ref_count == 0) throw Error("release: not referenced");
        it->second.ref_count--;
    }

    /// Evict READY, unreferenced entries in LRU order until bytes_needed is
    /// covered. Freed addresses are returned for the caller to hand back to
    /// the allocator.
    EvictResult evict(std::uint64_t bytes_needed) {
        if (bytes_needed == 0) throw Error("evict: bytes_needed must be > 0");
        EvictResult r;
        auto it = lru_.end();
        while (r.freed_bytes < bytes_needed && it != lru_.begin()) {
            --it; // back = least recently used
            auto e = map_.find(*it);
            if (e == map_.end()) { it = lru_.erase(it); continue; }
            if (e->second.ref_count > 0) continue; // pinned
            r.freed.push_back(e->second.addr);
            r.freed_bytes += e->second.addr.length;
            lru_pos_.erase(*it);
            map_.erase(e);
            it = lru_.erase(it);
            stats_.evictions++;
        }
        r.satisfied = r.freed_bytes >= bytes_needed;
        return r;
    }

    IndexStats stats() const {
        IndexStats s = stats_;
        s.entries = map_.size();
        for (const auto& [h, e] : map_) {
            if (e.state == EntryState::Ready) s.ready++;
            else s.writing++;
            s.live_bytes += e.addr.length;
        }
        return s;
    }

    template <typename Fn> // Fn(const IndexEntry&)
    void for_each(Fn&& fn) const {
        for (const auto& [h, e] : map_) fn(e);
    }

private:
    void touch_lru(const BlockHash& h) {
        auto p = lru_pos_.find(h);
        if (p == lru_pos_.end()) return;
        lru_.splice(lru_.begin(), lru_, p->second);
    }

    std::uint32_t block_tokens_;
    std::unordered_map<BlockHash, IndexEntry, BlockHashHasher> map_;
    std::unordered_map<std::uint64_t, BlockHash> pending_;
    std::list<BlockHash> lru_; // READY entries, front = most recent
    std::unordered_map<BlockHash, std::list<BlockHash>::iterator, BlockHashHasher> lru_pos_;
    std::uint64_t next_ticket_ = 1;
    std::uint64_t clock_ = 0;
    IndexStats stats_;
};

} // namespace poolkv
