#pragma once

/// RPC surface of the global KVCache index. One metadata server process owns
/// the KvIndex and serializes every mutation through its poller; clients are
/// stateless and speak the fixed 64-byte encoding below.
///
/// Request (little-endian):
///   [op:1B][hash:16B][addr:8B][len:4B][aux:8B][zero padding]
///   offsets:  op@0  hash@1 (hi,lo)  addr@17  len@25  aux@29
///   aux carries the ticket (COMPLETE), bytes_needed (EVICT) or cursor (DUMP).
///
/// Response:
///   [status:1B][state:1B][pad:2B][len:4B][addr:8B][ticket:8B][aux:8B][hash:16B]
///   except STAT, which packs IndexStats counters at offsets 8..64.

#include "poolkv/kv_index.hpp"
#include "poolkv/rpc.hpp"

namespace poolkv {

enum class IndexOp : std::uint8_t {
    Lookup = 1,
    Insert = 2,
    Complete = 3,
    Match = 4,
    Evict = 5,
    Stat = 6,
    Dump = 7,
};

enum class IndexStatus : std::uint8_t {
    Ok = 0,
    NotFound = 1,
    InFlight = 2,
    Exists = 3,
    BadTicket = 4,
    OutOfSpace = 5,
    BadRequest = 6,
    End = 7, // dump cursor past the last entry
};

struct IndexRequest {
    IndexOp op = IndexOp::Lookup;
    BlockHash hash;
    std::uint64_t addr = 0;
    std::uint32_t len = 0;
    std::uint64_t aux = 0;
};

struct IndexResponse {
    IndexStatus status = IndexStatus::Ok;
    std::uint8_t state = 0;
    std::uint32_t len = 0;
    std::uint64_t addr = 0;
    std::uint64_t ticket = 0;
    std::uint64_t aux = 0;
    BlockHash hash;
};

namespace wire {

inline void put_u32(std::uint8_t* p, std::uint32_t v) { std::memcpy(p, &v, 4); }
inline void put_u64(std::uint8_t* p, std::uint64_t v) { std::memcpy(p, &v, 8); }
inline std::uint32_t get_u32(const std::uint8_t* p) { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
inline std::uint64_t get_u64(const std::uint8_t* p) { std::uint64_t v; std::memcpy(&v, p, 8); return v; }

inline void pack_request(const IndexRequest& r, std::span<std::uint8_t> out) {
    std::fill(out.begin(), out.end(), 0);
    out[0] = static_cast<std::uint8_t>(r.op);
    put_u64(out.data() + 1, r.hash.hi);
    put_u64(out.data() + 9, r.hash.lo);
    put_u64(out.data() + 17, r.addr);
    put_u32(out.data() + 25, r.len);
    put_u64(out.data() + 29, r.aux);
}

inline IndexRequest unpack_request(std::span<const std::uint8_t> in) {
    IndexRequest r;
    r.op = static_cast<IndexOp>(in[0]);
    r.hash.hi = get_u64(in.data() + 1);
    r.hash.lo = get_u64(in.data() + 9);
    r.addr = get_u64(in.data() + 17);
    r.len = get_u32(in.data() + 25);
    r.aux = get_u64(in.data() + 29);
    return r;
}

inline void pack_response(const IndexResponse& r, std::span<std::uint8_t> out) {
    std::fill(out.begin(), out.end(), 0);
    out[0] = static_cast<std::uint8_t>(r.status);
    out[1] = r.state;
    put_u32(out.data() + 4, r.len);
    put_u64(out.data() + 8, r.addr);
    put_u64(out.data() + 16, r.ticket);
    put_u64(out.data() + 24, r.aux);
    put_u64(out.data() + 32, r.hash.hi);
    put_u64(out.data() + 40, r.hash.lo);
}

inline IndexResponse unpack_response(std::span<const std::uint8_t> in) {
    IndexResponse r;
    r.status = static_cast<IndexStatus>(in[0]);
    r.state = in[1];
    r.len = get_u32(in.data() + 4);
    r.addr = get_u64(in.data() + 8);
    r.ticket = get_u64(in.data() + 16);
    r.aux = get_u64(in.data() + 24);
    r.hash.hi = get_u64(in.data() + 32);
    r.hash.lo = get_u64(in.data() + 40);
    return r;
}

inline void pack_stats(const IndexStats& s, std::span<std::uint8_t> out) {
    std::fill(out.begin(), out.end(), 0);
    out[0] = static_cast<std::uint8_t>(IndexStatus::Ok);
    put_u64(out.data() + 8, s.entries);
    put_u64(out.data() + 16, s.ready);
    put_u64(out.data() + 24, s.writing);
    put_u64(out.data() + 32, s.live_bytes);
    put_u64(out.data() + 40, s.hits);
    put_u64(out.data() + 48, s.misses);
    put_u64(out.data() + 56, s.evictions);
}

inline IndexStats unpack_stats(std::span<const std::uint8_t> in) {
    IndexStats s;
    s.entries = get_u64(in.data() + 8);
    s.ready = get_u64(in.data() + 16);
    s.writing = get_u64(in.data() + 24);
    s.live_bytes = get_u64(in.data() + 32);
    s.hits = get_u64(in.data() + 40);
    s.misses = get_u64(in.data() + 48);
    s.evictions = get_u64(in.data() + 56);
    return s;
}

} // namespace wire

/// Server-side request handler. Evicted blocks go straight back to the pool
/// allocator; everything else is delegated to the in-memory index.
class IndexService {
public:
    IndexService(KvIndex& index, PoolHandle& pool) : index_(index), pool_(pool) {
        // all hosts must chain hashes the same way; the pool header pins it
        if (pool.hash_algo() != 1)
            throw ConfigError("pool uses an unknown block-hash algorithm");
    }

    RpcServer::Handler handler() {
        return [this](std::span<const std::uint8_t> req, std::span<std::uint8_t> resp) {
            handle(req, resp);
        };
    }

    void handle(std::span<const std::uint8_t> reqb, std::span<std::uint8_t> respb) {
        const IndexRequest req = wire::unpack_request(reqb);
        IndexResponse resp;
        switch (req.op) {
        case IndexOp::Lookup:
        case IndexOp::Match: {
            auto e = req.op == IndexOp::Match ? index_.match(req.hash) : index_.lookup(req.hash);
            if (!e) {
                resp.status = IndexStatus::NotFound;
            } else {
                resp.addr = e->addr.offset;
                resp.len = static_cast<std::uint32_t>(e->addr.length);
                resp.state = static_cast<std::uint8_t>(e->state);
                resp.hash = e->hash;
            }
            break;
        }
        case IndexOp::Insert: {
            auto r = index_.insert(req.hash, PoolAddress{req.addr, req.len});
            resp.ticket = r.ticket;
            resp.status = r.status == KvIndex::InsertStatus::Ok        ? IndexStatus::Ok
                          : r.status == KvIndex::InsertStatus::InFlight ? IndexStatus::InFlight
                                                                        : IndexStatus::Exists;
            break;
        }
        case IndexOp::Complete:
            try {
                index_.complete(req.aux);
            } catch (const Error&) {
                resp.status = IndexStatus::BadTicket;
            }
            break;
        case IndexOp::Evict: {
            if (req.aux == 0) {
                resp.status = IndexStatus::BadRequest;
                break;
            }
            auto r = index_.evict(req.aux);
            for (const auto& a : r.freed) pool_.free_block(a);
            resp.aux = r.freed_bytes;
            resp.status = r.satisfied ? IndexStatus::Ok : IndexStatus::OutOfSpace;
            break;
        }
        case IndexOp::Stat:
            wire::pack_stats(index_.stats(), respb);
            return;
        case IndexOp::Dump: {
            if (req.aux == 0) {
                dump_snapshot_.clear();
                index_.for_each([this](const IndexEntry& e) { dump_snapshot_.push_back(e); });
            }
            if (req.aux >= dump_snapshot_.size()) {
                resp.status = IndexStatus::End;
                resp.aux = dump_snapshot_.size();
            } else {
                const auto& e = dump_snapshot_[req.aux];
                resp.hash = e.hash;
                resp.addr = e.addr.offset;
                resp.len = static_cast<std::uint32_t>(e.addr.length);
                resp.state = static_cast<std::uint8_t>(e.state);
                resp.aux = dump_snapshot_.size();
            }
            break;
        }
        default:
            resp.status = IndexStatus::BadRequest;
        }
        wire::pack_response(resp, respb);
    }

private:
    KvIndex& index_;
    PoolHandle& pool_;
    std::vector<IndexEntry> dump_snapshot_;
};

/// Typed client over the raw RPC channel.
class IndexClient {
public:
    explicit IndexClient(RpcChannel& ch, RpcClientOptions opts = {}) : rpc_(ch, opts) {}

    RpcClient& rpc() { return rpc_; }

    struct InsertOutcome {
        IndexStatus status;
        std::uint64_t ticket = 0;
    };

    InsertOutcome insert(const BlockHash& h, PoolAddress addr) {
        IndexRequest req;
        req.op = IndexOp::Insert;
        req.hash = h;
        req.addr = addr.offset;
        req.len = static_cast<std::uint32_t>(addr.length);
        auto resp = roundtrip(req);
        return {resp.status, resp.ticket};
    }

    bool complete(std::uint64_t ticket) {
        IndexRequest req;
        req.op = IndexOp::Complete;
        req.aux = ticket;
        return roundtrip(req).status == IndexStatus::Ok;
    }

    std::optional<PoolAddress> lookup(const BlockHash& h) { return point_query(IndexOp::Lookup, h); }
    std::optional<PoolAddress> match(const BlockHash& h) { return point_query(IndexOp::Match, h); }

    /// Client-side longest-prefix walk: chain hashes locally, MATCH per block
    /// until the first miss.
    std::vector<std::pair<BlockHash, PoolAddress>> match_prefix(std::span<const std::int32_t> tokens,
                                                                std::uint32_t block_tokens = kDefaultBlockTokens) {
        std::vector<std::pair<BlockHash, PoolAddress>> out;
        for (const auto& h : prompt_block_hashes(tokens, block_tokens)) {
            auto a = match(h);
            if (!a) break;
            out.emplace_back(h, *a);
        }
        return out;
    }

    struct EvictOutcome {
        bool satisfied = false;
        std::uint64_t freed_bytes = 0;
    };

    EvictOutcome evict(std::uint64_t bytes_needed) {
        IndexRequest req;
        req.op = IndexOp::Evict;
        req.aux = bytes_needed;
        auto resp = roundtrip(req);
        return {resp.status == IndexStatus::Ok, resp.aux};
    }

    IndexStats stat() {
        IndexRequest req;
        req.op = IndexOp::Stat;
        std::vector<std::uint8_t> buf(64);
        wire::pack_request(req, buf);
        auto respb = rpc_.call(buf);
        return wire::unpack_stats(respb);
    }

    template <typename Fn> // Fn(const IndexResponse&)
    void dump(Fn&& fn) {
        std::uint64_t cursor = 0;
        for (;;) {
            IndexRequest req;
            req.op = IndexOp::Dump;
            req.aux = cursor;
            auto resp = roundtrip(req);
            if (resp.status == IndexStatus::End) break;
            fn(resp);
            cursor++;
        }
    }

private:
    std::optional<PoolAddress> point_query(IndexOp op, const BlockHash& h) {
        IndexRequest req;
        req.op = op;
        req.hash = h;
        auto resp = roundtrip(req);
        if (resp.status != IndexStatus::Ok) return std::nullopt;
        return PoolAddress{resp.addr, resp.len};
    }

    IndexResponse roundtrip(const IndexRequest& req) {
        std::vector<std::uint8_t> buf(64);
        wire::pack_request(req, buf);
        auto respb = rpc_.call(buf);
        return wire::unpack_response(respb);
    }

    RpcClient rpc_;
};

} // namespace poolkv
