#pragma once

/// Shared-memory RPC over the pool's reserved slot range: fixed-size
/// request/response slots with status flags, client bypass-writes, server
/// polling with flush-before-read, and batched fences.
///
/// Per-slot wire format (little-endian, offsets within the slot):
///   [status : 8 B, padded to 64]   0=EMPTY 1=REQ_READY 2=PROCESSING 3=RESP_READY
///   [seq    : 8 B, padded to 64]   odd = claimed; byte 8 of this line carries
///                                  the server result code (0 ok, 1 handler error)
///   [request  : payload, padded to a 64 B multiple]
///   [response : payload, padded to a 64 B multiple]
/// The status word lives alone in its line to avoid false sharing with data.
///
/// Slot lifecycle: a client claims a free slot by CAS on the seq word
/// (even -> odd), publishes the request with a release-store of REQ_READY,
/// and returns the slot by storing seq+1 (even again) and status EMPTY.
/// Status itself only ever cycles EMPTY -> REQ_READY -> PROCESSING ->
/// RESP_READY -> EMPTY; timeout reclamation takes the documented shortcut
/// REQ_READY -> EMPTY when the server never picked the request up.

#include "poolkv/coherence.hpp"

#include <cassert>
#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace poolkv {

inline constexpr std::uint64_t kChannelMagic = 0x504B565250433031ull; // "PKVRPC01"

enum SlotStatus : std::uint64_t {
    kSlotEmpty = 0,
    kSlotReqReady = 1,
    kSlotProcessing = 2,
    kSlotRespReady = 3,
};

namespace detail {
inline void cpu_relax() {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_ia32_pause();
#endif
}

struct Backoff {
    int spins = 0;
    void wait() {
        if (++spins < 64) cpu_relax();
        else sched_yield();
    }
};

inline void check_slot_transition(std::uint64_t from, std::uint64_t to) {
    // Shadow state-machine check, active in debug builds only.
    assert((from == kSlotEmpty && to == kSlotReqReady) ||
           (from == kSlotReqReady && to == kSlotProcessing) ||
           (from == kSlotProcessing && to == kSlotRespReady) ||
           (from == kSlotRespReady && to == kSlotEmpty) ||
           (from == kSlotReqReady && to == kSlotEmpty)); // timeout reclaim
    (void)from;
    (void)to;
}
} // namespace detail

class RpcError : public Error {
public:
    enum class Kind { Timeout, ChannelFull, HandlerError };
    RpcError(Kind k, const std::string& what) : Error(what), kind(k) {}
    Kind kind;
};

/// Latency histogram in 1 microsecond buckets plus overflow.
class LatencyHistogram {
public:
    static constexpr std::size_t kBuckets = 4096;

    void record_us(double us) {
        count_++;
        sum_us_ += us;
        auto b = static_cast<std::size_t>(us);
        if (b >= kBuckets) overflow_++;
        else buckets_[b]++;
    }

    std::uint64_t count() const { return count_; }
    double mean_us() const { return count_ ? sum_us_ / double(count_) : 0.0; }

    double percentile(double p) const {
        if (count_ == 0) return 0.0;
        const auto target = static_cast<std::uint64_t>(p * double(count_ - 1)) + 1;
        std::uint64_t seen = 0;
        for (std::size_t b = 0; b < kBuckets; ++b) {
            seen += buckets_[b];
            if (seen >= target) return double(b);
        }
        return double(kBuckets); // in the overflow bucket
    }

    void merge(const LatencyHistogram& o) {
        for (std::size_t b = 0; b < kBuckets; ++b) buckets_[b] += o.buckets_[b];
        overflow_ += o.overflow_;
        count_ += o.count_;
        sum_us_ += o.sum_us_;
    }

private:
    std::vector<std::uint64_t> buckets_ = std::vector<std::uint64_t>(kBuckets, 0);
    std::uint64_t overflow_ = 0;
    std::uint64_t count_ = 0;
    double sum_us_ = 0.0;
};

struct RpcStats {
    std::uint64_t calls = 0;
    std::uint64_t timeouts = 0;
    std::uint64_t handler_errors = 0;
    LatencyHistogram latency;       // submit -> response collected
    LatencyHistogram claim_latency; // time spent finding a free slot (queuing share)
};

/// Geometry view of the slot array living in the pool's reserved RPC range.
class RpcChannel {
public:
    // channel header words (offsets relative to the rpc space base)
    static constexpr std::uint64_t kOffMagic = 0;
    static constexpr std::uint64_t kOffGeom = 8;    // slot_count u32 | payload u32
    static constexpr std::uint64_t kOffStride = 16;
    static constexpr std::uint64_t kOffStop = 24;
    static constexpr std::uint64_t kOffServed = 32;
    static constexpr std::uint64_t kSlotsBase = 64;

    static RpcChannel create(PoolHandle& pool, std::uint32_t slot_count = 128,
                             std::uint32_t payload_bytes = 64) {
        if (slot_count == 0) throw ConfigError("create_channel: slot_count must be > 0");
        if (payload_bytes == 0) throw ConfigError("create_channel: payload_bytes must be > 0");
        const std::uint64_t stride = 2 * kCacheLineBytes + 2 * align_up(payload_bytes, kCacheLineBytes);
        const std::uint64_t need = kSlotsBase + std::uint64_t(slot_count) * stride;
        if (need > pool.rpc_space_bytes())
            throw ConfigError("create_channel: insufficient reserved space (" +
                              std::to_string(need) + " > " + std::to_string(pool.rpc_space_bytes()) + ")");
        const std::uint64_t base = pool.rpc_space_base();
        std::vector<std::uint8_t> zero(need, 0);
        pool.write_bytes(base, zero.data(), need);
        pool.store_u64(base + kOffStride, stride, std::memory_order_relaxed);
        pool.store_u64(base + kOffGeom,
                       std::uint64_t(slot_count) | (std::uint64_t(payload_bytes) << 32),
                       std::memory_order_relaxed);
        pool.store_u64(base + kOffMagic, kChannelMagic, std::memory_order_release);
        return RpcChannel(pool, slot_count, payload_bytes, stride);
    }

    static RpcChannel attach(PoolHandle& pool) {
        const std::uint64_t base = pool.rpc_space_base();
        if (pool.load_u64(base + kOffMagic, std::memory_order_acquire) != kChannelMagic)
            throw Error("attach_channel: no channel in this pool");
        const std::uint64_t geom = pool.load_u64(base + kOffGeom, std::memory_order_relaxed);
        const std::uint64_t stride = pool.load_u64(base + kOffStride, std::memory_order_relaxed);
        return RpcChannel(pool, static_cast<std::uint32_t>(geom & 0xffffffffu),
                          static_cast<std::uint32_t>(geom >> 32), stride);
    }

    PoolHandle& pool() const { return pool_; }
    std::uint32_t slot_count() const { return slot_count_; }
    std::uint32_t payload_bytes() const { return payload_; }

    std::uint64_t status_addr(std::uint32_t i) const { return slot(i); }
    std::uint64_t seq_addr(std::uint32_t i) const { return slot(i) + kCacheLineBytes; }
    std::uint64_t result_addr(std::uint32_t i) const { return seq_addr(i) + 8; }
    std::uint64_t request_addr(std::uint32_t i) const { return slot(i) + 2 * kCacheLineBytes; }
    std::uint64_t response_addr(std::uint32_t i) const {
        return request_addr(i) + align_up(payload_, kCacheLineBytes);
    }

    void request_stop() { pool_.store_u64(base() + kOffStop, 1, std::memory_order_release); }
    void clear_stop() { pool_.store_u64(base() + kOffStop, 0, std::memory_order_release); }
    bool stop_requested() const { return pool_.load_u64(base() + kOffStop, std::memory_order_acquire) != 0; }
    std::uint64_t served_total() const { return pool_.load_u64(base() + kOffServed, std::memory_order_relaxed); }
    void add_served(std::uint64_t n) { pool_.fetch_add_u64(base() + kOffServed, n); }

private:
    RpcChannel(PoolHandle& pool, std::uint32_t slots, std::uint32_t payload, std::uint64_t stride)
        : pool_(pool), slot_count_(slots), payload_(payload), stride_(stride) {}

    std::uint64_t base() const { return pool_.rpc_space_base(); }
    std::uint64_t slot(std::uint32_t i) const {
        if (i >= slot_count_) throw Error("slot index out of range");
        return base() + kSlotsBase + std::uint64_t(i) * stride_;
    }

    PoolHandle& pool_;
    std::uint32_t slot_count_;
    std::uint32_t payload_;
    std::uint64_t stride_;
};

struct RpcClientOptions {
    std::chrono::microseconds timeout{10'000'000};
    std::size_t cache_lines = 1024;
    bool break_read_fresh = false;
};

class RpcClient {
public:
    RpcClient(RpcChannel& ch, RpcClientOptions opts = {})
        : ch_(ch), session_(ch.pool(), opts.cache_lines), opts_(opts),
          rng_(std::random_device{}()) {
        session_.set_break_read_fresh(opts.break_read_fresh);
        next_slot_ = static_cast<std::uint32_t>(rng_() % ch_.slot_count());
    }

    CoherentSession& session() { return session_; }
    RpcStats& stats() { return stats_; }

    struct Pending {
        std::uint32_t slot = 0;
        std::uint64_t seq = 0; // odd claim value
        std::chrono::steady_clock::time_point submitted;
    };

    /// Claim a slot and publish one request without waiting. Returns nullopt
    /// if no slot could be claimed right now (channel full).
    std::optional<Pending> try_submit(std::span<const std::uint8_t> request) {
        if (request.size() > ch_.payload_bytes()) throw Error("rpc request exceeds payload size");
        for (std::uint32_t probe = 0; probe < ch_.slot_count(); ++probe) {
            const std::uint32_t i = next_slot_;
            next_slot_ = (next_slot_ + 1) % ch_.slot_count();
            if (session_.load_flag_fresh(ch_.status_addr(i)) != kSlotEmpty) continue;
            const std::uint64_t s = session_.load_flag_fresh(ch_.seq_addr(i));
            if (s % 2 != 0) continue;
            if (!session_.cas_flag(ch_.seq_addr(i), s, s + 1)) continue;
            // claimed: write payload, zero the result code, then publish
            std::vector<std::uint8_t> buf(ch_.payload_bytes(), 0);
            std::memcpy(buf.data(), request.data(), request.size());
            session_.bypass_write(ch_.request_addr(i), buf.data(), buf.size());
            std::uint64_t zero = 0;
            session_.bypass_write(ch_.result_addr(i), &zero, 8);
            session_.fence();
            detail::check_slot_transition(kSlotEmpty, kSlotReqReady);
            session_.store_flag_release(ch_.status_addr(i), kSlotReqReady);
            return Pending{i, s + 1, std::chrono::steady_clock::now()};
        }
        return std::nullopt;
    }

    /// One non-blocking completion probe.
    bool try_collect(const Pending& p, std::vector<std::uint8_t>& response) {
        if (session_.load_flag_fresh(ch_.status_addr(p.slot)) != kSlotRespReady) return false;
        if (session_.load_flag_fresh(ch_.seq_addr(p.slot)) != p.seq)
            throw Error("rpc: slot sequence mismatch (crossed response)");
        std::uint8_t rc[8];
        session_.read_fresh(ch_.result_addr(p.slot), rc, 8);
        response = session_.read_fresh(ch_.response_addr(p.slot), ch_.payload_bytes());
        release_slot(p);
        const double us = std::chrono::duration<double, std::micro>(
                              std::chrono::steady_clock::now() - p.submitted).count();
        stats_.calls++;
        stats_.latency.record_us(us);
        if (rc[0] != 0) {
            stats_.handler_errors++;
            throw RpcError(RpcError::Kind::HandlerError, "rpc handler failed");
        }
        return true;
    }

    std::vector<std::uint8_t> call(std::span<const std::uint8_t> request) {
        const auto start = std::chrono::steady_clock::now();
        const auto deadline = start + opts_.timeout;
        std::optional<Pending> p;
        detail::Backoff claim_backoff;
        while (!(p = try_submit(request))) {
            if (std::chrono::steady_clock::now() > deadline) {
                stats_.timeouts++;
                throw RpcError(RpcError::Kind::ChannelFull, "rpc: no free slot before timeout");
            }
            claim_backoff.wait();
        }
        stats_.claim_latency.record_us(
            std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - start)
                .count());
        std::vector<std::uint8_t> response;
        detail::Backoff spin;
        while (!try_collect(*p, response)) {
            if (std::chrono::steady_clock::now() > deadline) {
                reclaim_after_timeout(*p);
                stats_.timeouts++;
                throw RpcError(RpcError::Kind::Timeout, "rpc: call timed out");
            }
            spin.wait();
        }
        return response;
    }

    std::vector<std::uint8_t> call(const std::vector<std::uint8_t>& request) {
        return call(std::span<const std::uint8_t>(request.data(), request.size()));
    }

private:
    void release_slot(const Pending& p) {
        session_.store_flag_release(ch_.seq_addr(p.slot), p.seq + 1); // even again
        detail::check_slot_transition(kSlotRespReady, kSlotEmpty);
        session_.store_flag_release(ch_.status_addr(p.slot), kSlotEmpty);
    }

    void reclaim_after_timeout(const Pending& p) {
        // Not yet picked up: take the request back and free the slot.
        if (session_.cas_flag(ch_.status_addr(p.slot), kSlotReqReady, kSlotEmpty)) {
            detail::check_slot_transition(kSlotReqReady, kSlotEmpty);
            session_.store_flag_release(ch_.seq_addr(p.slot), p.seq + 1);
            return;
        }
        // Server is on it; grant a short grace period, then drop the response.
        const auto grace = std::chrono::steady_clock::now() + std::chrono::milliseconds(200);
        detail::Backoff spin;
        while (std::chrono::steady_clock::now() < grace) {
            if (session_.load_flag_fresh(ch_.status_addr(p.slot)) == kSlotRespReady) {
                release_slot(p);
                return;
            }
            spin.wait();
        }
        // Stuck in PROCESSING past the grace period (dead server): the slot
        // stays claimed; seq parity keeps anyone else from reusing it.
    }

    RpcChannel& ch_;
    CoherentSession session_;
    RpcClientOptions opts_;
    RpcStats stats_;
    std::mt19937_64 rng_;
    std::uint32_t next_slot_ = 0;
};

struct RpcServerOptions {
    std::uint32_t first_slot = 0;
    std::uint32_t slot_limit = 0; // 0 = all remaining (sharded pollers pass disjoint ranges)
    std::size_t cache_lines = 1024;
    bool break_read_fresh = false;
};

/// Single-threaded poller over a slot range. All flag reads go through
/// read_fresh; fences for a sweep's responses are batched into one.
class RpcServer {
public:
    using Handler = std::function<void(std::span<const std::uint8_t>, std::span<std::uint8_t>)>;

    RpcServer(RpcChannel& ch, RpcServerOptions opts = {})
        : ch_(ch), session_(ch.pool(), opts.cache_lines), opts_(opts) {
        session_.set_break_read_fresh(opts.break_read_fresh);
        if (opts_.first_slot >= ch_.slot_count()) throw ConfigError("server: first_slot out of range");
        last_ = opts_.slot_limit == 0
                    ? ch_.slot_count()
                    : std::min(ch_.slot_count(), opts_.first_slot + opts_.slot_limit);
    }

    CoherentSession& session() { return session_; }

    std::size_t poll_once(const Handler& handler) {
        ready_.clear();
        std::vector<std::uint8_t> req(ch_.payload_bytes());
        std::vector<std::uint8_t> resp(ch_.payload_bytes());
        for (std::uint32_t i = opts_.first_slot; i < last_; ++i) {
            if (session_.load_flag_fresh(ch_.status_addr(i)) != kSlotReqReady) continue;
            if (!session_.cas_flag(ch_.status_addr(i), kSlotReqReady, kSlotProcessing)) continue;
            detail::check_slot_transition(kSlotReqReady, kSlotProcessing);
            session_.read_fresh(ch_.request_addr(i), req.data(), req.size());
            std::fill(resp.begin(), resp.end(), 0);
            std::uint64_t rc = 0;
            try {
                handler(std::span<const std::uint8_t>(req), std::span<std::uint8_t>(resp));
            } catch (...) {
                rc = 1;
            }
            session_.bypass_write(ch_.response_addr(i), resp.data(), resp.size());
            session_.bypass_write(ch_.result_addr(i), &rc, 8);
            ready_.push_back(i);
        }
        if (!ready_.empty()) {
            session_.fence(); // one batched fence for the whole sweep
            for (std::uint32_t i : ready_) {
                detail::check_slot_transition(kSlotProcessing, kSlotRespReady);
                session_.store_flag_release(ch_.status_addr(i), kSlotRespReady);
            }
            ch_.add_served(ready_.size());
        }
        return ready_.size();
    }

    /// Poll until the channel's stop flag is raised. A new server generation
    /// on a pool that was stopped before must clear_stop() first.
    void serve(const Handler& handler) {
        detail::Backoff idle;
        while (!ch_.stop_requested()) {
            if (poll_once(handler) == 0) idle.wait();
            else idle.spins = 0;
        }
    }

private:
    RpcChannel& ch_;
    CoherentSession session_;
    RpcServerOptions opts_;
    std::uint32_t last_ = 0;
    std::vector<std::uint32_t> ready_;
};

} // namespace poolkv
