#pragma once

/// Software-managed coherence over the non-coherent pool, exercised against
/// the explicit per-host simulated cache so stale-read hazards and their
/// fixes are deterministically reproducible.
///
/// Real-hardware mapping of each operation:
///   cached_write            -> plain store (stays in the host cache)
///   bypass_write            -> ntstore / DSA cache-bypass flag
///   flush, invalidate       -> CLFLUSH family (write back + invalidate)
///   read_fresh              -> CLFLUSH before load
///   set_region_uncacheable  -> MTRR UC type; for device paths, DDIO off
/// There is deliberately no writeback-without-invalidate read path (CLWB
/// does not make reads fresh).

#include "poolkv/host_cache.hpp"
#include "poolkv/pool.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace poolkv {

struct SessionStats {
    std::uint64_t bypass_writes = 0;
    std::uint64_t cached_writes = 0;
    std::uint64_t line_fills = 0;
    std::uint64_t writebacks = 0;
    std::uint64_t invalidations = 0;
    std::uint64_t fences = 0;
};

/// One session per emulated host process. Single-threaded by contract;
/// single-writer-per-block discipline is assumed across hosts.
class CoherentSession {
public:
    explicit CoherentSession(PoolHandle& pool, std::size_t capacity_lines = 1024)
        : pool_(pool), cache_(capacity_lines) {}

    PoolHandle& pool() { return pool_; }
    HostCache& cache() { return cache_; }
    const SessionStats& stats() const { return stats_; }

    /// Mutation hook for the coherence-dependency check: when set, read_fresh
    /// and fresh flag loads degrade to plain cached reads.
    void set_break_read_fresh(bool b) { break_read_fresh_ = b; }
    bool break_read_fresh() const { return break_read_fresh_; }

    /// DDIO analog. Off (default): device-path writes bypass the cache and
    /// land in the pool. On: inbound device writes are steered into this
    /// host's cache and stay invisible to other hosts until flushed.
    void set_device_write_caching(bool on) { device_write_caching_ = on; }
    bool device_write_caching() const { return device_write_caching_; }

    /// Write arriving via the device path (GPU-originated in the real system).
    void device_write(std::uint64_t addr, const void* src, std::uint64_t len) {
        if (device_write_caching_) cached_write(addr, src, len);
        else bypass_write(addr, src, len);
    }

    void cached_write(std::uint64_t addr, const void* src, std::uint64_t len) {
        check(addr, len);
        stats_.cached_writes++;
        const auto* s = static_cast<const std::uint8_t*>(src);
        for_each_line(addr, len, [&](std::uint64_t line, std::uint64_t off, std::uint64_t n, std::uint64_t src_pos) {
            if (cache_.is_uncacheable(line)) {
                pool_.write_bytes(line + off, s + src_pos, n); // UC: degenerates to bypass
                return;
            }
            auto* ln = cache_.find(line);
            if (!ln) {
                ln = cache_.insert(line, writeback_fn());
                pool_.read_bytes(line, ln->bytes.data(), kCacheLineBytes); // write-allocate fill
                stats_.line_fills++;
            }
            std::memcpy(ln->bytes.data() + off, s + src_pos, n);
            ln->dirty = true;
        });
    }

    void bypass_write(std::uint64_t addr, const void* src, std::uint64_t len) {
        check(addr, len);
        stats_.bypass_writes++;
        // Cached copies of the written lines are invalidated. Dirty ones are
        // written back first so bytes outside the written span survive; the
        // pool write below then lands the new data over the span.
        for_each_line(addr, len, [&](std::uint64_t line, std::uint64_t, std::uint64_t, std::uint64_t) {
            cache_.erase(line, writeback_fn());
        });
        pool_.write_bytes(addr, src, len);
    }

    /// Write back dirty lines in range and drop them (CLFLUSH semantics).
    void flush(std::uint64_t addr, std::uint64_t len) {
        if (len == 0) return;
        check(addr, len);
        for_each_line(addr, len, [&](std::uint64_t line, std::uint64_t, std::uint64_t, std::uint64_t) {
            if (cache_.contains(line)) {
                cache_.erase(line, writeback_fn());
                stats_.invalidations++;
            }
        });
    }

    void invalidate(std::uint64_t addr, std::uint64_t len) { flush(addr, len); }

    void read(std::uint64_t addr, void* dst, std::uint64_t len) {
        check(addr, len);
        auto* d = static_cast<std::uint8_t*>(dst);
        for_each_line(addr, len, [&](std::uint64_t line, std::uint64_t off, std::uint64_t n, std::uint64_t pos) {
            if (cache_.is_uncacheable(line)) {
                pool_.read_bytes(line + off, d + pos, n); // never populates cache
                return;
            }
            auto* ln = cache_.find(line);
            if (!ln) {
                ln = cache_.insert(line, writeback_fn());
                pool_.read_bytes(line, ln->bytes.data(), kCacheLineBytes);
                stats_.line_fills++;
            }
            std::memcpy(d + pos, ln->bytes.data() + off, n);
        });
    }

    std::vector<std::uint8_t> read(std::uint64_t addr, std::uint64_t len) {
        std::vector<std::uint8_t> out(len);
        read(addr, out.data(), len);
        return out;
    }

    void read_fresh(std::uint64_t addr, void* dst, std::uint64_t len) {
        if (!break_read_fresh_) invalidate(addr, len);
        read(addr, dst, len);
        std::atomic_thread_fence(std::memory_order_acquire);
    }

    std::vector<std::uint8_t> read_fresh(std::uint64_t addr, std::uint64_t len) {
        std::vector<std::uint8_t> out(len);
        read_fresh(addr, out.data(), len);
        return out;
    }

    void set_region_uncacheable(std::uint64_t addr, std::uint64_t len) {
        if (len == 0) throw Error("set_region_uncacheable: empty range");
        check(addr, len);
        flush(align_down(addr, kCacheLineBytes),
              align_up(addr + len, kCacheLineBytes) - align_down(addr, kCacheLineBytes));
        cache_.add_uncacheable(addr, addr + len);
    }

    // --- status-flag words (64-bit, line-aligned by convention) ------------

    std::uint64_t load_flag_fresh(std::uint64_t addr) {
        if (break_read_fresh_) {
            std::uint8_t b[8];
            read(addr, b, 8); // may serve a stale cached line
            std::uint64_t v;
            std::memcpy(&v, b, 8);
            return v;
        }
        drop_line(addr);
        return pool_.load_u64(addr, std::memory_order_acquire);
    }

    void store_flag_release(std::uint64_t addr, std::uint64_t v) {
        drop_line(addr);
        pool_.store_u64(addr, v, std::memory_order_release);
    }

    bool cas_flag(std::uint64_t addr, std::uint64_t expected, std::uint64_t desired) {
        drop_line(addr);
        return pool_.cas_u64(addr, expected, desired);
    }

    /// One modeled mfence; callers batch these across multiple pending
    /// writes, which the counter makes observable.
    void fence() {
        std::atomic_thread_fence(std::memory_order_seq_cst);
        stats_.fences++;
    }

private:
    HostCache::WritebackFn writeback_fn() {
        return [this](std::uint64_t line, const HostCache::Line& ln) {
            pool_.write_bytes(line, ln.bytes.data(), kCacheLineBytes);
            stats_.writebacks++;
        };
    }

    void drop_line(std::uint64_t addr) {
        cache_.erase(align_down(addr, kCacheLineBytes), writeback_fn());
    }

    void check(std::uint64_t addr, std::uint64_t len) const {
        if (addr + len > pool_.shared_extent() || addr + len < addr)
            throw Error("session access out of range");
    }

    template <typename Fn>
    void for_each_line(std::uint64_t addr, std::uint64_t len, Fn&& fn) {
        std::uint64_t pos = 0;
        while (pos < len) {
            const std::uint64_t a = addr + pos;
            const std::uint64_t line = align_down(a, kCacheLineBytes);
            const std::uint64_t off = a - line;
            const std::uint64_t n = std::min<std::uint64_t>(kCacheLineBytes - off, len - pos);
            fn(line, off, n, pos);
            pos += n;
        }
    }

    PoolHandle& pool_;
    HostCache cache_;
    SessionStats stats_;
    bool break_read_fresh_ = false;
    bool device_write_caching_ = false;
};

} // namespace poolkv
