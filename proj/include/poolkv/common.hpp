#pragma once

#include <atomic>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace poolkv {

inline constexpr std::size_t kCacheLineBytes = 64;
inline constexpr std::uint64_t kKiB = 1024;
inline constexpr std::uint64_t kMiB = 1024 * kKiB;
inline constexpr std::uint64_t kGiB = 1024 * kMiB;

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

constexpr std::uint64_t align_down(std::uint64_t v, std::uint64_t a) { return v - (v % a); }
constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return align_down(v + a - 1, a); }
constexpr bool is_pow2(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

// All cross-process words in the mapped region go through these helpers so
// concurrently mutated memory is never touched with plain loads/stores.
inline std::uint64_t atomic_load_u64(const void* p, std::memory_order mo = std::memory_order_relaxed) {
    return std::atomic_ref<const std::uint64_t>(*static_cast<const std::uint64_t*>(p)).load(mo);
}

inline void atomic_store_u64(void* p, std::uint64_t v, std::memory_order mo = std::memory_order_relaxed) {
    std::atomic_ref<std::uint64_t>(*static_cast<std::uint64_t*>(p)).store(v, mo);
}

inline bool atomic_cas_u64(void* p, std::uint64_t& expected, std::uint64_t desired) {
    return std::atomic_ref<std::uint64_t>(*static_cast<std::uint64_t*>(p))
        .compare_exchange_strong(expected, desired, std::memory_order_acq_rel, std::memory_order_acquire);
}

inline std::uint64_t atomic_fetch_add_u64(void* p, std::uint64_t v,
                                          std::memory_order mo = std::memory_order_relaxed) {
    return std::atomic_ref<std::uint64_t>(*static_cast<std::uint64_t*>(p)).fetch_add(v, mo);
}

// Tear-free copy into/out of shared memory: 8-byte atomic words where aligned,
// byte atomics on the edges. Relaxed; callers order with flags/fences.
inline void atomic_copy_to_shared(void* dst, const void* src, std::size_t n) {
    auto* d = static_cast<std::uint8_t*>(dst);
    const auto* s = static_cast<const std::uint8_t*>(src);
    while (n > 0 && (reinterpret_cast<std::uintptr_t>(d) & 7u) != 0) {
        std::atomic_ref<std::uint8_t>(*d++).store(*s++, std::memory_order_relaxed);
        --n;
    }
    while (n >= 8) {
        std::uint64_t v;
        std::memcpy(&v, s, 8);
        atomic_store_u64(d, v);
        d += 8; s += 8; n -= 8;
    }
    while (n > 0) {
        std::atomic_ref<std::uint8_t>(*d++).store(*s++, std::memory_order_relaxed);
        --n;
    }
}

inline void atomic_copy_from_shared(void* dst, const void* src, std::size_t n) {
    auto* d = static_cast<std::uint8_t*>(dst);
    const auto* s = static_cast<const std::uint8_t*>(src);
    while (n > 0 && (reinterpret_cast<std::uintptr_t>(s) & 7u) != 0) {
        *d++ = std::atomic_ref<const std::uint8_t>(*s++).load(std::memory_order_relaxed);
        --n;
    }
    while (n >= 8) {
        std::uint64_t v = atomic_load_u64(s);
        std::memcpy(d, &v, 8);
        d += 8; s += 8; n -= 8;
    }
    while (n > 0) {
        *d++ = std::atomic_ref<const std::uint8_t>(*s++).load(std::memory_order_relaxed);
        --n;
    }
}

inline std::string format_bytes(std::uint64_t n) {
    char buf[32];
    if (n >= kGiB && n % kGiB == 0) std::snprintf(buf, sizeof buf, "%lluGiB", (unsigned long long)(n / kGiB));
    else if (n >= kMiB && n % kMiB == 0) std::snprintf(buf, sizeof buf, "%lluMiB", (unsigned long long)(n / kMiB));
    else if (n >= kKiB && n % kKiB == 0) std::snprintf(buf, sizeof buf, "%lluKiB", (unsigned long long)(n / kKiB));
    else std::snprintf(buf, sizeof buf, "%lluB", (unsigned long long)n);
    return buf;
}

} // namespace poolkv
