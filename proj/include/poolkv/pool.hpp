#pragma once

/// Emulated CXL memory pool: one shared, file-backed, memory-mapped region
/// that any number of host processes create/attach. Provides fixed-granule
/// block allocation and logical-to-device address translation with software
/// interleaving. Data physically lives in one file; device placement is pure
/// address arithmetic plus per-device byte accounting.

#include "poolkv/common.hpp"

#include <fcntl.h>
#include <sched.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

namespace poolkv {

inline constexpr std::uint32_t kMaxDevices = 64;
inline constexpr std::uint64_t kPoolMagic = 0x504F4F4C4B563031ull; // "POOLKV01"
inline constexpr std::uint32_t kPoolVersion = 1;
inline constexpr std::uint64_t kHeaderBytes = 4096;

// Default allocation granule holds one dense KVCache block of the
// qwen32b-like layout profile: 128 chunks x 20 KiB.
inline constexpr std::uint64_t kDefaultBlockBytes = 128 * 20 * kKiB;

struct PoolConfig {
    std::uint64_t pool_bytes = 0;
    std::uint32_t device_count = 1;
    std::uint64_t interleave_chunk_bytes = 2 * kMiB;
    std::uint64_t block_bytes = kDefaultBlockBytes;
    std::uint64_t rpc_region_bytes = 256 * kKiB; // reserved range for RPC slots
    bool interleave = true;
    std::string backing_path;

    void validate() const {
        if (pool_bytes == 0) throw ConfigError("pool_bytes must be > 0");
        if (device_count < 1 || device_count > kMaxDevices)
            throw ConfigError("device_count must be in [1, " + std::to_string(kMaxDevices) + "]");
        if (!is_pow2(interleave_chunk_bytes) || interleave_chunk_bytes < kCacheLineBytes)
            throw ConfigError("interleave_chunk_bytes must be a power of two >= 64");
        if (pool_bytes % (std::uint64_t(device_count) * interleave_chunk_bytes) != 0)
            throw ConfigError("pool_bytes must be a multiple of device_count * interleave_chunk_bytes");
        if (block_bytes == 0 || block_bytes > pool_bytes)
            throw ConfigError("block_bytes must be in (0, pool_bytes]");
        if (block_bytes % kCacheLineBytes != 0)
            throw ConfigError("block_bytes must be a multiple of 64");
        if (rpc_region_bytes % kHeaderBytes != 0)
            throw ConfigError("rpc_region_bytes must be a multiple of 4096");
        if (backing_path.empty()) throw ConfigError("backing_path must be set");
    }
};

/// Logical byte range inside the pool's unified address space.
struct PoolAddress {
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

struct DeviceCoordinate {
    std::uint32_t device_index = 0;
    std::uint64_t device_offset = 0;
    bool operator==(const DeviceCoordinate&) const = default;
};

/// Round-robin chunk interleaving across devices; with interleaving disabled
/// the pool splits into device_count contiguous partitions instead.
inline DeviceCoordinate translate(std::uint64_t offset, const PoolConfig& cfg) {
    if (offset >= cfg.pool_bytes) throw Error("translate: offset out of range");
    if (!cfg.interleave) {
        const std::uint64_t per_dev = cfg.pool_bytes / cfg.device_count;
        return {static_cast<std::uint32_t>(offset / per_dev), offset % per_dev};
    }
    const std::uint64_t chunk = cfg.interleave_chunk_bytes;
    const std::uint64_t chunk_index = offset / chunk;
    const std::uint32_t device = static_cast<std::uint32_t>(chunk_index % cfg.device_count);
    const std::uint64_t device_offset = (chunk_index / cfg.device_count) * chunk + offset % chunk;
    return {device, device_offset};
}

namespace detail {

// On-disk header at file offset 0. All mutable words are accessed via
// atomic_ref; keep every such field 8-byte aligned.
struct PoolHeader {
    std::uint64_t magic;
    std::uint32_t version;
    std::uint32_t device_count;
    std::uint64_t pool_bytes;
    std::uint64_t interleave_chunk_bytes;
    std::uint64_t block_bytes;
    std::uint32_t interleave_enabled;
    std::uint32_t hash_algo;
    std::uint64_t rpc_region_offset;
    std::uint64_t rpc_region_bytes;
    std::uint64_t bitmap_offset;
    std::uint64_t bitmap_bytes;
    std::uint64_t data_offset;
    std::uint64_t block_count;
    std::uint64_t total_file_bytes;
    std::uint64_t alloc_lock;
    std::uint64_t alloc_hint;
    std::uint64_t live_blocks;
    std::uint64_t device_write_bytes[kMaxDevices];
};
static_assert(sizeof(PoolHeader) <= kHeaderBytes);
static_assert(offsetof(PoolHeader, alloc_lock) % 8 == 0);
static_assert(offsetof(PoolHeader, device_write_bytes) % 8 == 0);

// Advisory spinlock on a shared header word; bounded spin then yield.
class SharedLock {
public:
    explicit SharedLock(std::uint64_t* word) : word_(word) {
        int spins = 0;
        for (;;) {
            std::uint64_t expected = 0;
            if (std::atomic_ref<std::uint64_t>(*word_).compare_exchange_weak(
                    expected, 1, std::memory_order_acquire, std::memory_order_relaxed))
                return;
            if (++spins > 256) {
                sched_yield();
                spins = 0;
            }
        }
    }
    ~SharedLock() { std::atomic_ref<std::uint64_t>(*word_).store(0, std::memory_order_release); }
    SharedLock(const SharedLock&) = delete;
    SharedLock& operator=(const SharedLock&) = delete;

private:
    std::uint64_t* word_;
};

} // namespace detail

/// Process-local handle onto the shared pool region. Create once, attach from
/// any number of processes. Translation is pure; allocation is serialized
/// through a lock word in the shared header. Coherence of data reads/writes
/// is the caller's problem (see coherence.hpp).
class PoolHandle {
public:
    PoolHandle() = default;

    static PoolHandle create(const PoolConfig& cfg) {
        cfg.validate();
        const std::uint64_t block_count = cfg.pool_bytes / cfg.block_bytes;
        const std::uint64_t bitmap_bytes = align_up((block_count + 7) / 8, kCacheLineBytes);
        const std::uint64_t rpc_off = kHeaderBytes;
        const std::uint64_t bitmap_off = rpc_off + cfg.rpc_region_bytes;
        const std::uint64_t data_off = align_up(bitmap_off + bitmap_bytes, kHeaderBytes);
        const std::uint64_t total = data_off + cfg.pool_bytes;

        int fd = ::open(cfg.backing_path.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
        if (fd < 0) throw Error("create_pool: cannot open " + cfg.backing_path + ": " + std::strerror(errno));
        if (::ftruncate(fd, static_cast<off_t>(total)) != 0) {
            int e = errno;
            ::close(fd);
            throw Error("create_pool: ftruncate failed: " + std::string(std::strerror(e)));
        }
        PoolHandle h;
        h.map(fd, total, cfg.backing_path);

        auto* hdr = h.header();
        std::memset(hdr, 0, sizeof(detail::PoolHeader));
        hdr->version = kPoolVersion;
        hdr->device_count = cfg.device_count;
        hdr->pool_bytes = cfg.pool_bytes;
        hdr->interleave_chunk_bytes = cfg.interleave_chunk_bytes;
        hdr->block_bytes = cfg.block_bytes;
        hdr->interleave_enabled = cfg.interleave ? 1 : 0;
        hdr->hash_algo = 1; // murmur3_x64_128, see kv_index.hpp
        hdr->rpc_region_offset = rpc_off;
        hdr->rpc_region_bytes = cfg.rpc_region_bytes;
        hdr->bitmap_offset = bitmap_off;
        hdr->bitmap_bytes = bitmap_bytes;
        hdr->data_offset = data_off;
        hdr->block_count = block_count;
        hdr->total_file_bytes = total;
        // magic is published last so attachers never see a half-written header
        std::atomic_thread_fence(std::memory_order_release);
        atomic_store_u64(&hdr->magic, kPoolMagic, std::memory_order_release);
        return h;
    }

    static PoolHandle attach(const std::string& path) {
        int fd = ::open(path.c_str(), O_RDWR);
        if (fd < 0) throw Error("attach_pool: cannot open " + path + ": " + std::strerror(errno));
        struct stat st{};
        if (::fstat(fd, &st) != 0 || st.st_size < static_cast<off_t>(kHeaderBytes)) {
            ::close(fd);
            throw Error("attach_pool: " + path + " is not a pool region");
        }
        PoolHandle h;
        h.map(fd, static_cast<std::uint64_t>(st.st_size), path);
        const auto* hdr = h.header();
        if (atomic_load_u64(&hdr->magic, std::memory_order_acquire) != kPoolMagic)
            throw Error("attach_pool: bad magic in " + path);
        if (hdr->version != kPoolVersion)
            throw Error("attach_pool: version mismatch in " + path);
        if (hdr->total_file_bytes != static_cast<std::uint64_t>(st.st_size))
            throw Error("attach_pool: size mismatch in " + path);
        return h;
    }

    ~PoolHandle() { unmap(); }
    PoolHandle(PoolHandle&& o) noexcept { *this = std::move(o); }
    PoolHandle& operator=(PoolHandle&& o) noexcept {
        if (this != &o) {
            unmap();
            base_ = o.base_;
            mapped_bytes_ = o.mapped_bytes_;
            path_ = std::move(o.path_);
            alloc_first_ = o.alloc_first_;
            alloc_count_ = o.alloc_count_;
            o.base_ = nullptr;
            o.mapped_bytes_ = 0;
        }
        return *this;
    }
    PoolHandle(const PoolHandle&) = delete;
    PoolHandle& operator=(const PoolHandle&) = delete;

    bool valid() const { return base_ != nullptr; }
    const std::string& path() const { return path_; }

    PoolConfig config() const {
        const auto* h = header();
        PoolConfig c;
        c.pool_bytes = h->pool_bytes;
        c.device_count = h->device_count;
        c.interleave_chunk_bytes = h->interleave_chunk_bytes;
        c.block_bytes = h->block_bytes;
        c.rpc_region_bytes = h->rpc_region_bytes;
        c.interleave = h->interleave_enabled != 0;
        c.backing_path = path_;
        return c;
    }

    std::uint64_t pool_bytes() const { return header()->pool_bytes; }
    std::uint64_t block_bytes() const { return header()->block_bytes; }
    std::uint64_t block_count() const { return header()->block_count; }
    std::uint32_t hash_algo() const { return header()->hash_algo; }

    /// Unified shared space: [0, pool_bytes) is block data, the tail
    /// [pool_bytes, shared_extent) is the reserved RPC slot range.
    std::uint64_t rpc_space_base() const { return header()->pool_bytes; }
    std::uint64_t rpc_space_bytes() const { return header()->rpc_region_bytes; }
    std::uint64_t shared_extent() const { return header()->pool_bytes + header()->rpc_region_bytes; }

    DeviceCoordinate translate(std::uint64_t offset) const { return poolkv::translate(offset, config()); }

    std::optional<PoolAddress> try_alloc_block() {
        auto* h = header();
        std::uint8_t* bitmap = base_ + h->bitmap_offset;
        detail::SharedLock lock(&h->alloc_lock);
        const std::uint64_t first = alloc_first_;
        const std::uint64_t count = alloc_count_ ? alloc_count_ : h->block_count;
        std::uint64_t hint = atomic_load_u64(&h->alloc_hint);
        if (hint < first || hint >= first + count) hint = first;
        for (std::uint64_t i = 0; i < count; ++i) {
            const std::uint64_t b = first + (hint - first + i) % count;
            if (!(bitmap[b / 8] & (1u << (b % 8)))) {
                bitmap[b / 8] |= (1u << (b % 8));
                atomic_store_u64(&h->alloc_hint, b + 1);
                atomic_fetch_add_u64(&h->live_blocks, 1);
                return PoolAddress{b * h->block_bytes, h->block_bytes};
            }
        }
        return std::nullopt; // out of space: caller triggers eviction
    }

    PoolAddress alloc_block() {
        auto a = try_alloc_block();
        if (!a) throw Error("alloc_block: pool exhausted");
        return *a;
    }

    void free_block(PoolAddress addr) {
        auto* h = header();
        if (addr.offset % h->block_bytes != 0 || addr.length != h->block_bytes ||
            addr.offset / h->block_bytes >= h->block_count)
            throw Error("free_block: not a block address");
        const std::uint64_t b = addr.offset / h->block_bytes;
        std::uint8_t* bitmap = base_ + h->bitmap_offset;
        detail::SharedLock lock(&h->alloc_lock);
        if (!(bitmap[b / 8] & (1u << (b % 8)))) throw Error("free_block: double free");
        bitmap[b / 8] &= ~(1u << (b % 8));
        atomic_fetch_add_u64(&h->live_blocks, std::uint64_t(-1));
    }

    std::uint64_t live_blocks() const { return atomic_load_u64(&header()->live_blocks); }
    std::uint64_t free_blocks() const { return header()->block_count - live_blocks(); }

    /// Optional per-host allocation sub-range: this handle will only allocate
    /// blocks in [first_block, first_block + count).
    void set_alloc_range(std::uint64_t first_block, std::uint64_t count) {
        if (first_block + count > header()->block_count)
            throw ConfigError("set_alloc_range: range exceeds block count");
        alloc_first_ = first_block;
        alloc_count_ = count;
    }

    std::vector<std::uint64_t> device_load_report() const {
        const auto* h = header();
        std::vector<std::uint64_t> out(h->device_count);
        for (std::uint32_t d = 0; d < h->device_count; ++d)
            out[d] = atomic_load_u64(&h->device_write_bytes[d]);
        return out;
    }

    void reset_device_load() {
        auto* h = header();
        for (std::uint32_t d = 0; d < h->device_count; ++d)
            atomic_store_u64(&h->device_write_bytes[d], 0);
    }

    // --- raw shared-space access (tear-free; no ordering implied) ---------

    std::uint8_t* addr_ptr(std::uint64_t offset, std::uint64_t len) {
        check_range(offset, len);
        const auto* h = header();
        if (offset < h->pool_bytes) return base_ + h->data_offset + offset;
        return base_ + h->rpc_region_offset + (offset - h->pool_bytes);
    }
    const std::uint8_t* addr_ptr(std::uint64_t offset, std::uint64_t len) const {
        return const_cast<PoolHandle*>(this)->addr_ptr(offset, len);
    }

    void write_bytes(std::uint64_t offset, const void* src, std::uint64_t len) {
        if (len == 0) return;
        atomic_copy_to_shared(addr_ptr(offset, len), src, len);
        account_write(offset, len);
    }

    void read_bytes(std::uint64_t offset, void* dst, std::uint64_t len) const {
        if (len == 0) return;
        atomic_copy_from_shared(dst, addr_ptr(offset, len), len);
    }

    std::uint64_t load_u64(std::uint64_t offset, std::memory_order mo) const {
        return atomic_load_u64(addr_ptr(offset, 8), mo);
    }
    void store_u64(std::uint64_t offset, std::uint64_t v, std::memory_order mo) {
        atomic_store_u64(addr_ptr(offset, 8), v, mo);
        account_write(offset, 8);
    }
    bool cas_u64(std::uint64_t offset, std::uint64_t& expected, std::uint64_t desired) {
        bool ok = atomic_cas_u64(addr_ptr(offset, 8), expected, desired);
        if (ok) account_write(offset, 8);
        return ok;
    }
    std::uint64_t fetch_add_u64(std::uint64_t offset, std::uint64_t v) {
        std::uint64_t old = atomic_fetch_add_u64(addr_ptr(offset, 8), v);
        account_write(offset, 8);
        return old;
    }

    /// Per-device byte attribution for a write to the data area. RPC-space
    /// traffic is not charged to devices.
    void account_write(std::uint64_t offset, std::uint64_t len) {
        const auto* h = header();
        if (offset >= h->pool_bytes) return;
        len = std::min(len, h->pool_bytes - offset);
        const PoolConfig cfg = config();
        const std::uint64_t span = cfg.interleave ? cfg.interleave_chunk_bytes
                                                  : cfg.pool_bytes / cfg.device_count;
        auto* hdr = header();
        while (len > 0) {
            const std::uint64_t in_span = span - offset % span;
            const std::uint64_t step = std::min(len, in_span);
            const auto coord = poolkv::translate(offset, cfg);
            atomic_fetch_add_u64(&hdr->device_write_bytes[coord.device_index], step);
            offset += step;
            len -= step;
        }
    }

private:
    void map(int fd, std::uint64_t bytes, const std::string& path) {
        void* p = ::mmap(nullptr, bytes, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
        ::close(fd); // mapping keeps the file alive
        if (p == MAP_FAILED) throw Error("mmap failed for " + path + ": " + std::strerror(errno));
        base_ = static_cast<std::uint8_t*>(p);
        mapped_bytes_ = bytes;
        path_ = path;
    }

    void unmap() {
        if (base_) ::munmap(base_, mapped_bytes_);
        base_ = nullptr;
        mapped_bytes_ = 0;
    }

    void check_range(std::uint64_t offset, std::uint64_t len) const {
        const auto* h = header();
        const std::uint64_t extent = h->pool_bytes + h->rpc_region_bytes;
        if (offset + len > extent || offset + len < offset)
            throw Error("pool access out of range");
        if (offset < h->pool_bytes && offset + len > h->pool_bytes)
            throw Error("pool access spans data/rpc boundary");
    }

    detail::PoolHeader* header() { return reinterpret_cast<detail::PoolHeader*>(base_); }
    const detail::PoolHeader* header() const { return reinterpret_cast<const detail::PoolHeader*>(base_); }

    std::uint8_t* base_ = nullptr;
    std::uint64_t mapped_bytes_ = 0;
    std::string path_;
    std::uint64_t alloc_first_ = 0;
    std::uint64_t alloc_count_ = 0; // 0 = whole pool
};

} // namespace poolkv
