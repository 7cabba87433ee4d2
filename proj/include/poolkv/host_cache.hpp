#pragma once

#include "poolkv/common.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <list>
#include <map>
#include <string>
#include <unordered_map>

namespace poolkv {

/// Explicit simulated per-host cache: write-back, write-allocate, LRU, one
/// level. Each emulated host owns one. Lines are 64 bytes, keyed by
/// line-aligned pool offset. A range marked uncacheable never holds lines.
class HostCache {
public:
    struct Line {
        std::array<std::uint8_t, kCacheLineBytes> bytes{};
        bool dirty = false;
    };

    explicit HostCache(std::size_t capacity_lines = 1024) : capacity_(capacity_lines) {
        if (capacity_ == 0) throw Error("cache needs at least one line");
    }

    std::size_t capacity_lines() const { return capacity_; }
    std::size_t size() const { return lru_.size(); }

    bool contains(std::uint64_t line_off) const { return index_.count(line_off) != 0; }
    bool dirty(std::uint64_t line_off) const {
        auto it = index_.find(line_off);
        return it != index_.end() && it->second->second.dirty;
    }

    Line* find(std::uint64_t line_off) {
        auto it = index_.find(line_off);
        if (it == index_.end()) return nullptr;
        lru_.splice(lru_.begin(), lru_, it->second); // touch
        return &it->second->second;
    }

    /// Insert (or replace) a line. If at capacity the LRU victim is handed to
    /// writeback before removal (only called for dirty victims).
    using WritebackFn = std::function<void(std::uint64_t line_off, const Line&)>;
    Line* insert(std::uint64_t line_off, const WritebackFn& writeback) {
        auto it = index_.find(line_off);
        if (it != index_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second);
            return &it->second->second;
        }
        if (lru_.size() >= capacity_) {
            auto victim = std::prev(lru_.end());
            if (victim->second.dirty && writeback) writeback(victim->first, victim->second);
            index_.erase(victim->first);
            lru_.erase(victim);
        }
        lru_.emplace_front(line_off, Line{});
        index_[line_off] = lru_.begin();
        return &lru_.front().second;
    }

    /// Drop a line; dirty contents are handed to writeback unless discard.
    void erase(std::uint64_t line_off, const WritebackFn& writeback, bool discard = false) {
        auto it = index_.find(line_off);
        if (it == index_.end()) return;
        if (!discard && it->second->second.dirty && writeback) writeback(line_off, it->second->second);
        lru_.erase(it->second);
        index_.erase(it);
    }

    void for_each(const std::function<void(std::uint64_t, const Line&)>& fn) const {
        for (const auto& [off, line] : lru_) fn(off, line);
    }

    // --- uncacheable ranges (rounded outward to line boundaries) ----------

    void add_uncacheable(std::uint64_t begin, std::uint64_t end) {
        begin = align_down(begin, kCacheLineBytes);
        end = align_up(end, kCacheLineBytes);
        auto it = uc_.lower_bound(begin);
        if (it != uc_.begin()) {
            auto prev = std::prev(it);
            if (prev->second >= begin) { begin = prev->first; end = std::max(end, prev->second); uc_.erase(prev); }
        }
        while (true) {
            it = uc_.lower_bound(begin);
            if (it == uc_.end() || it->first > end) break;
            end = std::max(end, it->second);
            uc_.erase(it);
        }
        uc_[begin] = end;
    }

    bool is_uncacheable(std::uint64_t off) const {
        auto it = uc_.upper_bound(off);
        if (it == uc_.begin()) return false;
        --it;
        return off < it->second;
    }

    /// Textual introspection dump for tests and the debug CLI.
    std::string dump() const {
        std::string out = "cache lines=" + std::to_string(lru_.size()) +
                          "/" + std::to_string(capacity_) + "\n";
        std::map<std::uint64_t, bool> sorted;
        for (const auto& [off, line] : lru_) sorted[off] = line.dirty;
        for (auto [off, d] : sorted)
            out += "  line@" + std::to_string(off) + (d ? " dirty\n" : " clean\n");
        for (auto [b, e] : uc_) out += "  uc[" + std::to_string(b) + "," + std::to_string(e) + ")\n";
        return out;
    }

private:
    std::size_t capacity_;
    std::list<std::pair<std::uint64_t, Line>> lru_; // front = most recent
    std::unordered_map<std::uint64_t, std::list<std::pair<std::uint64_t, Line>>::iterator> index_;
    std::map<std::uint64_t, std::uint64_t> uc_; // begin -> end, disjoint
};

} // namespace poolkv
