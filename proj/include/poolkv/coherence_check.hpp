#pragma once

/// Schedule exploration for the writer/reader coherence protocols. Interleaves
/// one writer and one reader host over a shared address and checks every
/// protocol-compliant read against an oracle that tracks the most recent
/// completed (published) write. Also demonstrates that non-compliant
/// schedules really do return stale data, which guards against the emulation
/// being trivially coherent.

#include "poolkv/coherence.hpp"

#include <algorithm>
#include <random>
#include <string>
#include <vector>

namespace poolkv::cohcheck {

enum class WriterOp : std::uint8_t { CachedWrite, Flush, BypassWrite };
enum class ReaderOp : std::uint8_t { ReadPlain, ReadFresh };

struct Schedule {
    bool writer_uc = false; // writer marked the range uncacheable
    bool reader_uc = false; // reader marked the range uncacheable
    std::vector<WriterOp> writer;
    std::vector<ReaderOp> reader;
    std::vector<bool> interleave; // true = next writer step; count(true) == writer.size()
};

struct Outcome {
    std::uint64_t schedules = 0;
    std::uint64_t compliant_reads = 0;
    std::uint64_t compliant_mismatches = 0; // must stay 0 for soundness
    std::uint64_t plain_reads = 0;
    std::uint64_t plain_stale_reads = 0; // must be > 0 across exploration
};

inline void run_schedule(PoolHandle& pool, std::uint64_t addr, const Schedule& s,
                         bool break_read_fresh, Outcome& out) {
    const std::uint64_t zero = 0;
    pool.write_bytes(addr, &zero, 8);

    CoherentSession writer(pool, 64);
    CoherentSession reader(pool, 64);
    reader.set_break_read_fresh(break_read_fresh);
    if (s.writer_uc) writer.set_region_uncacheable(addr, 8);
    if (s.reader_uc) reader.set_region_uncacheable(addr, 8);

    std::uint64_t published = 0;             // oracle: value the pool must expose
    std::uint64_t pending = 0;               // writer-cache value not yet flushed
    bool has_pending = false;
    std::uint64_t next_value = 0;

    std::size_t wi = 0, ri = 0;
    out.schedules++;
    for (bool writer_turn : s.interleave) {
        if (writer_turn) {
            switch (s.writer[wi++]) {
            case WriterOp::CachedWrite: {
                const std::uint64_t v = ++next_value;
                writer.cached_write(addr, &v, 8);
                if (s.writer_uc) { published = v; has_pending = false; }
                else { pending = v; has_pending = true; }
                break;
            }
            case WriterOp::Flush:
                writer.flush(addr, 8);
                if (has_pending) { published = pending; has_pending = false; }
                break;
            case WriterOp::BypassWrite: {
                const std::uint64_t v = ++next_value;
                writer.bypass_write(addr, &v, 8);
                published = v;
                has_pending = false; // the unflushed cached copy was dropped
                break;
            }
            }
        } else {
            const ReaderOp op = s.reader[ri++];
            std::uint64_t got = 0;
            if (op == ReaderOp::ReadFresh) reader.read_fresh(addr, &got, 8);
            else reader.read(addr, &got, 8);
            const bool compliant = (op == ReaderOp::ReadFresh) || s.reader_uc;
            if (compliant) {
                out.compliant_reads++;
                if (got != published) out.compliant_mismatches++;
            } else {
                out.plain_reads++;
                if (got != published) out.plain_stale_reads++;
            }
        }
    }
}

inline Schedule random_schedule(std::mt19937_64& rng) {
    Schedule s;
    s.writer_uc = (rng() % 5) == 0;
    s.reader_uc = (rng() % 5) == 0;
    const std::size_t wn = 1 + rng() % 4;
    const std::size_t rn = 1 + rng() % 4;
    for (std::size_t i = 0; i < wn; ++i) {
        const auto r = rng() % 10;
        s.writer.push_back(r < 4 ? WriterOp::CachedWrite : r < 7 ? WriterOp::Flush : WriterOp::BypassWrite);
    }
    for (std::size_t i = 0; i < rn; ++i)
        s.reader.push_back(rng() % 10 < 4 ? ReaderOp::ReadPlain : ReaderOp::ReadFresh);
    s.interleave.assign(wn, true);
    s.interleave.insert(s.interleave.end(), rn, false);
    std::shuffle(s.interleave.begin(), s.interleave.end(), rng);
    return s;
}

/// Randomized exploration of n schedules. A fixed mutation-sensitive schedule
/// (fresh read, bypass write, fresh read) is mixed in so breaking read_fresh
/// fails deterministically, not just probabilistically.
inline Outcome explore_random(PoolHandle& pool, std::uint64_t n, std::uint64_t seed,
                              bool break_read_fresh = false) {
    std::mt19937_64 rng(seed);
    Outcome out;
    Schedule sentinel;
    sentinel.writer = {WriterOp::BypassWrite, WriterOp::BypassWrite};
    sentinel.reader = {ReaderOp::ReadFresh, ReaderOp::ReadFresh, ReaderOp::ReadFresh};
    sentinel.interleave = {false, true, false, true, false};
    for (std::uint64_t i = 0; i < n; ++i) {
        if (i % 1024 == 0) run_schedule(pool, 0, sentinel, break_read_fresh, out);
        run_schedule(pool, 0, random_schedule(rng), break_read_fresh, out);
    }
    return out;
}

/// Exhaustive enumeration of every 2-host schedule with 3 writer ops and
/// 3 reader ops: all op assignments, both UC flags, all interleavings.
inline Outcome explore_exhaustive(PoolHandle& pool, bool break_read_fresh = false) {
    Outcome out;
    std::vector<std::vector<bool>> interleavings;
    std::vector<bool> order(6, false);
    std::fill(order.begin(), order.begin() + 3, true);
    std::sort(order.begin(), order.end());
    do {
        interleavings.push_back(order);
    } while (std::next_permutation(order.begin(), order.end()));

    for (int w0 = 0; w0 < 3; ++w0)
    for (int w1 = 0; w1 < 3; ++w1)
    for (int w2 = 0; w2 < 3; ++w2)
    for (int r0 = 0; r0 < 2; ++r0)
    for (int r1 = 0; r1 < 2; ++r1)
    for (int r2 = 0; r2 < 2; ++r2)
    for (int wuc = 0; wuc < 2; ++wuc)
    for (int ruc = 0; ruc < 2; ++ruc) {
        Schedule s;
        s.writer = {WriterOp(w0), WriterOp(w1), WriterOp(w2)};
        s.reader = {ReaderOp(r0), ReaderOp(r1), ReaderOp(r2)};
        s.writer_uc = wuc != 0;
        s.reader_uc = ruc != 0;
        for (const auto& il : interleavings) {
            s.interleave = il;
            run_schedule(pool, 0, s, break_read_fresh, out);
        }
    }
    return out;
}

/// The constructed hazard: reader caches the line, writer publishes via
/// bypass_write, a plain read then returns the stale cached value while
/// read_fresh returns the new one. Returns the trace; stale_shown reports
/// whether the hazard materialized.
inline std::string stale_demo(PoolHandle& pool, bool& stale_shown) {
    const std::uint64_t addr = 0;
    const std::uint64_t zero = 0;
    pool.write_bytes(addr, &zero, 8);
    CoherentSession writer(pool, 64);
    CoherentSession reader(pool, 64);

    std::string log;
    std::uint64_t v = 0;
    reader.read(addr, &v, 8);
    log += "reader: read(X)        -> " + std::to_string(v) + "   (line now cached)\n";
    const std::uint64_t newval = 42;
    writer.bypass_write(addr, &newval, 8);
    log += "writer: bypass_write(X, 42)\n";
    std::uint64_t stale = 0;
    reader.read(addr, &stale, 8);
    log += "reader: read(X)        -> " + std::to_string(stale) + "   (plain read: STALE)\n";
    std::uint64_t fresh = 0;
    reader.read_fresh(addr, &fresh, 8);
    log += "reader: read_fresh(X)  -> " + std::to_string(fresh) + "   (protocol-compliant)\n";
    stale_shown = (stale == 0 && fresh == 42);
    return log;
}

} // namespace poolkv::cohcheck
