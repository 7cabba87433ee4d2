#pragma once

/// Trace-driven dispatch simulation: cache-oblivious least-outstanding
/// dispatch against a locality-aware baseline with consistent-hash prefix
/// ownership. Under the uniform-pool cost model every instance pays the same
/// for a pool hit, so the oblivious policy never consults the index; the
/// locality baseline routes to prefix owners and concentrates hot prefixes.

#include "poolkv/kv_index.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <queue>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace poolkv {

/// Discrete distribution over ranks 1..n with P(r) proportional to r^-s.
/// s = 0 degenerates to the uniform distribution by construction.
class ZipfSampler {
public:
    ZipfSampler(std::uint64_t n, double s) : cdf_(n) {
        if (n == 0) throw Error("zipf: need at least one rank");
        double sum = 0;
        for (std::uint64_t r = 1; r <= n; ++r) {
            sum += 1.0 / std::pow(double(r), s);
            cdf_[r - 1] = sum;
        }
        for (auto& c : cdf_) c /= sum;
    }

    std::uint64_t ranks() const { return cdf_.size(); }

    double probability(std::uint64_t rank) const { // 1-based
        return cdf_[rank - 1] - (rank >= 2 ? cdf_[rank - 2] : 0.0);
    }

    /// 0-based rank index.
    std::uint64_t operator()(std::mt19937_64& rng) const {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        return std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin();
    }

private:
    std::vector<double> cdf_;
};

struct TraceRequest {
    std::uint64_t arrival_us = 0;
    std::uint64_t prompt_id = 0;
    std::uint64_t shared_prefix_id = 0;
    std::uint32_t total_tokens = 0;
    std::vector<std::int32_t> tokens;
};

struct TraceConfig {
    std::uint64_t requests = 10'000;
    std::uint32_t prefix_groups = 256;
    double zipf_s = 0.99;
    std::uint32_t block_tokens = kDefaultBlockTokens;
    std::uint32_t prefix_blocks_min = 2;
    std::uint32_t prefix_blocks_max = 8;
    std::uint32_t suffix_tokens_max = 48;
    // Arrivals outpace 16 instances at the default cost model: a closed-loop
    // saturated stream, where dispatch quality shows up as load spread.
    double mean_interarrival_us = 5.0;
    std::uint64_t seed = 42;
};

namespace tracegen {

inline std::uint32_t prefix_blocks(std::uint64_t group, const TraceConfig& cfg) {
    std::mt19937_64 rng(cfg.seed ^ (group * 0x9E3779B97F4A7C15ull));
    return cfg.prefix_blocks_min + rng() % (cfg.prefix_blocks_max - cfg.prefix_blocks_min + 1);
}

inline std::vector<std::int32_t> prefix_tokens(std::uint64_t group, const TraceConfig& cfg) {
    std::mt19937_64 rng(cfg.seed ^ (group * 0xBF58476D1CE4E5B9ull) ^ 0x94D049BB133111EBull);
    std::vector<std::int32_t> t(std::size_t(prefix_blocks(group, cfg)) * cfg.block_tokens);
    for (auto& x : t) x = static_cast<std::int32_t>(rng() % 32000);
    return t;
}

inline std::vector<std::int32_t> suffix_tokens(std::uint64_t prompt_id, std::uint32_t n,
                                               const TraceConfig& cfg) {
    std::mt19937_64 rng(cfg.seed ^ (prompt_id * 0xD6E8FEB86659FD93ull) ^ 0xCA5A826395121157ull);
    std::vector<std::int32_t> t(n);
    for (auto& x : t) x = static_cast<std::int32_t>(rng() % 32000);
    return t;
}

} // namespace tracegen

/// Prefix-sharing generator: groups drawn with Zipf popularity, each request
/// = the group's shared prefix + a unique suffix, Poisson-ish arrivals.
inline std::vector<TraceRequest> generate_trace(const TraceConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    ZipfSampler zipf(cfg.prefix_groups, cfg.zipf_s);
    std::exponential_distribution<double> gap(1.0 / cfg.mean_interarrival_us);

    std::vector<TraceRequest> out;
    out.reserve(cfg.requests);
    double t = 0;
    for (std::uint64_t i = 0; i < cfg.requests; ++i) {
        t += gap(rng);
        TraceRequest r;
        r.arrival_us = static_cast<std::uint64_t>(t);
        r.prompt_id = i;
        r.shared_prefix_id = zipf(rng);
        r.tokens = tracegen::prefix_tokens(r.shared_prefix_id, cfg);
        const std::uint32_t suffix = cfg.suffix_tokens_max ? rng() % (cfg.suffix_tokens_max + 1) : 0;
        auto sfx = tracegen::suffix_tokens(r.prompt_id, suffix, cfg);
        r.tokens.insert(r.tokens.end(), sfx.begin(), sfx.end());
        r.total_tokens = static_cast<std::uint32_t>(r.tokens.size());
        out.push_back(std::move(r));
    }
    return out;
}

inline void write_trace_csv(const std::string& path, const std::vector<TraceRequest>& trace) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw Error("cannot write trace " + path);
    std::fprintf(f, "arrival_us,prompt_id,shared_prefix_id,total_tokens\n");
    for (const auto& r : trace)
        std::fprintf(f, "%llu,%llu,%llu,%u\n", (unsigned long long)r.arrival_us,
                     (unsigned long long)r.prompt_id, (unsigned long long)r.shared_prefix_id,
                     r.total_tokens);
    std::fclose(f);
}

/// Tokens are regenerated deterministically from the ids, so a trace file
/// plus its generator config round-trips to the identical workload.
inline std::vector<TraceRequest> read_trace_csv(const std::string& path, const TraceConfig& cfg) {
    std::FILE* f = std::fopen(path.c_str(), "r");
    if (!f) throw Error("cannot read trace " + path);
    char line[256];
    if (!std::fgets(line, sizeof line, f)) {
        std::fclose(f);
        throw Error("empty trace " + path);
    }
    std::vector<TraceRequest> out;
    std::uint64_t prev_arrival = 0;
    while (std::fgets(line, sizeof line, f)) {
        TraceRequest r;
        unsigned long long a, p, g;
        unsigned tt;
        if (std::sscanf(line, "%llu,%llu,%llu,%u", &a, &p, &g, &tt) != 4) continue;
        r.arrival_us = a;
        r.prompt_id = p;
        r.shared_prefix_id = g;
        r.total_tokens = tt;
        if (r.arrival_us < prev_arrival) {
            std::fclose(f);
            throw Error("trace arrivals must be non-decreasing");
        }
        prev_arrival = r.arrival_us;
        r.tokens = tracegen::prefix_tokens(g, cfg);
        if (tt > r.tokens.size()) {
            auto sfx = tracegen::suffix_tokens(p, tt - static_cast<std::uint32_t>(r.tokens.size()), cfg);
            r.tokens.insert(r.tokens.end(), sfx.begin(), sfx.end());
        } else {
            r.tokens.resize(tt);
        }
        out.push_back(std::move(r));
    }
    std::fclose(f);
    return out;
}

struct InstanceState {
    std::uint32_t instance_id = 0;
    std::uint64_t outstanding = 0;
    std::uint64_t completed = 0;
    std::uint64_t assigned = 0;
    std::uint64_t peak_outstanding = 0;
};

/// Least-outstanding dispatch, ties to the lowest id. Never looks at tokens.
inline std::uint32_t dispatch_oblivious(const TraceRequest&, const std::vector<InstanceState>& instances) {
    if (instances.empty()) throw Error("dispatch: no instances");
    std::uint32_t best = 0;
    for (std::uint32_t i = 1; i < instances.size(); ++i)
        if (instances[i].outstanding < instances[best].outstanding) best = i;
    return best;
}

/// Static prefix ownership on a consistent-hash ring.
class LocalityMap {
public:
    LocalityMap(std::uint32_t instances, std::uint32_t vnodes = 32) {
        for (std::uint32_t i = 0; i < instances; ++i)
            for (std::uint32_t v = 0; v < vnodes; ++v) {
                std::uint64_t point = detail::fmix64((std::uint64_t(i) << 32) | v);
                ring_[point] = i;
            }
    }

    std::uint32_t owner(const BlockHash& h) const {
        if (ring_.empty()) throw Error("locality map has no instances");
        auto it = ring_.lower_bound(h.hi ^ h.lo);
        if (it == ring_.end()) it = ring_.begin();
        return it->second;
    }

private:
    std::map<std::uint64_t, std::uint32_t> ring_;
};

struct CachedChains {
    std::set<std::pair<std::uint64_t, std::uint64_t>> blocks; // published block hashes
    bool contains(const BlockHash& h) const { return blocks.count({h.hi, h.lo}) != 0; }
    void add(const BlockHash& h) { blocks.insert({h.hi, h.lo}); }
};

/// Routes to the owner of the deepest cached prefix block, regardless of
/// load; falls back to least-outstanding when nothing matches.
inline std::uint32_t dispatch_locality(const TraceRequest& r, const std::vector<InstanceState>& instances,
                                       const LocalityMap& map, const CachedChains& cached,
                                       std::uint32_t block_tokens = kDefaultBlockTokens) {
    auto hashes = prompt_block_hashes(std::span<const std::int32_t>(r.tokens), block_tokens);
    const BlockHash* deepest = nullptr;
    for (const auto& h : hashes) {
        if (!cached.contains(h)) break;
        deepest = &h;
    }
    if (!deepest) return dispatch_oblivious(r, instances);
    return map.owner(*deepest);
}

enum class Policy { Oblivious, Locality };

struct CostModel {
    double base_service_us = 100.0;
    double miss_penalty_us = 900.0; // charged once per request on a prefix miss
};

struct SimMetrics {
    std::uint64_t requests = 0;
    std::uint64_t completed = 0;
    double load_ratio = 0.0;          // max/mean of per-instance assigned counts
    double outstanding_ratio = 0.0;   // max/mean of per-instance peak outstanding
    double p50_queue_us = 0.0;
    double p99_queue_us = 0.0;
    double hit_ratio = 0.0;
    std::vector<std::uint64_t> assigned_per_instance;
    std::vector<std::uint32_t> assignments; // instance id per request, trace order
};

/// Deterministic event-driven run. Service time = base + miss_penalty x
/// (1 - hit). The pool serves a hit on any instance at uniform cost, so for
/// the oblivious policy a request hits iff some earlier request already
/// published its shared prefix group; neither the dispatch decision nor the
/// service time depends on token content. The locality baseline matches real
/// prefix chains and hits only when routed to the owner of the matched chain.
inline SimMetrics run_trace(const std::vector<TraceRequest>& trace, Policy policy,
                            std::uint32_t instance_count, const CostModel& cost = {},
                            std::uint32_t block_tokens = kDefaultBlockTokens) {
    if (instance_count == 0) throw Error("run_trace: need at least one instance");
    std::vector<InstanceState> instances(instance_count);
    for (std::uint32_t i = 0; i < instance_count; ++i) instances[i].instance_id = i;

    LocalityMap map(instance_count);
    CachedChains cached;
    std::set<std::uint64_t> published_groups;
    std::vector<double> free_at(instance_count, 0.0);

    using Completion = std::pair<double, std::uint32_t>; // finish time, instance
    std::priority_queue<Completion, std::vector<Completion>, std::greater<>> completions;

    SimMetrics m;
    m.requests = trace.size();
    std::vector<double> waits;
    waits.reserve(trace.size());
    std::uint64_t hits = 0;

    for (const auto& r : trace) {
        const double now = double(r.arrival_us);
        while (!completions.empty() && completions.top().first <= now) {
            auto [t, inst] = completions.top();
            completions.pop();
            instances[inst].outstanding--;
            instances[inst].completed++;
        }

        std::uint32_t target;
        bool hit;
        if (policy == Policy::Oblivious) {
            target = dispatch_oblivious(r, instances);
            hit = published_groups.count(r.shared_prefix_id) != 0;
        } else {
            auto hashes = prompt_block_hashes(std::span<const std::int32_t>(r.tokens), block_tokens);
            const BlockHash* deepest = nullptr;
            for (const auto& h : hashes) {
                if (!cached.contains(h)) break;
                deepest = &h;
            }
            if (deepest) {
                target = map.owner(*deepest);
                hit = true; // routed to the node that hosts the chain
            } else {
                target = dispatch_oblivious(r, instances);
                hit = false;
            }
            for (const auto& h : hashes) cached.add(h); // published after this request
        }
        published_groups.insert(r.shared_prefix_id);
        if (hit) hits++;

        const double service = cost.base_service_us + (hit ? 0.0 : cost.miss_penalty_us);
        const double start = std::max(now, free_at[target]);
        waits.push_back(start - now);
        free_at[target] = start + service;

        instances[target].outstanding++;
        instances[target].assigned++;
        instances[target].peak_outstanding =
            std::max(instances[target].peak_outstanding, instances[target].outstanding);
        m.assignments.push_back(target);
        completions.emplace(start + service, target);
    }
    while (!completions.empty()) {
        auto [t, inst] = completions.top();
        completions.pop();
        instances[inst].outstanding--;
        instances[inst].completed++;
    }

    for (const auto& inst : instances) {
        m.completed += inst.completed;
        m.assigned_per_instance.push_back(inst.assigned);
    }
    if (!trace.empty()) {
        const auto mx = *std::max_element(m.assigned_per_instance.begin(), m.assigned_per_instance.end());
        const double mean = double(trace.size()) / instance_count;
        m.load_ratio = double(mx) / mean;
        std::uint64_t peak_max = 0, peak_sum = 0;
        for (const auto& inst : instances) {
            peak_max = std::max(peak_max, inst.peak_outstanding);
            peak_sum += inst.peak_outstanding;
        }
        m.outstanding_ratio = peak_sum ? double(peak_max) * instance_count / double(peak_sum) : 0.0;
        std::sort(waits.begin(), waits.end());
        m.p50_queue_us = waits[waits.size() / 2];
        m.p99_queue_us = waits[std::min(waits.size() - 1, std::size_t(double(waits.size()) * 0.99))];
        m.hit_ratio = double(hits) / double(trace.size());
    }
    return m;
}

} // namespace poolkv
