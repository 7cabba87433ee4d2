#pragma once

/// The property suite behind `poolkv verify`: every check the artifact must
/// pass, runnable end to end with a fixed seed. Latency-style properties are
/// paired directional comparisons on the same machine; everything else is
/// exact (byte identity, counters, call counts).

#include "poolkv/bench.hpp"
#include "poolkv/coherence_check.hpp"

#include <functional>
#include <sstream>

namespace poolkv {

struct VerifyOptions {
    std::uint64_t seed = 42;
    std::string work_dir = "/tmp";
    bool break_read_fresh = false; // mutation hook: the suite must then fail
    bool quick = false;            // scaled-down sizes for interactive runs

    std::uint64_t schedules() const { return quick ? 5'000 : 100'000; }
    std::uint64_t roundtrip_layouts() const { return quick ? 100 : 1'000; }
    std::uint32_t rpc_clients() const { return quick ? 2 : 8; }
    std::uint64_t rpc_calls_per_client() const { return quick ? 2'000 : 100'000; }
    std::uint64_t index_prompts() const { return quick ? 1'000 : 10'000; }
    double rpc_bench_duration() const { return quick ? 0.5 : 1.5; }
};

struct VerifyResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace verifiers {

inline std::string temp_path(const VerifyOptions& opt, const std::string& name) {
    return opt.work_dir + "/poolkv-verify-" + name + "-" + std::to_string(::getpid());
}

struct ScopedFile {
    std::string path;
    explicit ScopedFile(std::string p) : path(std::move(p)) {}
    ~ScopedFile() { ::unlink(path.c_str()); }
};

// --- criterion 1: transfer round trip against the serializer oracle --------

inline std::vector<std::uint8_t> oracle_serialize(const FragmentedBuffer& buf, std::uint32_t block) {
    std::vector<std::uint8_t> out;
    out.reserve(buf.layout().block_bytes());
    for (std::uint32_t l = 0; l < buf.layout().n_layers; ++l)
        for (std::uint32_t kv = 0; kv < 2; ++kv) {
            auto span = buf.chunk_span(l, kv, block);
            out.insert(out.end(), span.begin(), span.end());
        }
    return out;
}

inline VerifyResult transfer_roundtrip(const VerifyOptions& opt) {
    ScopedFile f(temp_path(opt, "xfer"));
    PoolConfig pc;
    pc.pool_bytes = 16 * kMiB;
    pc.device_count = 1;
    pc.block_bytes = 8 * kMiB;
    pc.backing_path = f.path;
    auto pool = PoolHandle::create(pc);
    CoherentSession session(pool);

    std::mt19937_64 rng(opt.seed);
    std::uint64_t trials = 0, failures = 0;
    while (trials < opt.roundtrip_layouts()) {
        KVLayoutSpec layout;
        layout.n_layers = 1 + rng() % 64;
        layout.n_kv_heads = 1 + rng() % 16;
        layout.head_dim = 8 * (1 + rng() % 8);
        layout.bytes_per_element = 1 + rng() % 2;
        layout.tokens_per_block = 16;
        if (layout.block_bytes() > pc.block_bytes) continue;
        trials++;

        FragmentedBuffer src(layout, 1, rng());
        src.fill_random(rng());
        PoolAddress range{0, layout.block_bytes()};
        gather_write(session, src, build_gather_descriptors(layout, src, 0), range);

        std::vector<std::uint8_t> in_pool(range.length);
        pool.read_bytes(range.offset, in_pool.data(), in_pool.size());
        if (in_pool != oracle_serialize(src, 0)) failures++;

        FragmentedBuffer dst(layout, 1, rng());
        scatter_read(session, range, dst, build_gather_descriptors(layout, dst, 0));
        for (std::uint32_t l = 0; l < layout.n_layers && failures == 0; ++l)
            for (std::uint32_t kv = 0; kv < 2; ++kv) {
                auto a = src.chunk_span(l, kv, 0);
                auto b = dst.chunk_span(l, kv, 0);
                if (!std::equal(a.begin(), a.end(), b.begin(), b.end())) {
                    failures++;
                    break;
                }
            }
    }
    std::ostringstream d;
    d << trials << " random layouts, " << failures << " mismatches";
    return {"transfer-roundtrip", failures == 0, d.str()};
}

// --- criterion 2: descriptor-count fidelity (zero tolerance) ---------------

inline VerifyResult descriptor_counts(const VerifyOptions& opt) {
    bool ok = true;
    std::ostringstream d;

    auto qwen = qwen32b_like();
    FragmentedBuffer qbuf(qwen, 1, 1);
    const auto dense_q = build_gather_descriptors(qwen, qbuf, 0).size();
    ok &= dense_q == 128;

    auto llama = llama8b_like();
    FragmentedBuffer lbuf(llama, 1, 1);
    const auto dense_l = build_gather_descriptors(llama, lbuf, 0).size();
    ok &= dense_l == 64;

    const auto sparse_q =
        build_sparse_descriptors(qwen, qbuf, SparseSelection::single_token(qwen, 3)).size();
    ok &= sparse_q == std::size_t(qwen.n_layers) * qwen.n_kv_heads * 2 && sparse_q == 1024;

    // formulas hold across random layouts, not just the shipped profiles
    std::mt19937_64 rng(opt.seed + 2);
    for (int t = 0; t < 50; ++t) {
        KVLayoutSpec l{1 + std::uint32_t(rng() % 64), 1 + std::uint32_t(rng() % 16),
                       8 * (1 + std::uint32_t(rng() % 4)), 2, 16};
        FragmentedBuffer b(l, 1, rng());
        ok &= build_gather_descriptors(l, b, 0).size() == std::size_t(l.n_layers) * 2;
        ok &= build_sparse_descriptors(l, b, SparseSelection::single_token(l, 0)).size() ==
              std::size_t(l.n_layers) * l.n_kv_heads * 2;
    }
    d << "qwen32b-like dense=" << dense_q << " llama8b-like dense=" << dense_l
      << " single-token sparse=" << sparse_q;
    return {"descriptor-counts", ok, d.str()};
}

// --- criterion 3: coherence soundness + hazard existence -------------------

inline VerifyResult coherence_soundness(const VerifyOptions& opt) {
    ScopedFile f(temp_path(opt, "coh"));
    PoolConfig pc;
    pc.pool_bytes = 2 * kMiB;
    pc.device_count = 1;
    pc.block_bytes = 64 * kKiB;
    pc.backing_path = f.path;
    auto pool = PoolHandle::create(pc);

    auto random = cohcheck::explore_random(pool, opt.schedules(), opt.seed, opt.break_read_fresh);
    auto exhaustive = cohcheck::explore_exhaustive(pool, opt.break_read_fresh);
    bool stale_shown = false;
    cohcheck::stale_demo(pool, stale_shown);

    const bool ok = random.compliant_mismatches == 0 && exhaustive.compliant_mismatches == 0 &&
                    random.plain_stale_reads > 0 && stale_shown;
    std::ostringstream d;
    d << random.schedules << " random + " << exhaustive.schedules << " exhaustive schedules, "
      << random.compliant_mismatches + exhaustive.compliant_mismatches << " compliant mismatches, "
      << random.plain_stale_reads << " stale plain reads";
    return {"coherence-soundness", ok, d.str()};
}

// --- criterion 4: RPC exactly-once under multi-process load ----------------

inline VerifyResult rpc_exactly_once(const VerifyOptions& opt) {
    ScopedFile f(temp_path(opt, "rpc"));
    PoolConfig pc;
    pc.pool_bytes = 4 * kMiB;
    pc.device_count = 1;
    pc.block_bytes = 64 * kKiB;
    pc.backing_path = f.path;
    auto pool = PoolHandle::create(pc);
    auto ch = RpcChannel::create(pool, 128, 64);

    pid_t server = ::fork();
    if (server == 0) {
        try {
            auto p = PoolHandle::attach(f.path);
            auto view = RpcChannel::attach(p);
            RpcServerOptions so;
            so.break_read_fresh = opt.break_read_fresh;
            RpcServer s(view, so);
            s.serve([](std::span<const std::uint8_t> rq, std::span<std::uint8_t> rs) {
                for (std::size_t i = 0; i < rq.size(); ++i) rs[i] = rq[i] ^ 0x5C;
            });
        } catch (...) {
            ::_exit(2);
        }
        ::_exit(0);
    }

    const std::uint32_t n_clients = opt.rpc_clients();
    const std::uint64_t calls_per_client = opt.rpc_calls_per_client();
    const std::uint32_t qd = std::max<std::uint32_t>(1, 128 / n_clients); // QD up to 128 aggregate

    std::vector<pid_t> pids;
    for (std::uint32_t c = 0; c < n_clients; ++c) {
        pid_t pid = ::fork();
        if (pid == 0) {
            int rc = 0;
            try {
                auto p = PoolHandle::attach(f.path);
                auto view = RpcChannel::attach(p);
                RpcClientOptions copts;
                copts.timeout = opt.break_read_fresh ? std::chrono::microseconds(1'500'000)
                                                     : std::chrono::microseconds(60'000'000);
                RpcClient client(view, copts);
                std::mt19937_64 rng(opt.seed * 1000 + c);
                std::vector<std::pair<RpcClient::Pending, std::vector<std::uint8_t>>> inflight;
                std::uint64_t done = 0, bad = 0;
                detail::Backoff idle;
                const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(170);
                const auto stall_budget =
                    opt.break_read_fresh ? std::chrono::seconds(2) : std::chrono::seconds(60);
                auto last_progress = std::chrono::steady_clock::now();
                while (done < calls_per_client) {
                    const auto now = std::chrono::steady_clock::now();
                    if (now > deadline || now - last_progress > stall_budget) { rc = 4; break; }
                    bool progressed = false;
                    while (inflight.size() < qd && done + inflight.size() < calls_per_client) {
                        std::vector<std::uint8_t> req(64);
                        std::uint64_t nonce[2] = {(std::uint64_t(c) << 48) | (done + inflight.size()), rng()};
                        std::memcpy(req.data(), nonce, sizeof nonce);
                        auto p2 = client.try_submit(req);
                        if (!p2) break;
                        inflight.emplace_back(*p2, std::move(req));
                        progressed = true;
                    }
                    for (std::size_t i = 0; i < inflight.size();) {
                        std::vector<std::uint8_t> resp;
                        bool got = false;
                        try {
                            got = client.try_collect(inflight[i].first, resp);
                        } catch (const RpcError&) {
                            bad++;
                            got = true;
                            resp.assign(64, 0);
                        }
                        if (got) {
                            for (std::size_t k = 0; k < 64 && !resp.empty(); ++k)
                                if (resp[k] != (inflight[i].second[k] ^ 0x5C)) { bad++; break; }
                            done++;
                            inflight[i] = std::move(inflight.back());
                            inflight.pop_back();
                            progressed = true;
                        } else {
                            ++i;
                        }
                    }
                    if (progressed) last_progress = std::chrono::steady_clock::now();
                    else idle.wait();
                }
                if (rc == 0 && (bad != 0 || done != calls_per_client)) rc = 3;
            } catch (...) {
                rc = 2;
            }
            ::_exit(rc);
        }
        pids.push_back(pid);
    }

    bool clients_ok = true;
    for (pid_t pid : pids) {
        int status = 0;
        ::waitpid(pid, &status, 0);
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) clients_ok = false;
    }
    const std::uint64_t served = ch.served_total();
    ch.request_stop();
    int status = 0;
    ::waitpid(server, &status, 0);

    const std::uint64_t expected = std::uint64_t(n_clients) * calls_per_client;
    const bool ok = clients_ok && served == expected;
    std::ostringstream d;
    d << n_clients << " clients x " << calls_per_client << " calls (qd " << qd << "): served "
      << served << "/" << expected << (clients_ok ? ", responses matched" : ", CLIENT FAILURES");
    return {"rpc-exactly-once", ok, d.str()};
}

// --- criterion 5: RPC directional performance -------------------------------

inline VerifyResult rpc_direction(const VerifyOptions& opt) {
    const double dur = opt.rpc_bench_duration();

    RpcBenchConfig qd1;
    qd1.pool_path = temp_path(opt, "rpcbench1");
    qd1.clients = 1;
    qd1.qd = 1;
    qd1.duration_s = dur;
    qd1.baseline = "both";
    ScopedFile f1(qd1.pool_path);
    auto r1 = bench_rpc(qd1);

    RpcBenchConfig qd128;
    qd128.pool_path = temp_path(opt, "rpcbench128");
    qd128.clients = 1;
    qd128.qd = 128;
    qd128.duration_s = dur;
    qd128.baseline = "shm";
    ScopedFile f2(qd128.pool_path);
    auto r128 = bench_rpc(qd128);

    const double shm_p50 = r1.get("shm_p50");
    const double tcp_p50 = r1.get("tcp_p50");
    const double tput1 = r1.get("shm_throughput");
    const double tput128 = r128.get("shm_throughput");

    const bool ok = shm_p50 < tcp_p50 && tput128 > 3.0 * tput1;
    std::ostringstream d;
    d << "shm p50 " << shm_p50 << "us vs tcp p50 " << tcp_p50 << "us; qd128 " << tput128
      << " ops/s vs qd1 " << tput1 << " ops/s";
    return {"rpc-direction", ok, d.str()};
}

// --- criterion 6: interleaving distribution ---------------------------------

inline VerifyResult interleaving_distribution(const VerifyOptions& opt) {
    bool ok = true;
    std::ostringstream d;
    {
        ScopedFile f(temp_path(opt, "ileave-on"));
        PoolConfig pc;
        pc.pool_bytes = 64 * kMiB;
        pc.device_count = 4;
        pc.interleave_chunk_bytes = 2 * kMiB;
        pc.block_bytes = 64 * kKiB;
        pc.backing_path = f.path;
        auto pool = PoolHandle::create(pc);
        std::vector<std::uint8_t> buf(kMiB, 0x5A);
        for (std::uint64_t off = 0; off < 64 * kMiB; off += kMiB)
            pool.write_bytes(off, buf.data(), buf.size());
        auto loads = pool.device_load_report();
        for (auto l : loads) ok &= l == 16 * kMiB; // exact, zero tolerance
        d << "contiguous 64MiB/4dev: [";
        for (auto l : loads) d << l / kMiB << "MiB ";
        d << "]";
    }
    {
        SkewBenchConfig sc;
        sc.pool_path = temp_path(opt, "ileave-off");
        sc.zipf_s = 0.99;
        sc.interleave = false;
        sc.workers = 2;
        sc.ops_per_worker = 4096;
        ScopedFile f(sc.pool_path);
        auto rep = bench_skew(sc);
        const double top = rep.get("top_device_share");
        ok &= top > 0.5;
        d << "; zipf(0.99) no-interleave top device share " << top;
    }
    return {"interleaving-distribution", ok, d.str()};
}

// --- criterion 7: index correctness -----------------------------------------

inline VerifyResult index_oracle(const VerifyOptions& opt) {
    // trie oracle (token paths) against the hash-chain index
    struct Node {
        std::map<std::vector<std::int32_t>, Node> kids;
        bool ready = false;
        std::uint64_t addr = 0;
    };
    Node root;
    KvIndex idx;
    std::mt19937_64 rng(opt.seed + 7);

    std::vector<std::vector<std::int32_t>> groups;
    for (int g = 0; g < 64; ++g) {
        std::vector<std::int32_t> t(16 * (1 + rng() % 8));
        for (auto& x : t) x = static_cast<std::int32_t>(rng() % 1000); // small vocab: collisions in paths
        groups.push_back(std::move(t));
    }

    std::uint64_t next_addr = 0;
    for (const auto& g : groups) {
        const std::size_t blocks = rng() % (g.size() / 16 + 1);
        auto hashes = prompt_block_hashes(g);
        Node* n = &root;
        for (std::size_t b = 0; b < blocks; ++b) {
            auto r = idx.insert(hashes[b], {next_addr, 4096});
            std::uint64_t addr;
            if (r.status == KvIndex::InsertStatus::Ok) {
                idx.complete(r.ticket);
                addr = next_addr;
                next_addr += 4096;
            } else {
                addr = idx.lookup(hashes[b])->addr.offset;
            }
            std::vector<std::int32_t> key(g.begin() + b * 16, g.begin() + (b + 1) * 16);
            n = &n->kids[key];
            n->ready = true;
            n->addr = addr;
        }
    }

    std::uint64_t mismatches = 0;
    for (std::uint64_t t = 0; t < opt.index_prompts(); ++t) {
        const auto& g = groups[rng() % groups.size()];
        std::vector<std::int32_t> prompt(g.begin(), g.begin() + rng() % (g.size() + 1));
        for (std::uint64_t i = rng() % 40; i > 0; --i)
            prompt.push_back(static_cast<std::int32_t>(rng() % 1000));

        auto got = idx.match_prefix(prompt);
        std::vector<std::uint64_t> want;
        const Node* n = &root;
        for (std::size_t b = 0; (b + 1) * 16 <= prompt.size(); ++b) {
            std::vector<std::int32_t> key(prompt.begin() + b * 16, prompt.begin() + (b + 1) * 16);
            auto it = n->kids.find(key);
            if (it == n->kids.end() || !it->second.ready) break;
            want.push_back(it->second.addr);
            n = &it->second;
        }
        if (got.size() != want.size()) {
            mismatches++;
            continue;
        }
        for (std::size_t i = 0; i < got.size(); ++i)
            if (got[i].second.offset != want[i]) mismatches++;
    }

    // 4-process insert race through the wire
    ScopedFile f(temp_path(opt, "idxrace"));
    PoolConfig pc;
    pc.pool_bytes = 4 * kMiB;
    pc.device_count = 1;
    pc.block_bytes = 64 * kKiB;
    pc.backing_path = f.path;
    auto pool = PoolHandle::create(pc);
    auto ch = RpcChannel::create(pool, 32, 64);

    pid_t server = ::fork();
    if (server == 0) {
        try {
            auto p = PoolHandle::attach(f.path);
            auto view = RpcChannel::attach(p);
            KvIndex index;
            IndexService service(index, p);
            RpcServer s(view);
            s.serve(service.handler());
        } catch (...) {
            ::_exit(2);
        }
        ::_exit(0);
    }
    std::vector<std::int32_t> tokens(16, 7);
    const auto race_hash = chain_hash(kRootHash, tokens);
    std::vector<pid_t> pids;
    for (int c = 0; c < 4; ++c) {
        pid_t pid = ::fork();
        if (pid == 0) {
            int rc = 1;
            try {
                auto p = PoolHandle::attach(f.path);
                auto view = RpcChannel::attach(p);
                IndexClient client(view);
                auto addr = p.alloc_block();
                auto r = client.insert(race_hash, addr);
                if (r.status == IndexStatus::Ok) {
                    client.complete(r.ticket);
                    rc = 0;
                } else {
                    p.free_block(addr);
                    rc = 10;
                }
            } catch (...) {
                rc = 2;
            }
            ::_exit(rc);
        }
        pids.push_back(pid);
    }
    int winners = 0, losers = 0;
    for (pid_t pid : pids) {
        int status = 0;
        ::waitpid(pid, &status, 0);
        if (WIFEXITED(status) && WEXITSTATUS(status) == 0) winners++;
        if (WIFEXITED(status) && WEXITSTATUS(status) == 10) losers++;
    }
    ch.request_stop();
    int status = 0;
    ::waitpid(server, &status, 0);

    const bool ok = mismatches == 0 && winners == 1 && losers == 3;
    std::ostringstream d;
    d << opt.index_prompts() << " prompts vs trie oracle, " << mismatches << " mismatches; race winners "
      << winners << "/4";
    return {"index-correctness", ok, d.str()};
}

// --- criterion 8: scheduler paired simulation --------------------------------

inline VerifyResult scheduler_paired(const VerifyOptions& opt) {
    TraceConfig cfg;
    cfg.requests = 10'000;
    cfg.zipf_s = 0.99;
    cfg.prefix_groups = 256;
    cfg.seed = opt.seed;
    auto trace = generate_trace(cfg);

    auto obl = run_trace(trace, Policy::Oblivious, 16);
    auto loc = run_trace(trace, Policy::Locality, 16);

    auto permuted = trace;
    std::mt19937_64 rng(opt.seed + 1);
    for (auto& r : permuted) std::shuffle(r.tokens.begin(), r.tokens.end(), rng);
    auto obl2 = run_trace(permuted, Policy::Oblivious, 16);

    const bool ok = obl.load_ratio <= 1.15 && loc.load_ratio >= 1.5 &&
                    obl.assignments == obl2.assignments && obl.completed == trace.size() &&
                    loc.completed == trace.size() && obl.p99_queue_us <= loc.p99_queue_us;
    std::ostringstream d;
    d << "oblivious max/mean " << obl.load_ratio << ", locality " << loc.load_ratio
      << "; p99 queue " << obl.p99_queue_us << "us vs " << loc.p99_queue_us
      << "us; permutation-invariant=" << (obl.assignments == obl2.assignments ? "yes" : "NO");
    return {"scheduler-paired", ok, d.str()};
}

// --- criterion 9: data-movement accounting -----------------------------------

inline VerifyResult movement_accounting(const VerifyOptions& opt) {
    ScopedFile f(temp_path(opt, "move"));
    PoolConfig pc;
    pc.pool_bytes = 16 * kMiB;
    pc.device_count = 1;
    pc.block_bytes = kDefaultBlockBytes;
    pc.backing_path = f.path;
    auto pool = PoolHandle::create(pc);
    CoherentSession session(pool);

    auto layout = qwen32b_like();
    FragmentedBuffer buf(layout, 1, opt.seed);
    buf.fill_random(opt.seed + 1);
    auto addr = pool.alloc_block();
    auto descs = build_gather_descriptors(layout, buf, 0);

    TransferStats direct, staged;
    gather_write(session, buf, descs, addr, &direct);
    std::vector<std::uint8_t> staging(layout.block_bytes());
    staged_copy_baseline(session, buf, descs, staging, addr, &staged);

    std::uint64_t sum = 0;
    for (const auto& dsc : descs) sum += dsc.length;

    const bool ok = direct.bytes_moved == sum && staged.bytes_moved == 2 * sum;
    std::ostringstream d;
    d << "direct " << direct.bytes_moved << " == sum " << sum << "; staged " << staged.bytes_moved
      << " == 2x" << sum;
    return {"movement-accounting", ok, d.str()};
}

} // namespace verifiers

inline std::vector<VerifyResult> verify_all(const VerifyOptions& opt) {
    return {
        verifiers::transfer_roundtrip(opt),
        verifiers::descriptor_counts(opt),
        verifiers::coherence_soundness(opt),
        verifiers::rpc_exactly_once(opt),
        verifiers::rpc_direction(opt),
        verifiers::interleaving_distribution(opt),
        verifiers::index_oracle(opt),
        verifiers::scheduler_paired(opt),
        verifiers::movement_accounting(opt),
    };
}

} // namespace poolkv
