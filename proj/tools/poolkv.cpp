// poolkv: desk-scale CXL-style memory pool playground.
// Subcommands: pool / coh / rpc / index / xfer / sched / bench / verify.

#include "poolkv/bench.hpp"
#include "poolkv/coherence_check.hpp"
#include "poolkv/verify.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>

using namespace poolkv;

namespace {

RpcChannel* g_serving_channel = nullptr;

void stop_handler(int) {
    if (g_serving_channel) g_serving_channel->request_stop();
}

void print_pool_stat(PoolHandle& pool) {
    auto cfg = pool.config();
    std::printf("pool          %s\n", pool.path().c_str());
    std::printf("capacity      %s\n", format_bytes(cfg.pool_bytes).c_str());
    std::printf("devices       %u (interleave %s, chunk %s)\n", cfg.device_count,
                cfg.interleave ? "on" : "off", format_bytes(cfg.interleave_chunk_bytes).c_str());
    std::printf("block_bytes   %s (%llu blocks, %llu live, %llu free)\n",
                format_bytes(cfg.block_bytes).c_str(), (unsigned long long)pool.block_count(),
                (unsigned long long)pool.live_blocks(), (unsigned long long)pool.free_blocks());
    std::printf("rpc_region    %s\n", format_bytes(pool.rpc_space_bytes()).c_str());
    std::printf("hash_algo     %u (murmur3_x64_128)\n", pool.hash_algo());
    auto loads = pool.device_load_report();
    for (std::size_t d = 0; d < loads.size(); ++d)
        std::printf("device[%zu]     %llu bytes written\n", d, (unsigned long long)loads[d]);
}

int print_verify_results(const std::vector<VerifyResult>& results) {
    bool all = true;
    for (const auto& r : results) {
        std::printf("%s  %-26s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
        all &= r.pass;
    }
    std::printf("%s\n", all ? "all properties passed" : "PROPERTY FAILURES");
    return all ? 0 : 1;
}

std::string default_pool_path() {
    const char* env = std::getenv("POOLKV_POOL");
    return env ? env : "/tmp/poolkv.pool";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"poolkv: multi-process shared-memory KVCache pool with software coherence"};
    app.require_subcommand(1);

    std::string pool_path = default_pool_path();
    std::string out_dir;

    // ---- pool ----
    auto* pool_cmd = app.add_subcommand("pool", "create/attach/stat the shared pool region");
    pool_cmd->require_subcommand(1);
    PoolConfig create_cfg;
    create_cfg.pool_bytes = 64 * kMiB;
    bool no_interleave = false;
    auto* pool_create = pool_cmd->add_subcommand("create", "create a pool region");
    pool_create->add_option("--path", pool_path, "backing file")->envname("POOLKV_POOL");
    pool_create->add_option("--size", create_cfg.pool_bytes, "pool capacity")
        ->transform(CLI::AsSizeValue(false));
    pool_create->add_option("--devices", create_cfg.device_count, "emulated device count");
    pool_create->add_option("--chunk", create_cfg.interleave_chunk_bytes, "interleave chunk")
        ->transform(CLI::AsSizeValue(false));
    pool_create->add_option("--block", create_cfg.block_bytes, "allocation granule")
        ->transform(CLI::AsSizeValue(false));
    pool_create->add_option("--rpc-bytes", create_cfg.rpc_region_bytes, "reserved RPC range")
        ->transform(CLI::AsSizeValue(false));
    pool_create->add_flag("--no-interleave", no_interleave, "contiguous device partitions");

    auto* pool_attach = pool_cmd->add_subcommand("attach", "attach and validate");
    pool_attach->add_option("--path", pool_path)->envname("POOLKV_POOL");
    auto* pool_stat = pool_cmd->add_subcommand("stat", "print header and counters");
    pool_stat->add_option("--path", pool_path)->envname("POOLKV_POOL");

    // ---- coh ----
    auto* coh_cmd = app.add_subcommand("coh", "coherence protocol demos and checks");
    coh_cmd->require_subcommand(1);
    auto* coh_demo = coh_cmd->add_subcommand("demo-stale", "show the stale-read hazard");
    std::uint64_t schedules = 100'000;
    std::uint64_t seed = 42;
    bool break_read_fresh = false;
    auto* coh_verify = coh_cmd->add_subcommand("verify", "randomized + exhaustive schedule check");
    coh_verify->add_option("--schedules", schedules, "random schedule count");
    coh_verify->add_option("--seed", seed);
    coh_verify->add_flag("--break-read-fresh", break_read_fresh,
                         "mutation: degrade read_fresh to a plain read (check must fail)");

    // ---- rpc ----
    auto* rpc_cmd = app.add_subcommand("rpc", "shared-memory RPC server and benchmark");
    rpc_cmd->require_subcommand(1);
    std::uint32_t slot_count = 128, payload_bytes = 64;
    bool create_channel = false;
    auto* rpc_serve = rpc_cmd->add_subcommand("serve", "run an echo server on the pool channel");
    rpc_serve->add_option("--channel", pool_path, "pool file carrying the channel")
        ->envname("POOLKV_POOL");
    rpc_serve->add_flag("--create", create_channel, "create the channel first");
    rpc_serve->add_option("--slots", slot_count);
    rpc_serve->add_option("--payload", payload_bytes);

    RpcBenchConfig rpc_cfg;
    auto* rpc_bench_cmd = rpc_cmd->add_subcommand("bench", "ping-pong latency/throughput");
    rpc_bench_cmd->add_option("--clients", rpc_cfg.clients);
    rpc_bench_cmd->add_option("--qd", rpc_cfg.qd, "in-flight requests per client");
    rpc_bench_cmd->add_option("--duration", rpc_cfg.duration_s, "seconds");
    rpc_bench_cmd->add_option("--baseline", rpc_cfg.baseline)
        ->check(CLI::IsMember({"shm", "tcp", "both"}));
    rpc_bench_cmd->add_option("--slots", rpc_cfg.slot_count);
    rpc_bench_cmd->add_option("--out", out_dir, "report directory");

    // ---- index ----
    auto* index_cmd = app.add_subcommand("index", "global KVCache index service");
    index_cmd->require_subcommand(1);
    auto* index_serve = index_cmd->add_subcommand("serve", "run the metadata server");
    index_serve->add_option("--path", pool_path)->envname("POOLKV_POOL");
    index_serve->add_flag("--create", create_channel, "create the channel first");
    auto* index_stat = index_cmd->add_subcommand("stat", "query a running metadata server");
    index_stat->add_option("--path", pool_path)->envname("POOLKV_POOL");
    auto* index_dump = index_cmd->add_subcommand("dump", "list entries of a running server");
    index_dump->add_option("--path", pool_path)->envname("POOLKV_POOL");

    // ---- xfer ----
    auto* xfer_cmd = app.add_subcommand("xfer", "KVCache transfer engine benchmark");
    xfer_cmd->require_subcommand(1);
    TransferBenchConfig xfer_cfg;
    std::string profiles_file;
    auto* xfer_bench_cmd = xfer_cmd->add_subcommand("bench", "dense/sparse transfer benchmark");
    xfer_bench_cmd->add_option("--profile", xfer_cfg.profile, "layout profile name");
    xfer_bench_cmd->add_option("--mode", xfer_cfg.mode)->check(CLI::IsMember({"dense", "sparse"}));
    xfer_bench_cmd->add_option("--baseline", xfer_cfg.baseline)
        ->check(CLI::IsMember({"staged", "direct"}));
    xfer_bench_cmd->add_option("--iters", xfer_cfg.iterations);
    xfer_bench_cmd->add_option("--profiles", xfer_cfg.profiles_file, "load profiles from a file");
    xfer_bench_cmd->add_option("--block-tokens", xfer_cfg.block_tokens,
                               "override tokens per block (256 mimics RDMA batching)");
    xfer_bench_cmd->add_option("--out", out_dir, "report directory");
    auto* xfer_profiles = xfer_cmd->add_subcommand("profiles", "write the built-in profile file");
    xfer_profiles->add_option("--out", profiles_file, "target file")->required();

    // ---- sched ----
    auto* sched_cmd = app.add_subcommand("sched", "trace-driven scheduler simulation");
    sched_cmd->require_subcommand(1);
    TraceConfig trace_cfg;
    std::string policy = "oblivious";
    std::uint32_t instances = 16;
    std::string metrics_out, trace_in, trace_out;
    auto* sched_run = sched_cmd->add_subcommand("run", "simulate one policy over a trace");
    sched_run->add_option("--policy", policy)->check(CLI::IsMember({"oblivious", "locality"}));
    sched_run->add_option("--zipf", trace_cfg.zipf_s, "prefix popularity skew");
    sched_run->add_option("--instances", instances);
    sched_run->add_option("--requests", trace_cfg.requests);
    sched_run->add_option("--groups", trace_cfg.prefix_groups);
    sched_run->add_option("--seed", trace_cfg.seed);
    sched_run->add_option("--trace", trace_in, "replay a trace CSV instead of generating");
    sched_run->add_option("--out", metrics_out, "metrics JSON file");
    auto* sched_gen = sched_cmd->add_subcommand("gen", "generate a trace CSV");
    sched_gen->add_option("--out", trace_out)->required();
    sched_gen->add_option("--requests", trace_cfg.requests);
    sched_gen->add_option("--zipf", trace_cfg.zipf_s);
    sched_gen->add_option("--groups", trace_cfg.prefix_groups);
    sched_gen->add_option("--seed", trace_cfg.seed);

    // ---- bench ----
    auto* bench_cmd = app.add_subcommand("bench", "microbenchmarks with CSV/JSON reports");
    bench_cmd->require_subcommand(1);
    auto* bench_rpc_cmd = bench_cmd->add_subcommand("rpc", "shm vs loopback-TCP RPC");
    bench_rpc_cmd->add_option("--clients", rpc_cfg.clients);
    bench_rpc_cmd->add_option("--qd", rpc_cfg.qd);
    bench_rpc_cmd->add_option("--duration", rpc_cfg.duration_s);
    bench_rpc_cmd->add_option("--baseline", rpc_cfg.baseline)
        ->check(CLI::IsMember({"shm", "tcp", "both"}));
    bench_rpc_cmd->add_option("--out", out_dir);
    auto* bench_xfer_cmd = bench_cmd->add_subcommand("transfer", "direct vs staged KVCache copies");
    bench_xfer_cmd->add_option("--profile", xfer_cfg.profile);
    bench_xfer_cmd->add_option("--mode", xfer_cfg.mode)->check(CLI::IsMember({"dense", "sparse"}));
    bench_xfer_cmd->add_option("--iters", xfer_cfg.iterations);
    bench_xfer_cmd->add_option("--out", out_dir);
    SkewBenchConfig skew_cfg;
    std::string interleave_mode = "on";
    auto* bench_skew_cmd = bench_cmd->add_subcommand("skew", "per-device load under skewed offsets");
    bench_skew_cmd->add_option("--zipf", skew_cfg.zipf_s);
    bench_skew_cmd->add_option("--threads", skew_cfg.workers, "worker process count");
    bench_skew_cmd->add_option("--op-size", skew_cfg.op_bytes)->transform(CLI::AsSizeValue(false));
    bench_skew_cmd->add_option("--ops", skew_cfg.ops_per_worker);
    bench_skew_cmd->add_option("--devices", skew_cfg.devices);
    bench_skew_cmd->add_option("--interleave", interleave_mode)->check(CLI::IsMember({"on", "off"}));
    bench_skew_cmd->add_flag("--sweep", skew_cfg.sweep, "contiguous sweep instead of random offsets");
    bench_skew_cmd->add_option("--out", out_dir);

    // ---- verify ----
    VerifyOptions vopt;
    auto* verify_cmd = app.add_subcommand("verify", "run every acceptance property");
    verify_cmd->add_option("--seed", vopt.seed);
    verify_cmd->add_flag("--quick", vopt.quick, "scaled-down sizes");
    verify_cmd->add_flag("--break-read-fresh", vopt.break_read_fresh,
                         "mutation: the coherence and RPC properties must fail");
    verify_cmd->add_option("--out", out_dir, "report directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ? 0 : 2;
    }

    try {
        if (pool_create->parsed()) {
            create_cfg.backing_path = pool_path;
            create_cfg.interleave = !no_interleave;
            auto pool = PoolHandle::create(create_cfg);
            print_pool_stat(pool);
            return 0;
        }
        if (pool_attach->parsed() || pool_stat->parsed()) {
            auto pool = PoolHandle::attach(pool_path);
            print_pool_stat(pool);
            return 0;
        }

        if (coh_demo->parsed()) {
            std::string path = "/tmp/poolkv-demo-" + std::to_string(::getpid());
            PoolConfig pc;
            pc.pool_bytes = 2 * kMiB;
            pc.device_count = 1;
            pc.block_bytes = 64 * kKiB;
            pc.backing_path = path;
            auto pool = PoolHandle::create(pc);
            bool stale = false;
            std::printf("%s", cohcheck::stale_demo(pool, stale).c_str());
            std::printf("hazard shown: %s\n", stale ? "yes" : "no");
            ::unlink(path.c_str());
            return stale ? 0 : 1;
        }
        if (coh_verify->parsed()) {
            std::string path = "/tmp/poolkv-cohverify-" + std::to_string(::getpid());
            PoolConfig pc;
            pc.pool_bytes = 2 * kMiB;
            pc.device_count = 1;
            pc.block_bytes = 64 * kKiB;
            pc.backing_path = path;
            auto pool = PoolHandle::create(pc);
            auto rnd = cohcheck::explore_random(pool, schedules, seed, break_read_fresh);
            auto exh = cohcheck::explore_exhaustive(pool, break_read_fresh);
            ::unlink(path.c_str());
            std::printf("random:     %llu schedules, %llu compliant reads, %llu mismatches\n",
                        (unsigned long long)rnd.schedules, (unsigned long long)rnd.compliant_reads,
                        (unsigned long long)rnd.compliant_mismatches);
            std::printf("exhaustive: %llu schedules, %llu mismatches\n",
                        (unsigned long long)exh.schedules,
                        (unsigned long long)exh.compliant_mismatches);
            std::printf("stale plain reads observed: %llu\n",
                        (unsigned long long)(rnd.plain_stale_reads + exh.plain_stale_reads));
            const bool ok = rnd.compliant_mismatches == 0 && exh.compliant_mismatches == 0 &&
                            rnd.plain_stale_reads + exh.plain_stale_reads > 0;
            std::printf("%s\n", ok ? "PASS" : "FAIL");
            return ok ? 0 : 1;
        }

        if (rpc_serve->parsed()) {
            auto pool = PoolHandle::attach(pool_path);
            auto ch = create_channel ? RpcChannel::create(pool, slot_count, payload_bytes)
                                     : RpcChannel::attach(pool);
            ch.clear_stop();
            g_serving_channel = &ch;
            std::signal(SIGINT, stop_handler);
            std::signal(SIGTERM, stop_handler);
            std::printf("echo server on %s (%u slots, %u B payload)\n", pool_path.c_str(),
                        ch.slot_count(), ch.payload_bytes());
            RpcServer server(ch);
            server.serve([](std::span<const std::uint8_t> rq, std::span<std::uint8_t> rs) {
                std::memcpy(rs.data(), rq.data(), rq.size());
            });
            std::printf("served %llu requests\n", (unsigned long long)ch.served_total());
            return 0;
        }
        if (rpc_bench_cmd->parsed() || bench_rpc_cmd->parsed()) {
            rpc_cfg.pool_path = "/tmp/poolkv-rpcbench-" + std::to_string(::getpid());
            auto report = bench_rpc(rpc_cfg);
            ::unlink(rpc_cfg.pool_path.c_str());
            std::printf("%s\n", report.to_json().dump(2).c_str());
            if (!out_dir.empty()) report.write(out_dir);
            return 0;
        }

        if (index_serve->parsed()) {
            auto pool = PoolHandle::attach(pool_path);
            auto ch = create_channel ? RpcChannel::create(pool, 128, 64) : RpcChannel::attach(pool);
            ch.clear_stop();
            g_serving_channel = &ch;
            std::signal(SIGINT, stop_handler);
            std::signal(SIGTERM, stop_handler);
            KvIndex index;
            IndexService service(index, pool);
            std::printf("index server on %s\n", pool_path.c_str());
            RpcServer server(ch);
            server.serve(service.handler());
            auto st = index.stats();
            std::printf("final: %llu entries, %llu hits, %llu misses\n",
                        (unsigned long long)st.entries, (unsigned long long)st.hits,
                        (unsigned long long)st.misses);
            return 0;
        }
        if (index_stat->parsed()) {
            auto pool = PoolHandle::attach(pool_path);
            auto ch = RpcChannel::attach(pool);
            IndexClient client(ch);
            auto st = client.stat();
            std::printf("entries   %llu (ready %llu, writing %llu)\n", (unsigned long long)st.entries,
                        (unsigned long long)st.ready, (unsigned long long)st.writing);
            std::printf("live      %s\n", format_bytes(st.live_bytes).c_str());
            std::printf("hits      %llu\nmisses    %llu\nevictions %llu\n",
                        (unsigned long long)st.hits, (unsigned long long)st.misses,
                        (unsigned long long)st.evictions);
            return 0;
        }
        if (index_dump->parsed()) {
            auto pool = PoolHandle::attach(pool_path);
            auto ch = RpcChannel::attach(pool);
            IndexClient client(ch);
            std::size_t n = 0;
            client.dump([&](const IndexResponse& e) {
                std::printf("%016llx%016llx  addr=%llu len=%u %s\n", (unsigned long long)e.hash.hi,
                            (unsigned long long)e.hash.lo, (unsigned long long)e.addr, e.len,
                            e.state == 1 ? "READY" : "WRITING");
                n++;
            });
            std::printf("%zu entries\n", n);
            return 0;
        }

        if (xfer_bench_cmd->parsed() || bench_xfer_cmd->parsed()) {
            xfer_cfg.pool_path = "/tmp/poolkv-xferbench-" + std::to_string(::getpid());
            auto report = bench_transfer(xfer_cfg);
            ::unlink(xfer_cfg.pool_path.c_str());
            std::printf("%s\n", report.to_json().dump(2).c_str());
            if (!out_dir.empty()) report.write(out_dir);
            return 0;
        }
        if (xfer_profiles->parsed()) {
            save_profiles(profiles_file, builtin_profiles());
            std::printf("wrote %s\n", profiles_file.c_str());
            return 0;
        }

        if (sched_gen->parsed()) {
            auto trace = generate_trace(trace_cfg);
            write_trace_csv(trace_out, trace);
            std::printf("wrote %zu requests to %s\n", trace.size(), trace_out.c_str());
            return 0;
        }
        if (sched_run->parsed()) {
            auto trace = trace_in.empty() ? generate_trace(trace_cfg)
                                          : read_trace_csv(trace_in, trace_cfg);
            auto m = run_trace(trace, policy == "oblivious" ? Policy::Oblivious : Policy::Locality,
                               instances);
            nlohmann::json j{{"policy", policy},
                             {"instances", instances},
                             {"requests", m.requests},
                             {"completed", m.completed},
                             {"load_ratio", m.load_ratio},
                             {"outstanding_ratio", m.outstanding_ratio},
                             {"p50_queue_us", m.p50_queue_us},
                             {"p99_queue_us", m.p99_queue_us},
                             {"hit_ratio", m.hit_ratio},
                             {"assigned_per_instance", m.assigned_per_instance}};
            std::printf("%s\n", j.dump(2).c_str());
            if (!metrics_out.empty()) {
                std::ofstream out(metrics_out);
                out << j.dump(2) << "\n";
            }
            return 0;
        }

        if (bench_skew_cmd->parsed()) {
            skew_cfg.interleave = interleave_mode == "on";
            skew_cfg.pool_path = "/tmp/poolkv-skewbench-" + std::to_string(::getpid());
            auto report = bench_skew(skew_cfg);
            ::unlink(skew_cfg.pool_path.c_str());
            std::printf("%s\n", report.to_json().dump(2).c_str());
            if (!out_dir.empty()) report.write(out_dir);
            return 0;
        }

        if (verify_cmd->parsed()) {
            std::printf("verify: seed=%llu%s%s\n", (unsigned long long)vopt.seed,
                        vopt.quick ? " (quick)" : "",
                        vopt.break_read_fresh ? " (mutation: break-read-fresh)" : "");
            auto results = verify_all(vopt);
            int rc = print_verify_results(results);
            if (!out_dir.empty()) {
                BenchReport report;
                report.benchmark = "verify";
                report.config = {{"seed", vopt.seed},
                                 {"quick", vopt.quick},
                                 {"break_read_fresh", vopt.break_read_fresh}};
                for (const auto& r : results) report.add(r.name, r.pass ? 1 : 0, "pass");
                report.write(out_dir);
            }
            return rc;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 2;
}
