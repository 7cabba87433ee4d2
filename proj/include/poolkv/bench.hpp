#pragma once

/// Microbenchmark runners and their report schema. Latency numbers are
/// reported, never asserted against absolute targets; the verify suite only
/// checks hardware-independent facts (bytes moved, call counts) and paired
/// directional comparisons on the same machine.

#include "poolkv/index_service.hpp"
#include "poolkv/scheduler.hpp"
#include "poolkv/transfer.hpp"

#include <json.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <numeric>
#include <thread>

namespace poolkv {

inline constexpr int kReportSchemaVersion = 1;

struct Metric {
    std::string name;
    double value = 0;
    std::string unit;
};

inline nlohmann::json environment_fingerprint() {
    char host[256] = "unknown";
    ::gethostname(host, sizeof host - 1);
    return {
        {"hostname", host},
        {"hardware_threads", std::thread::hardware_concurrency()},
        {"page_bytes", ::sysconf(_SC_PAGESIZE)},
        {"timestamp_unix", std::time(nullptr)},
    };
}

/// Append-only benchmark report: JSON file per run plus a row-per-metric CSV
/// with a fixed column order.
struct BenchReport {
    std::string benchmark;
    nlohmann::json config = nlohmann::json::object();
    std::vector<Metric> metrics;
    nlohmann::json environment = environment_fingerprint();

    void add(const std::string& name, double value, const std::string& unit) {
        metrics.push_back({name, value, unit});
    }

    double get(const std::string& name) const {
        for (const auto& m : metrics)
            if (m.name == name) return m.value;
        throw Error("report has no metric " + name);
    }

    bool has(const std::string& name) const {
        for (const auto& m : metrics)
            if (m.name == name) return true;
        return false;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["schema_version"] = kReportSchemaVersion;
        j["benchmark"] = benchmark;
        j["config"] = config;
        j["environment"] = environment;
        j["metrics"] = nlohmann::json::array();
        for (const auto& m : metrics)
            j["metrics"].push_back({{"name", m.name}, {"value", m.value}, {"unit", m.unit}});
        return j;
    }

    static const char* csv_header() { return "benchmark,timestamp_unix,metric,value,unit"; }

    /// Writes <benchmark>-<timestamp>.json and appends to reports.csv.
    void write(const std::string& out_dir) const {
        ::mkdir(out_dir.c_str(), 0755); // EEXIST is fine
        const auto ts = environment["timestamp_unix"].get<std::int64_t>();
        const std::string json_path =
            out_dir + "/" + benchmark + "-" + std::to_string(ts) + ".json";
        std::ofstream jf(json_path);
        if (!jf) throw Error("cannot write report " + json_path);
        jf << to_json().dump(2) << "\n";

        const std::string csv_path = out_dir + "/reports.csv";
        const bool fresh = !std::ifstream(csv_path).good();
        std::ofstream cf(csv_path, std::ios::app);
        if (fresh) cf << csv_header() << "\n";
        for (const auto& m : metrics)
            cf << benchmark << "," << ts << "," << m.name << "," << m.value << "," << m.unit << "\n";
    }
};

// ---------------------------------------------------------------------------
// Loopback-TCP ping-pong baseline (same payload size as the shm RPC).
// ---------------------------------------------------------------------------

namespace tcpbench {

inline void write_all(int fd, const void* buf, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(buf);
    while (n > 0) {
        ssize_t w = ::write(fd, p, n);
        if (w <= 0) throw Error("tcp write failed");
        p += w;
        n -= static_cast<std::size_t>(w);
    }
}

inline bool read_all(int fd, void* buf, std::size_t n) {
    auto* p = static_cast<std::uint8_t*>(buf);
    while (n > 0) {
        ssize_t r = ::read(fd, p, n);
        if (r <= 0) return false;
        p += r;
        n -= static_cast<std::size_t>(r);
    }
    return true;
}

/// Echo server on an ephemeral loopback port; one connection at a time.
class EchoServer {
public:
    explicit EchoServer(std::uint32_t payload) : payload_(payload) {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw Error("tcp socket failed");
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = 0;
        int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
            ::listen(listen_fd_, 8) != 0)
            throw Error("tcp bind/listen failed");
        socklen_t len = sizeof addr;
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        th_ = std::thread([this] { loop(); });
    }

    ~EchoServer() {
        stop_.store(true);
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        th_.join();
    }

    std::uint16_t port() const { return port_; }

private:
    void loop() {
        std::vector<std::uint8_t> buf(payload_);
        while (!stop_.load()) {
            int c = ::accept(listen_fd_, nullptr, nullptr);
            if (c < 0) return;
            int one = 1;
            ::setsockopt(c, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            while (read_all(c, buf.data(), buf.size()))
                write_all(c, buf.data(), buf.size());
            ::close(c);
        }
    }

    std::uint32_t payload_ = 64;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> stop_{false};
    std::thread th_;
};

inline LatencyHistogram pingpong(std::uint16_t port, std::uint32_t payload, double duration_s) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw Error("tcp socket failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        ::close(fd);
        throw Error("tcp connect failed");
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);

    LatencyHistogram hist;
    std::vector<std::uint8_t> buf(payload, 0xA5);
    const auto end = std::chrono::steady_clock::now() + std::chrono::duration<double>(duration_s);
    while (std::chrono::steady_clock::now() < end) {
        const auto t0 = std::chrono::steady_clock::now();
        write_all(fd, buf.data(), buf.size());
        if (!read_all(fd, buf.data(), buf.size())) break;
        hist.record_us(std::chrono::duration<double, std::micro>(
                           std::chrono::steady_clock::now() - t0).count());
    }
    ::close(fd);
    return hist;
}

} // namespace tcpbench

// ---------------------------------------------------------------------------
// shm RPC benchmark workers
// ---------------------------------------------------------------------------

namespace rpcbench {

/// One client process keeping qd calls in flight; echoes are validated.
/// Returns the latency histogram plus timeout count.
struct ClientResult {
    LatencyHistogram hist;
    std::uint64_t timeouts = 0;
    std::uint64_t mismatches = 0;
    std::uint64_t calls = 0;
};

inline ClientResult pipelined_client(RpcChannel& ch, std::uint32_t qd, double duration_s,
                                     std::uint64_t client_id) {
    RpcClient client(ch);
    ClientResult out;
    std::vector<std::pair<RpcClient::Pending, std::vector<std::uint8_t>>> inflight;
    std::mt19937_64 rng(client_id * 7919 + 1);
    const auto end = std::chrono::steady_clock::now() + std::chrono::duration<double>(duration_s);
    detail::Backoff idle;

    auto make_request = [&] {
        std::vector<std::uint8_t> req(ch.payload_bytes());
        for (auto& b : req) b = static_cast<std::uint8_t>(rng());
        return req;
    };

    while (std::chrono::steady_clock::now() < end || !inflight.empty()) {
        bool progressed = false;
        while (inflight.size() < qd && std::chrono::steady_clock::now() < end) {
            auto req = make_request();
            auto p = client.try_submit(req);
            if (!p) break;
            inflight.emplace_back(*p, std::move(req));
            progressed = true;
        }
        for (std::size_t i = 0; i < inflight.size();) {
            std::vector<std::uint8_t> resp;
            if (client.try_collect(inflight[i].first, resp)) {
                if (resp != inflight[i].second) out.mismatches++;
                out.calls++;
                inflight[i] = std::move(inflight.back());
                inflight.pop_back();
                progressed = true;
            } else {
                ++i;
            }
        }
        // past the deadline, drain with a timeout guard
        if (std::chrono::steady_clock::now() >= end && !inflight.empty()) {
            const auto drain_end = std::chrono::steady_clock::now() + std::chrono::seconds(10);
            while (!inflight.empty() && std::chrono::steady_clock::now() < drain_end) {
                for (std::size_t i = 0; i < inflight.size();) {
                    std::vector<std::uint8_t> resp;
                    if (client.try_collect(inflight[i].first, resp)) {
                        out.calls++;
                        inflight[i] = std::move(inflight.back());
                        inflight.pop_back();
                    } else {
                        ++i;
                    }
                }
                idle.wait();
            }
            out.timeouts += inflight.size();
            break;
        }
        if (!progressed) idle.wait();
    }
    out.hist = client.stats().latency;
    return out;
}

} // namespace rpcbench

// ---------------------------------------------------------------------------
// Benchmark entry points (used by the CLI and by verify)
// ---------------------------------------------------------------------------

struct RpcBenchConfig {
    std::string pool_path;
    std::uint32_t clients = 2;
    std::uint32_t qd = 1;
    double duration_s = 2.0;
    std::string baseline = "both"; // shm|tcp|both
    std::uint32_t slot_count = 128;
    std::uint32_t payload_bytes = 64;
};

/// Ping-pong style RPC benchmark: forked server process plus `clients`
/// forked client processes, each keeping `qd` requests in flight, with an
/// optional loopback-TCP echo baseline at the same payload size.
inline BenchReport bench_rpc(const RpcBenchConfig& cfg) {
    BenchReport report;
    report.benchmark = "rpc";
    report.config = {{"clients", cfg.clients}, {"qd", cfg.qd},        {"duration_s", cfg.duration_s},
                     {"baseline", cfg.baseline}, {"slots", cfg.slot_count}, {"payload_bytes", cfg.payload_bytes}};
    if (cfg.duration_s <= 0) return report; // empty report, exit 0

    PoolConfig pc;
    pc.pool_bytes = 4 * kMiB;
    pc.device_count = 1;
    pc.block_bytes = 64 * kKiB;
    pc.rpc_region_bytes = align_up(64 + std::uint64_t(cfg.slot_count) *
                                            (128 + 2 * align_up(cfg.payload_bytes, 64)), 4096);
    pc.backing_path = cfg.pool_path;
    auto pool = PoolHandle::create(pc);
    auto ch = RpcChannel::create(pool, cfg.slot_count, cfg.payload_bytes);

    if (cfg.baseline != "tcp") {
        pid_t server = ::fork();
        if (server == 0) {
            try {
                auto p = PoolHandle::attach(cfg.pool_path);
                auto view = RpcChannel::attach(p);
                RpcServer s(view);
                s.serve([](std::span<const std::uint8_t> rq, std::span<std::uint8_t> rs) {
                    std::memcpy(rs.data(), rq.data(), rq.size());
                });
            } catch (...) {
                ::_exit(2);
            }
            ::_exit(0);
        }

        const std::string stats_dir = cfg.pool_path + ".stats";
        ::mkdir(stats_dir.c_str(), 0755);
        std::vector<pid_t> pids;
        for (std::uint32_t c = 0; c < cfg.clients; ++c) {
            pid_t pid = ::fork();
            if (pid == 0) {
                try {
                    auto p = PoolHandle::attach(cfg.pool_path);
                    auto view = RpcChannel::attach(p);
                    auto r = rpcbench::pipelined_client(view, cfg.qd, cfg.duration_s, c);
                    nlohmann::json j{{"calls", r.calls},
                                     {"timeouts", r.timeouts},
                                     {"mismatches", r.mismatches},
                                     {"p50", r.hist.percentile(0.50)},
                                     {"p99", r.hist.percentile(0.99)},
                                     {"mean", r.hist.mean_us()}};
                    std::ofstream(stats_dir + "/" + std::to_string(c)) << j.dump();
                } catch (...) {
                    ::_exit(2);
                }
                ::_exit(0);
            }
            pids.push_back(pid);
        }
        std::uint64_t calls = 0, timeouts = 0, mismatches = 0;
        double p50_sum = 0, p99_max = 0;
        for (pid_t pid : pids) {
            int status = 0;
            ::waitpid(pid, &status, 0);
        }
        for (std::uint32_t c = 0; c < cfg.clients; ++c) {
            std::ifstream in(stats_dir + "/" + std::to_string(c));
            if (!in) continue;
            nlohmann::json j;
            in >> j;
            calls += j["calls"].get<std::uint64_t>();
            timeouts += j["timeouts"].get<std::uint64_t>();
            mismatches += j["mismatches"].get<std::uint64_t>();
            p50_sum += j["p50"].get<double>();
            p99_max = std::max(p99_max, j["p99"].get<double>());
        }
        ch.request_stop();
        int status = 0;
        ::waitpid(server, &status, 0);

        report.add("shm_calls", double(calls), "ops");
        report.add("shm_timeouts", double(timeouts), "ops");
        report.add("shm_mismatches", double(mismatches), "ops");
        report.add("shm_p50", cfg.clients ? p50_sum / cfg.clients : 0, "us");
        report.add("shm_p99", p99_max, "us");
        report.add("shm_throughput", double(calls) / cfg.duration_s, "ops/s");
        report.add("shm_served", double(ch.served_total()), "ops");
    }

    if (cfg.baseline != "shm") {
        try {
            tcpbench::EchoServer server(cfg.payload_bytes);
            auto hist = tcpbench::pingpong(server.port(), cfg.payload_bytes, cfg.duration_s);
            report.add("tcp_calls", double(hist.count()), "ops");
            report.add("tcp_p50", hist.percentile(0.50), "us");
            report.add("tcp_p99", hist.percentile(0.99), "us");
            report.add("tcp_throughput", double(hist.count()) / cfg.duration_s, "ops/s");
        } catch (const Error&) {
            report.add("tcp_unavailable", 1, "flag"); // shm-only report
        }
    }
    return report;
}

struct TransferBenchConfig {
    std::string pool_path;
    std::string profile = "qwen32b-like";
    std::string mode = "dense";      // dense|sparse
    std::string baseline = "staged"; // staged|direct
    std::string profiles_file;       // optional: load profiles from this file
    std::uint32_t block_tokens = 0;  // 0 = profile default (16); 256 mimics RDMA batching
    std::uint32_t iterations = 50;
};

/// Dense: direct gather/scatter against the staged two-hop baseline.
/// Sparse: one batched call against per-descriptor dispatch.
inline BenchReport bench_transfer(const TransferBenchConfig& cfg) {
    auto profiles = cfg.profiles_file.empty() ? builtin_profiles() : load_profiles(cfg.profiles_file);
    auto it = profiles.find(cfg.profile);
    if (it == profiles.end()) throw ConfigError("unknown profile " + cfg.profile);
    KVLayoutSpec layout = it->second;
    if (cfg.block_tokens != 0) layout.tokens_per_block = cfg.block_tokens;

    BenchReport report;
    report.benchmark = "transfer";
    report.config = {{"profile", cfg.profile},
                     {"mode", cfg.mode},
                     {"baseline", cfg.baseline},
                     {"iterations", cfg.iterations},
                     {"block_tokens", layout.tokens_per_block},
                     {"block_bytes", layout.block_bytes()},
                     {"chunk_bytes", layout.chunk_bytes()}};

    PoolConfig pc;
    pc.pool_bytes = align_up(8 * layout.block_bytes(), 2 * kMiB * 4);
    pc.device_count = 4;
    pc.block_bytes = layout.block_bytes();
    pc.backing_path = cfg.pool_path;
    auto pool = PoolHandle::create(pc);
    CoherentSession session(pool);
    auto addr = pool.alloc_block();

    FragmentedBuffer buf(layout, 1, 1);
    buf.fill_random(4711);
    auto descs = build_gather_descriptors(layout, buf, 0);

    auto time_us = [](auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        return std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0)
            .count();
    };

    if (cfg.mode == "dense") {
        TransferStats direct_stats, staged_stats;
        LatencyHistogram direct_w, staged_w, direct_r;
        std::vector<std::uint8_t> staging(layout.block_bytes());
        FragmentedBuffer rd(layout, 1, 2);
        for (std::uint32_t i = 0; i < cfg.iterations; ++i) {
            direct_w.record_us(time_us([&] { gather_write(session, buf, descs, addr, &direct_stats); }));
            staged_w.record_us(time_us(
                [&] { staged_copy_baseline(session, buf, descs, staging, addr, &staged_stats); }));
            direct_r.record_us(time_us(
                [&] { scatter_read(session, addr, rd, build_gather_descriptors(layout, rd, 0)); }));
        }
        report.add("direct_write_p50", direct_w.percentile(0.5), "us");
        report.add("staged_write_p50", staged_w.percentile(0.5), "us");
        report.add("direct_read_p50", direct_r.percentile(0.5), "us");
        report.add("direct_bytes_per_block", double(direct_stats.bytes_moved) / cfg.iterations, "bytes");
        report.add("staged_bytes_per_block", double(staged_stats.bytes_moved) / cfg.iterations, "bytes");
        report.add("descriptors", double(descs.size()), "count");
    } else if (cfg.mode == "sparse") {
        gather_write(session, buf, descs, addr);
        auto sel = SparseSelection::single_token(layout, 0);
        FragmentedBuffer dst(layout, 1, 3);
        auto sparse = build_sparse_descriptors(layout, dst, sel);
        TransferStats batched_stats, perdesc_stats;
        LatencyHistogram batched, perdesc;
        for (std::uint32_t i = 0; i < cfg.iterations; ++i) {
            batched.record_us(time_us(
                [&] { scatter_read(session, addr, dst, sparse, &batched_stats, ExecMode::Batched); }));
            perdesc.record_us(time_us([&] {
                scatter_read(session, addr, dst, sparse, &perdesc_stats, ExecMode::PerDescriptor);
            }));
        }
        report.add("sparse_descriptors", double(sparse.size()), "count");
        report.add("batched_calls_per_read", double(batched_stats.launch_calls) / cfg.iterations, "count");
        report.add("perdesc_calls_per_read", double(perdesc_stats.launch_calls) / cfg.iterations, "count");
        report.add("batched_p50", batched.percentile(0.5), "us");
        report.add("perdesc_p50", perdesc.percentile(0.5), "us");
        report.add("sparse_bytes", double(batched_stats.bytes_moved) / cfg.iterations, "bytes");
    } else {
        throw ConfigError("unknown mode " + cfg.mode);
    }
    return report;
}

struct SkewBenchConfig {
    std::string pool_path;
    double zipf_s = 0.99;
    std::uint32_t workers = 2;
    std::uint32_t op_bytes = 16 * kKiB;
    bool interleave = true;
    bool sweep = false; // contiguous sweep instead of random offsets
    std::uint64_t ops_per_worker = 4096;
    std::uint32_t devices = 4;
    std::uint64_t pool_bytes = 64 * kMiB;
};

/// Per-device byte distribution and write latency under skewed offsets, with
/// interleaving on or off.
inline BenchReport bench_skew(const SkewBenchConfig& cfg) {
    BenchReport report;
    report.benchmark = "skew";
    report.config = {{"zipf_s", cfg.zipf_s},   {"workers", cfg.workers},
                     {"op_bytes", cfg.op_bytes}, {"interleave", cfg.interleave},
                     {"sweep", cfg.sweep},       {"ops_per_worker", cfg.ops_per_worker},
                     {"devices", cfg.devices},   {"pool_bytes", cfg.pool_bytes}};

    PoolConfig pc;
    pc.pool_bytes = cfg.pool_bytes;
    pc.device_count = cfg.devices;
    pc.block_bytes = 64 * kKiB;
    pc.interleave = cfg.interleave;
    pc.backing_path = cfg.pool_path;
    auto pool = PoolHandle::create(pc);

    const std::uint64_t slots = cfg.pool_bytes / cfg.op_bytes;
    auto worker = [&](std::uint32_t id) {
        auto p = PoolHandle::attach(cfg.pool_path);
        CoherentSession s(p);
        std::vector<std::uint8_t> payload(cfg.op_bytes, static_cast<std::uint8_t>(id));
        std::mt19937_64 rng(1000 + id);
        ZipfSampler zipf(slots, cfg.zipf_s);
        LatencyHistogram hist;
        for (std::uint64_t i = 0; i < cfg.ops_per_worker; ++i) {
            const std::uint64_t slot = cfg.sweep ? i % slots : zipf(rng);
            const auto t0 = std::chrono::steady_clock::now();
            s.bypass_write(slot * cfg.op_bytes, payload.data(), payload.size());
            hist.record_us(std::chrono::duration<double, std::micro>(
                               std::chrono::steady_clock::now() - t0).count());
        }
        return hist;
    };

    std::vector<pid_t> pids;
    const std::string stats_dir = cfg.pool_path + ".stats";
    ::mkdir(stats_dir.c_str(), 0755);
    for (std::uint32_t w = 0; w < cfg.workers; ++w) {
        pid_t pid = ::fork();
        if (pid == 0) {
            try {
                auto hist = worker(w);
                nlohmann::json j{{"p50", hist.percentile(0.5)}, {"p99", hist.percentile(0.99)}};
                std::ofstream(stats_dir + "/" + std::to_string(w)) << j.dump();
            } catch (...) {
                ::_exit(2);
            }
            ::_exit(0);
        }
        pids.push_back(pid);
    }
    for (pid_t pid : pids) {
        int status = 0;
        ::waitpid(pid, &status, 0);
    }

    double p50 = 0, p99 = 0;
    for (std::uint32_t w = 0; w < cfg.workers; ++w) {
        std::ifstream in(stats_dir + "/" + std::to_string(w));
        if (!in) continue;
        nlohmann::json j;
        in >> j;
        p50 += j["p50"].get<double>() / cfg.workers;
        p99 = std::max(p99, j["p99"].get<double>());
    }

    auto loads = pool.device_load_report();
    const double total = double(std::accumulate(loads.begin(), loads.end(), std::uint64_t(0)));
    const auto top = *std::max_element(loads.begin(), loads.end());
    const auto bottom = *std::min_element(loads.begin(), loads.end());
    for (std::size_t d = 0; d < loads.size(); ++d)
        report.add("device" + std::to_string(d) + "_bytes", double(loads[d]), "bytes");
    report.add("top_device_share", total > 0 ? double(top) / total : 0.0, "fraction");
    report.add("device_spread", double(top - bottom), "bytes");
    report.add("write_p50", p50, "us");
    report.add("write_p99", p99, "us");
    return report;
}

} // namespace poolkv
