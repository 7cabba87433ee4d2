#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poolkv/rpc.hpp"
#include "test_util.hpp"

#include <atomic>
#include <cstring>
#include <random>
#include <thread>

using namespace poolkv;

namespace {

struct Fixture {
    testutil::ScopedPoolFile file{"rpc"};
    PoolHandle pool;
    explicit Fixture(std::uint64_t rpc_bytes = 256 * kKiB) {
        PoolConfig cfg;
        cfg.pool_bytes = 4 * kMiB;
        cfg.device_count = 1;
        cfg.block_bytes = 64 * kKiB;
        cfg.rpc_region_bytes = rpc_bytes;
        cfg.backing_path = file.path;
        pool = PoolHandle::create(cfg);
    }
};

void echo_handler(std::span<const std::uint8_t> req, std::span<std::uint8_t> resp) {
    std::memcpy(resp.data(), req.data(), std::min(req.size(), resp.size()));
}

// Serve until stop flag; runs in a thread with its own channel view.
struct ServerThread {
    PoolHandle pool;
    RpcChannel ch;
    std::thread th;
    ServerThread(const std::string& path, RpcServer::Handler handler, RpcServerOptions opts = {})
        : pool(PoolHandle::attach(path)), ch(RpcChannel::attach(pool)) {
        th = std::thread([this, handler = std::move(handler), opts] {
            RpcServer server(ch, opts);
            server.serve(handler);
        });
    }
    ~ServerThread() {
        ch.request_stop();
        th.join();
    }
};

std::vector<std::uint8_t> random_payload(std::mt19937_64& rng, std::size_t n) {
    std::vector<std::uint8_t> v(n);
    for (auto& b : v) b = static_cast<std::uint8_t>(rng());
    return v;
}

} // namespace

TEST_CASE("channel geometry: create, zero-slot error, attach view") {
    Fixture fx;
    CHECK_THROWS_AS(RpcChannel::create(fx.pool, 0, 64), ConfigError);

    auto ch = RpcChannel::create(fx.pool, 128, 64);
    CHECK(ch.slot_count() == 128);
    CHECK(ch.payload_bytes() == 64);

    // request/response payloads start on 64-byte boundaries
    for (std::uint32_t i : {0u, 1u, 127u}) {
        CHECK(ch.status_addr(i) % 64 == 0);
        CHECK(ch.seq_addr(i) % 64 == 0);
        CHECK(ch.request_addr(i) % 64 == 0);
        CHECK(ch.response_addr(i) % 64 == 0);
    }
}

TEST_CASE("channel that does not fit the reserved range is rejected") {
    Fixture fx(4 * kKiB);
    CHECK_THROWS_AS(RpcChannel::create(fx.pool, 1024, 64), ConfigError);
}

TEST_CASE("attach before create fails; second process sees 128 EMPTY slots") {
    Fixture fx;
    CHECK_THROWS_AS(RpcChannel::attach(fx.pool), Error);
    auto ch = RpcChannel::create(fx.pool, 128, 64);
    CHECK(ch.slot_count() == 128);

    int rc = testutil::wait_exit(testutil::spawn([&] {
        auto pool = PoolHandle::attach(fx.file.path);
        auto view = RpcChannel::attach(pool);
        if (view.slot_count() != 128 || view.payload_bytes() != 64) return 1;
        CoherentSession s(pool);
        for (std::uint32_t i = 0; i < view.slot_count(); ++i)
            if (s.load_flag_fresh(view.status_addr(i)) != kSlotEmpty) return 2;
        return 0;
    }));
    CHECK(rc == 0);
}

TEST_CASE("echo calls return their payload byte-exact") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 16, 64);
    ServerThread server(fx.file.path, echo_handler);

    RpcClient client(ch);
    std::mt19937_64 rng(42);
    for (int i = 0; i < 200; ++i) {
        auto req = random_payload(rng, 64);
        auto resp = client.call(req);
        CHECK(resp == req);
    }
    CHECK(client.stats().calls == 200);
    CHECK(client.stats().timeouts == 0);
}

TEST_CASE("poll_once handles exactly the pending requests") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 8, 64);
    RpcServer server(ch);
    CHECK(server.poll_once(echo_handler) == 0); // no pending -> nothing touched

    RpcClient client(ch);
    std::vector<std::uint8_t> req(64, 0x11);
    auto p = client.try_submit(req);
    REQUIRE(p.has_value());
    CHECK(server.poll_once(echo_handler) == 1);

    std::vector<std::uint8_t> resp;
    CHECK(client.try_collect(*p, resp));
    CHECK(resp == req);
}

TEST_CASE("a full sweep of 128 pending requests batches into one fence") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 128, 64);
    RpcClient client(ch);

    std::vector<RpcClient::Pending> pending;
    for (int i = 0; i < 128; ++i) {
        std::vector<std::uint8_t> req(64, static_cast<std::uint8_t>(i));
        auto p = client.try_submit(req);
        REQUIRE(p.has_value());
        pending.push_back(*p);
    }
    CHECK(!client.try_submit(std::vector<std::uint8_t>(64, 0)).has_value()); // channel full

    RpcServer server(ch);
    const auto fences_before = server.session().stats().fences;
    CHECK(server.poll_once(echo_handler) == 128);
    CHECK(server.session().stats().fences - fences_before == 1);

    for (std::size_t i = 0; i < pending.size(); ++i) {
        std::vector<std::uint8_t> resp;
        CHECK(client.try_collect(pending[i], resp));
        CHECK(resp == std::vector<std::uint8_t>(64, static_cast<std::uint8_t>(i)));
    }
    CHECK(ch.served_total() == 128);
}

TEST_CASE("call on a channel nobody serves times out and reclaims the slot") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 4, 64);
    RpcClientOptions opts;
    opts.timeout = std::chrono::microseconds(50'000);
    RpcClient client(ch, opts);
    std::vector<std::uint8_t> req(64, 0xAA);

    for (int i = 0; i < 6; ++i) { // more attempts than slots: reclamation must work
        CHECK_THROWS_AS((void)client.call(req), RpcError);
    }
    CHECK(client.stats().timeouts == 6);

    // all slots must be claimable again
    CoherentSession probe(fx.pool);
    for (std::uint32_t i = 0; i < ch.slot_count(); ++i) {
        CHECK(probe.load_flag_fresh(ch.status_addr(i)) == kSlotEmpty);
        CHECK(probe.load_flag_fresh(ch.seq_addr(i)) % 2 == 0);
    }

    // and a late-started server makes calls succeed on the same channel
    ServerThread server(fx.file.path, echo_handler);
    RpcClient client2(ch);
    CHECK(client2.call(req) == req);
}

TEST_CASE("a full channel yields a channel-full error after bounded retry") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 4, 64);
    RpcClient filler(ch);
    std::vector<std::uint8_t> req(64, 0x01);
    for (int i = 0; i < 4; ++i) REQUIRE(filler.try_submit(req).has_value());

    RpcClientOptions opts;
    opts.timeout = std::chrono::microseconds(40'000);
    RpcClient client(ch, opts);
    try {
        (void)client.call(req);
        FAIL("expected RpcError");
    } catch (const RpcError& e) {
        CHECK(e.kind == RpcError::Kind::ChannelFull);
    }
}

TEST_CASE("handler exceptions isolate to the slot with an error response") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 4, 64);
    ServerThread server(fx.file.path,
                        [](std::span<const std::uint8_t> req, std::span<std::uint8_t> resp) {
                            if (req[0] == 0xFF) throw std::runtime_error("boom");
                            echo_handler(req, resp);
                        });
    RpcClient client(ch);
    std::vector<std::uint8_t> bad(64, 0xFF);
    CHECK_THROWS_AS((void)client.call(bad), RpcError);
    // the slot is EMPTY again and the channel still works
    std::vector<std::uint8_t> good(64, 0x01);
    CHECK(client.call(good) == good);
}

TEST_CASE("sharded pollers own disjoint slot ranges") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 32, 64);

    PoolHandle pool_b = PoolHandle::attach(fx.file.path);
    RpcChannel ch_b = RpcChannel::attach(pool_b);
    std::thread t1([&] {
        RpcServerOptions o;
        o.first_slot = 0;
        o.slot_limit = 16;
        RpcServer s(ch_b, o);
        s.serve(echo_handler);
    });
    PoolHandle pool_c = PoolHandle::attach(fx.file.path);
    RpcChannel ch_c = RpcChannel::attach(pool_c);
    std::thread t2([&] {
        RpcServerOptions o;
        o.first_slot = 16;
        o.slot_limit = 16;
        RpcServer s(ch_c, o);
        s.serve(echo_handler);
    });

    RpcClient client(ch);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 300; ++i) {
        auto req = random_payload(rng, 64);
        CHECK(client.call(req) == req);
    }
    ch.request_stop();
    t1.join();
    t2.join();
}

TEST_CASE("two client processes, nonce-tagged calls match exactly") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 64, 64);
    ServerThread server(fx.file.path,
                        [](std::span<const std::uint8_t> req, std::span<std::uint8_t> resp) {
                            // transform so a lucky echo can't fake a match
                            for (std::size_t i = 0; i < req.size(); ++i)
                                resp[i] = req[i] ^ 0x5C;
                        });

    auto codes = testutil::run_processes(2, [&](std::size_t idx) {
        auto pool = PoolHandle::attach(fx.file.path);
        auto view = RpcChannel::attach(pool);
        RpcClient client(view);
        std::mt19937_64 rng(1000 + idx);
        for (int i = 0; i < 2000; ++i) {
            std::vector<std::uint8_t> req(64);
            for (auto& b : req) b = static_cast<std::uint8_t>(rng());
            std::vector<std::uint8_t> want(64);
            for (std::size_t k = 0; k < 64; ++k) want[k] = req[k] ^ 0x5C;
            auto got = client.call(req);
            if (got != want) return 1;
        }
        return 0;
    });
    for (int rc : codes) CHECK(rc == 0);
    CHECK(ch.served_total() == 4000);
}

TEST_CASE("channels support a configurable payload size end to end") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 8, 200); // padded to 256 per direction
    CHECK(ch.payload_bytes() == 200);
    CHECK(ch.response_addr(0) - ch.request_addr(0) == 256);
    ServerThread server(fx.file.path, echo_handler);

    RpcClient client(ch);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
        auto req = random_payload(rng, 200);
        CHECK(client.call(req) == req);
    }

    // short requests are zero-padded to the fixed payload size
    std::vector<std::uint8_t> short_req(10, 0xBB);
    auto resp = client.call(short_req);
    REQUIRE(resp.size() == 200);
    CHECK(std::equal(short_req.begin(), short_req.end(), resp.begin()));
    for (std::size_t i = 10; i < resp.size(); ++i) CHECK(resp[i] == 0);

    // oversized requests are rejected before touching the channel
    std::vector<std::uint8_t> too_big(201, 1);
    CHECK_THROWS_AS((void)client.call(too_big), Error);
}

TEST_CASE("client stats decompose claim time from round-trip latency") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 4, 64);
    ServerThread server(fx.file.path, echo_handler);
    RpcClient client(ch);
    std::vector<std::uint8_t> req(64, 0x42);
    for (int i = 0; i < 100; ++i) (void)client.call(req);
    CHECK(client.stats().latency.count() == 100);
    CHECK(client.stats().claim_latency.count() == 100);
}

TEST_CASE("a server that skips read_fresh never sees requests") {
    Fixture fx;
    auto ch = RpcChannel::create(fx.pool, 8, 64);

    RpcServerOptions sopts;
    sopts.break_read_fresh = true;
    PoolHandle pool_b = PoolHandle::attach(fx.file.path);
    RpcChannel ch_b = RpcChannel::attach(pool_b);
    std::thread broken([&] {
        RpcServer s(ch_b, sopts);
        s.serve(echo_handler);
    });

    RpcClientOptions copts;
    copts.timeout = std::chrono::microseconds(100'000);
    RpcClient client(ch, copts);
    std::vector<std::uint8_t> req(64, 0x77);
    CHECK_THROWS_AS((void)client.call(req), RpcError);

    ch.request_stop();
    broken.join();
}
