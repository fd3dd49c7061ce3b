#include <doctest.h>

#include <atomic>
#include <thread>

#include "qrstore/serialization.hpp"
#include "qrstore/transport.hpp"

using namespace qrstore;
using namespace std::chrono_literals;

namespace {

Message msg(MessageKind k, NodeId from, NodeId to, std::uint64_t batch, Bytes body = {}) {
  Message m;
  m.kind = k;
  m.sender = from;
  m.destination = to;
  m.batch_id = batch;
  m.body = std::move(body);
  return m;
}

// Collects deliveries per destination.
struct Sink {
  std::mutex mu;
  std::condition_variable cv;
  std::vector<std::pair<Message, std::chrono::steady_clock::time_point>> got;

  Transport::Handler handler() {
    return [this](Message m) {
      std::lock_guard lk(mu);
      got.emplace_back(std::move(m), std::chrono::steady_clock::now());
      cv.notify_all();
    };
  }
  bool wait_for(std::size_t n, std::chrono::milliseconds limit = 5s) {
    std::unique_lock lk(mu);
    return cv.wait_for(lk, limit, [&] { return got.size() >= n; });
  }
};

}  // namespace

TEST_SUITE("transport") {
  TEST_CASE("frame round trip") {
    Message m = msg(MessageKind::RemoteEq, {1, 2}, {3, 4}, 77, Bytes{1, 2, 3});
    Bytes f = encode_frame(m);
    CHECK(f.size() == 4 + kFrameHeader + 3);
    CHECK(decode_frame(f) == m);
    Message e = msg(MessageKind::Heartbeat, {0, 0}, {1, 0}, 0);
    CHECK(decode_frame(encode_frame(e)) == e);
  }

  TEST_CASE("malformed frames are rejected") {
    Bytes f = encode_frame(msg(MessageKind::EqAck, {0, 0}, {0, 1}, 1, Bytes(10, 9)));
    CHECK_THROWS_AS(decode_frame(std::span<const std::uint8_t>(f).first(f.size() - 1)), DecodeError);
    Bytes bad_kind = f;
    bad_kind[4] = 200;
    CHECK_THROWS_AS(decode_frame(bad_kind), DecodeError);
    Bytes bad_len = f;
    bad_len[0] ^= 1;
    CHECK_THROWS_AS(decode_frame(bad_len), DecodeError);
    CHECK_THROWS_AS(decode_frame(Bytes{}), DecodeError);
  }

  TEST_CASE("group traffic classification") {
    CHECK(is_group_traffic(MessageKind::ReplData));
    CHECK(is_group_traffic(MessageKind::ReplAck));
    CHECK_FALSE(is_group_traffic(MessageKind::RemoteEq));
    CHECK_FALSE(is_group_traffic(MessageKind::TxnStatus));
  }

  TEST_CASE("loopback: per-link FIFO, latency, counts and capture") {
    LoopbackTransport t;
    Sink a, b;
    t.attach({0, 0}, a.handler());
    t.attach({0, 1}, b.handler());
    LinkFaults f;
    f.intra_latency = 2000us;
    f.group_latency = 20000us;
    t.set_faults(f);
    t.enable_capture(true);
    t.start();
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t i = 0; i < 50; ++i) t.send(msg(MessageKind::DepValue, {0, 0}, {0, 1}, i));
    REQUIRE(b.wait_for(50));
    for (std::uint64_t i = 0; i < 50; ++i) CHECK(b.got[i].first.batch_id == i);
    CHECK(b.got[0].second - t0 >= 2ms);

    const auto t1 = std::chrono::steady_clock::now();
    t.send(msg(MessageKind::ReplData, {0, 1}, {0, 0}, 9));
    REQUIRE(a.wait_for(1));
    CHECK(a.got[0].second - t1 >= 20ms);
    t.stop();

    auto counts = t.counts();
    CHECK(counts[static_cast<std::size_t>(MessageKind::DepValue)] == 50);
    CHECK(counts[static_cast<std::size_t>(MessageKind::ReplData)] == 1);
    auto cap = t.captured();
    REQUIRE(cap.size() == 51);
    CHECK(cap.back().kind == MessageKind::ReplData);
    CHECK(cap.back().destination == NodeId{0, 0});
    t.reset_stats();
    CHECK(t.captured().empty());
  }

  TEST_CASE("a down node neither sends nor receives") {
    LoopbackTransport t;
    Sink a, b;
    t.attach({0, 0}, a.handler());
    t.attach({1, 0}, b.handler());
    t.start();
    t.set_down({1, 0}, true);
    CHECK(t.is_down({1, 0}));
    t.send(msg(MessageKind::ReplData, {0, 0}, {1, 0}, 1));
    t.send(msg(MessageKind::ReplAck, {1, 0}, {0, 0}, 1));
    t.set_down({1, 0}, false);
    t.send(msg(MessageKind::ReplData, {0, 0}, {1, 0}, 2));
    REQUIRE(b.wait_for(1));
    std::this_thread::sleep_for(20ms);
    CHECK(b.got.size() == 1);
    CHECK(b.got[0].first.batch_id == 2);
    CHECK(a.got.empty());
    t.stop();
  }

  TEST_CASE("drop and mutate hooks") {
    LoopbackTransport t;
    Sink a;
    t.attach({0, 0}, a.handler());
    t.attach({0, 1}, [](Message) {});
    LinkFaults f;
    f.drop = [](const Message& m) { return m.batch_id % 2 == 1; };
    f.mutate = [](Message& m) { m.body.push_back(42); };
    t.set_faults(f);
    t.start();
    for (std::uint64_t i = 0; i < 6; ++i) t.send(msg(MessageKind::EqAck, {0, 1}, {0, 0}, i));
    REQUIRE(a.wait_for(3));
    std::this_thread::sleep_for(20ms);
    REQUIRE(a.got.size() == 3);
    for (auto& [m, at] : a.got) {
      CHECK(m.batch_id % 2 == 0);
      CHECK(m.body == Bytes{42});
    }
    t.stop();
  }

  TEST_CASE("tcp transport carries frames in order") {
    TcpTransport t;
    Sink a, b;
    t.attach({0, 0}, a.handler());
    t.attach({1, 0}, b.handler());
    t.start();
    CHECK(t.port_of({0, 0}) != 0);
    CHECK(t.port_of({0, 0}) != t.port_of({1, 0}));
    for (std::uint64_t i = 0; i < 200; ++i) t.send(msg(MessageKind::ReplData, {0, 0}, {1, 0}, i, Bytes(i * 50, 7)));
    t.send(msg(MessageKind::ReplAck, {1, 0}, {0, 0}, 5));
    REQUIRE(b.wait_for(200));
    REQUIRE(a.wait_for(1));
    for (std::uint64_t i = 0; i < 200; ++i) {
      CHECK(b.got[i].first.batch_id == i);
      CHECK(b.got[i].first.body.size() == i * 50);
    }
    CHECK(a.got[0].first.sender == NodeId{1, 0});
    t.stop();
  }
}
