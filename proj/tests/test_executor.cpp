#include <doctest.h>

#include <thread>

#include "qrstore/executor.hpp"
#include "qrstore/planner.hpp"
#include "support/helpers.hpp"

using namespace qrstore;
using namespace std::chrono_literals;
using qrtest::tid;
using qrtest::txn;

namespace {

// One node's executor surroundings with captured outbound traffic.
struct Bench {
  Partitioner part;
  PartitionStore store;
  std::vector<SlotState> slots;
  DependencyBoard deps;
  TickClock clock;
  ExecutionTrace trace{clock};
  std::vector<std::pair<DependencyValue, std::uint32_t>> sent;
  std::vector<EqAck> acks;
  std::mutex mu;
  ExecutionEnv env;

  Bench(std::uint32_t partition, std::uint32_t P, std::uint32_t S, std::uint32_t record_size = 4)
      : part(P, S), store(partition, P, 16, record_size), slots(S) {
    env.store = &store;
    env.partitioner = &part;
    env.slots = &slots;
    env.deps = &deps;
    env.trace = &trace;
    env.watchdog = 2000ms;
    env.send_dependency = [this](DependencyValue v, std::uint32_t p) {
      std::lock_guard lk(mu);
      sent.emplace_back(std::move(v), p);
    };
    env.finish = [this](const ExecutionQueue&, EqAck a) {
      std::lock_guard lk(mu);
      acks.push_back(std::move(a));
    };
  }
};

ExecutionQueue eq_of(const PlanBatch& b, std::uint32_t partition, std::uint32_t subrange = 0) {
  return b.eqs().at(SlotRef{partition, subrange});
}

}  // namespace

TEST_SUITE("executor") {
  TEST_CASE("UPDATE keeps the before-image and writes through") {
    Bench bn(0, 1, 1);
    bn.store.write(Key{0}, Bytes{'A', 'A', 'A', 'A'});
    PlanBatch b(0, Priority{0, 0});
    b.merge(plan_message(txn(tid(0, 0, 0, 0), {Operation::update(Key{0}, Bytes{'B', 'B', 'B', 'B'})}), bn.part));
    const ExecutionQueue q = eq_of(b, 0);
    AckEntry a = execute_fragment(q, q.fragments[0], bn.env);
    const KeyHistory& h = bn.slots[0].keys.at(0);
    REQUIRE(h.writes.size() == 1);
    CHECK(h.writes[0].before == Bytes{'A', 'A', 'A', 'A'});
    CHECK(bn.store.read(Key{0})[0] == 'B');
    CHECK(h.last_writer == tid(0, 0, 0, 0));
    CHECK(a.read_from.empty());
  }

  TEST_CASE("a read after a write records read-from and commit-after edges") {
    Bench bn(0, 1, 1);
    PlanBatch b(0, Priority{0, 0});
    b.merge(plan_message(txn(tid(0, 0, 0, 0), {Operation::update(Key{0}, Bytes(4, 1))}), bn.part));
    b.merge(plan_message(txn(tid(0, 0, 0, 1), {Operation::read(Key{0})}), bn.part));
    b.merge(plan_message(txn(tid(0, 0, 0, 2), {Operation::update(Key{0}, Bytes(4, 2))}), bn.part));
    const ExecutionQueue q = eq_of(b, 0);
    execute_fragment(q, q.fragments[0], bn.env);
    AckEntry r = execute_fragment(q, q.fragments[1], bn.env);
    CHECK(r.read_from == std::vector<TxnId>{tid(0, 0, 0, 0)});
    CHECK(r.commit_after == std::vector<TxnId>{tid(0, 0, 0, 0)});
    AckEntry w = execute_fragment(q, q.fragments[2], bn.env);
    CHECK(w.read_from.empty());  // blind write
    CHECK(w.commit_after == std::vector<TxnId>{tid(0, 0, 0, 1)});
    CHECK(bn.slots[0].keys.at(0).writes.size() == 2);
  }

  TEST_CASE("COND_ABORT fires when the first byte is below the threshold") {
    Bench bn(0, 1, 1);
    bn.store.write(Key{0}, Bytes{0, 9, 9, 9});
    bn.store.write(Key{1}, Bytes{1, 9, 9, 9});
    PlanBatch b(0, Priority{0, 0});
    b.merge(plan_message(txn(tid(0, 0, 0, 0), {Operation::cond_abort(Key{0}, 1)}), bn.part));
    b.merge(plan_message(txn(tid(0, 0, 0, 1), {Operation::cond_abort(Key{1}, 1)}), bn.part));
    const ExecutionQueue q = eq_of(b, 0);
    CHECK(execute_fragment(q, q.fragments[0], bn.env).aborted);
    CHECK_FALSE(execute_fragment(q, q.fragments[1], bn.env).aborted);
  }

  TEST_CASE("dependency source ships the value to the consumer's node") {
    // txn 1: k0 += k9 with P=2; node 1 owns k9.
    Bench bn(1, 2, 1);
    bn.store.write(Key{9}, Bytes{'X', 'X', 'X', 'X'});
    PlanBatch b(0, Priority{0, 0});
    b.merge(plan_message(txn(tid(0, 0, 0, 0), {Operation::read(Key{1})}), bn.part));
    b.merge(plan_message(txn(tid(0, 0, 0, 1), {Operation::rmw(Key{0}, Key{9})}), bn.part));
    const ExecutionQueue q = eq_of(b, 1);
    const Fragment& f = q.fragments.back();
    REQUIRE(f.produced_deps.size() == 1);
    execute_fragment(q, f, bn.env);
    REQUIRE(bn.sent.size() == 1);
    CHECK(bn.sent[0].first == DependencyValue{tid(0, 0, 0, 1), 0, Bytes{'X', 'X', 'X', 'X'}});
    CHECK(bn.sent[0].second == 0);

    bn.sent.clear();
    execute_fragment(q, q.fragments[0], bn.env);
    CHECK(bn.sent.empty());
  }

  TEST_CASE("a local consumer gets the value without a message") {
    // Same node, different sub-ranges: P=1, S=2, k0 in s0, k1 in s1.
    Bench bn(0, 1, 2);
    bn.store.write(Key{1}, Bytes{3, 3, 3, 3});
    bn.store.write(Key{0}, Bytes{1, 1, 1, 1});
    PlanBatch b(0, Priority{0, 0});
    b.merge(plan_message(txn(tid(0, 0, 0, 0), {Operation::rmw(Key{0}, Key{1})}), bn.part));
    const ExecutionQueue src = eq_of(b, 0, 1);
    const ExecutionQueue dst = eq_of(b, 0, 0);
    execute_fragment(src, src.fragments[0], bn.env);
    CHECK(bn.sent.empty());
    CHECK(bn.deps.pending() == 1);
    execute_fragment(dst, dst.fragments[0], bn.env);
    CHECK(bn.store.read(Key{0})[0] == 4);
  }

  TEST_CASE("RMW waits for its dependency inside the EQ") {
    Bench bn(0, 2, 1);
    PlanBatch b(0, Priority{0, 0});
    b.merge(plan_message(txn(tid(0, 0, 0, 0), {Operation::rmw(Key{0}, Key{1})}), bn.part));
    const ExecutionQueue q = eq_of(b, 0);
    const Bytes before(bn.store.read(Key{0}).begin(), bn.store.read(Key{0}).end());
    std::thread late([&] {
      std::this_thread::sleep_for(20ms);
      bn.deps.put(DependencyValue{tid(0, 0, 0, 0), 0, Bytes{1, 1, 1, 1}});
    });
    execute_fragment(q, q.fragments[0], bn.env);
    late.join();
    CHECK(bn.store.read(Key{0})[0] == static_cast<std::uint8_t>(before[0] + 1));

    PlanBatch b2(1, Priority{0, 0});
    b2.merge(plan_message(txn(tid(1, 0, 0, 0), {Operation::rmw(Key{0}, Key{1})}), bn.part));
    const ExecutionQueue q2 = eq_of(b2, 0);
    bn.env.watchdog = 30ms;
    CHECK_THROWS_AS(execute_fragment(q2, q2.fragments[0], bn.env), WatchdogTimeout);
  }

  TEST_CASE("finish_eq: one ack per EQ listing every fragment") {
    Bench bn(1, 2, 1);
    PlanBatch b(0, Priority{0, 0});
    b.merge(plan_message(txn(tid(0, 0, 0, 0), {Operation::read(Key{1})}), bn.part));
    b.merge(plan_message(txn(tid(0, 0, 0, 1), {Operation::cond_abort(Key{3}, 1)}), bn.part));
    bn.store.write(Key{3}, Bytes{0, 0, 0, 0});
    const ExecutionQueue q = eq_of(b, 1);
    CHECK(q.locality == Locality::Remote);
    std::vector<AckEntry> entries;
    for (const auto& f : q.fragments) entries.push_back(execute_fragment(q, f, bn.env));
    finish_eq(q, entries, bn.env);
    REQUIRE(bn.acks.size() == 1);
    REQUIRE(bn.acks[0].entries.size() == 2);
    CHECK(bn.acks[0].entries[0].txn == tid(0, 0, 0, 0));
    CHECK_FALSE(bn.acks[0].entries[0].aborted);
    CHECK(bn.acks[0].entries[1].aborted);
  }

  TEST_CASE("ack merge counts fragments") {
    TransactionContext tc;
    tc.txn_id = tid(0, 0, 0, 0);
    tc.total_fragments = 2;
    apply_ack(tc, AckEntry{tc.txn_id, 1, false, {}, {}});
    CHECK(tc.completed_fragments == 1);
    CHECK_FALSE(tc.executed());
    apply_ack(tc, AckEntry{tc.txn_id, 1, true, {tid(0, 0, 0, 9)}, {}});
    CHECK(tc.executed());
    CHECK(tc.aborted);
    CHECK(tc.read_from == std::vector<TxnId>{tid(0, 0, 0, 9)});
    CHECK_THROWS_AS(apply_ack(tc, AckEntry{tc.txn_id, 1, false, {}, {}}), Error);
  }
}

TEST_SUITE("batch-metadata") {
  TEST_CASE("get_top skips completed higher-priority slots") {
    BatchMetadata bm(0, 0, {{0, 0}, {0, 1}}, 1);
    ExecutionQueue a{0, {0, 0}, 0, 0, {Fragment{tid(0, 0, 0, 0), {}, 0, {}}}, Locality::Local, false};
    ExecutionQueue b{0, {0, 1}, 0, 0, {Fragment{tid(0, 0, 1, 0), {}, 0, {}}}, Locality::Local, false};
    bm.publish({0, 1}, {b});
    CHECK_FALSE(bm.get_top());  // (0,0) has not published yet
    bm.publish({0, 0}, {a});
    auto first = bm.get_top();
    REQUIRE(first);
    CHECK(first->eq->priority == Priority{0, 0});
    CHECK_FALSE(bm.get_top());  // sub-range busy
    bm.complete(*first);
    CHECK(bm.slot_completed({0, 0}, 0));
    auto second = bm.get_top();
    REQUIRE(second);
    CHECK(second->eq->priority == Priority{0, 1});
    bm.complete(*second);
    CHECK(bm.done());
  }

  TEST_CASE("highest priority wins across sub-ranges") {
    BatchMetadata bm(0, 0, {{0, 0}, {0, 1}}, 2);
    ExecutionQueue hi{0, {0, 0}, 0, 1, {Fragment{tid(0, 0, 0, 0), {}, 0, {}}}, Locality::Local, false};
    ExecutionQueue lo{0, {0, 1}, 0, 0, {Fragment{tid(0, 0, 1, 0), {}, 0, {}}}, Locality::Local, false};
    bm.publish({0, 1}, {lo});
    bm.publish({0, 0}, {hi});
    auto c = bm.get_top();
    REQUIRE(c);
    CHECK(c->eq->priority == Priority{0, 0});
    CHECK(c->subrange == 1);
  }

  TEST_CASE("empty batch is done once everyone published") {
    BatchMetadata bm(0, 0, {{0, 0}, {1, 0}}, 2);
    CHECK_FALSE(bm.done());
    bm.publish({0, 0}, {});
    CHECK_FALSE(bm.done());
    CHECK(bm.publish({1, 0}, {}));
    CHECK_FALSE(bm.publish({1, 0}, {}));  // re-delivery is a no-op
    CHECK(bm.done());
    CHECK_FALSE(bm.wait_top(std::chrono::steady_clock::now() + 1s));
  }

  TEST_CASE("publishing into the wrong slot is refused") {
    BatchMetadata bm(3, 1, {{0, 0}}, 1);
    ExecutionQueue wrong{3, {0, 0}, 0, 0, {}, Locality::Remote, false};
    CHECK_THROWS_AS(bm.publish({0, 0}, {wrong}), ValidationError);
    CHECK_THROWS_AS(bm.publish({5, 0}, {}), ValidationError);
    CHECK_THROWS_AS(BatchMetadata(0, 0, {{0, 0}, {0, 0}}, 1), ValidationError);
  }

  TEST_CASE("one eligible EQ, many threads: exactly one claim") {
    for (int round = 0; round < 50; ++round) {
      BatchMetadata bm(0, 0, {{0, 0}}, 1);
      bm.publish({0, 0}, {ExecutionQueue{0, {0, 0}, 0, 0, {Fragment{tid(0, 0, 0, 0), {}, 0, {}}}, Locality::Local, false}});
      std::atomic<int> got{0};
      std::vector<std::thread> ts;
      for (int i = 0; i < 4; ++i) ts.emplace_back([&] { if (bm.get_top()) ++got; });
      for (auto& t : ts) t.join();
      CHECK(got == 1);
    }
  }

  TEST_CASE("execute_batch runs conflicting EQs in priority order") {
    Bench bn(0, 1, 1);
    PlanBatch p0(0, Priority{0, 0}), p1(0, Priority{0, 1});
    for (std::uint64_t s = 0; s < 10; ++s) {
      p0.merge(plan_message(txn(tid(0, 0, 0, s), {Operation::update(Key{s % 3}, Bytes(4, 1)), Operation::read(Key{5})}), bn.part));
      p1.merge(plan_message(txn(tid(0, 0, 1, s), {Operation::update(Key{s % 3}, Bytes(4, 2)), Operation::read(Key{5})}), bn.part));
    }
    BatchMetadata bm(0, 0, {{0, 0}, {0, 1}}, 1);
    // lower priority publishes first; it still has to wait
    std::thread pub([&] {
      bm.publish({0, 1}, {eq_of(p1, 0)});
      std::this_thread::sleep_for(10ms);
      bm.publish({0, 0}, {eq_of(p0, 0)});
    });
    std::thread w1([&] { execute_batch(bm, bn.env, 0); });
    std::thread w2([&] { execute_batch(bm, bn.env, 1); });
    pub.join();
    w1.join();
    w2.join();
    const auto trace = bn.trace.merged();
    CHECK(trace.size() == 40);
    std::size_t last_hi = 0, first_lo = trace.size();
    for (std::size_t i = 0; i < trace.size(); ++i) {
      if (trace[i].priority == Priority{0, 0}) last_hi = i;
      if (trace[i].priority == Priority{0, 1}) first_lo = std::min(first_lo, i);
    }
    CHECK(last_hi < first_lo);
    CHECK(bn.acks.size() == 2);
    CHECK(bn.store.read(Key{0})[0] == 2);
  }

  TEST_CASE("execute_batch on an empty batch returns at once") {
    Bench bn(0, 1, 1);
    BatchMetadata bm(0, 0, {{0, 0}}, 1);
    bm.publish({0, 0}, {});
    CHECK(execute_batch(bm, bn.env, 0) == 0);
  }
}
