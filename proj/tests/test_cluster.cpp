#include <doctest.h>

#include <filesystem>

#include "qrstore/verify.hpp"
#include "support/helpers.hpp"
#include "support/invariants.hpp"

using namespace qrstore;
using namespace qrtest;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  std::map<TxnId, TxnStatus> statuses;
  std::vector<Bytes> leader_state;
};

Outcome outcome_of(const Cluster& c) {
  Outcome o;
  for (const auto& [id, d] : c.decisions(0)) o.statuses[id] = d.status;
  for (std::uint32_t col = 0; col < c.config().partitions; ++col) {
    o.leader_state.push_back(c.node(NodeId{0, col}).store().raw());
  }
  return o;
}

Outcome run_outcome(const ClusterConfig& cc, std::uint64_t batches, std::uint64_t seed = 7) {
  Cluster c(cc);
  Feed feed(contended(cc, seed), cc.planners);
  feed.run(c, batches);
  CHECK(diff_against_reference(c, 0, reference_for(c)) == "");
  CHECK(c.replicas_converged());
  return outcome_of(c);
}

void check_all_rows(const Cluster& c) {
  const ReferenceOutcome ref = reference_for(c);
  for (std::uint32_t r = 0; r < c.config().rows(); ++r) CHECK(diff_against_reference(c, r, ref) == "");
  CHECK(c.replicas_converged());
}

}  // namespace

TEST_SUITE("cluster") {
  TEST_CASE("single partition smoke run") {
    ClusterConfig cc = small_cluster(1);
    Cluster c(cc);
    Feed feed(contended(cc), cc.planners);
    RunMetrics m = feed.run(c, 3);
    CHECK(m.planned == 3 * cc.batch_size * cc.planners);
    CHECK(m.committed + m.aborted == m.planned);
    CHECK(m.committed > 0);
    CHECK(m.client_latency_ms.size() == m.planned);
    CHECK(m.timings.size() == 3 * cc.planners);
    check_all_rows(c);
  }

  TEST_CASE("the reference comparison notices a corrupted byte") {
    ClusterConfig cc = small_cluster(2);
    Cluster c(cc);
    Feed feed(contended(cc), cc.planners);
    feed.run(c, 2);
    ReferenceOutcome ref = reference_for(c);
    CHECK(diff_against_reference(c, 0, ref) == "");
    ref.partitions[1][5] ^= 1;
    CHECK(diff_against_reference(c, 0, ref) != "");
  }

  TEST_CASE("multi-partition runs match the reference and route correctly") {
    for (std::uint32_t rf : {0u, 1u, 2u}) {
      CAPTURE(rf);
      ClusterConfig cc = small_cluster(3, rf);
      cc.capture_messages = true;
      Cluster c(cc);
      Feed feed(contended(cc, 11 + rf), cc.planners);
      feed.run(c, 4);
      check_all_rows(c);
      const auto cap = c.transport().captured();
      CHECK(routing_ok(cap));
      const auto inv = check_execution_order(c.trace(), c.planned_transactions(), cc.rows());
      CHECK_MESSAGE(inv.ok, inv.detail);
      for (std::uint32_t r = 0; r < cc.rows(); ++r) {
        const auto co = check_commit_order(c.trace(), c.planned_transactions(), c.decisions(r), r);
        CHECK_MESSAGE(co.ok, co.detail);
      }
      const bool any_repl = std::any_of(cap.begin(), cap.end(), [](const CapturedMessage& m) {
        return m.kind == MessageKind::ReplData || m.kind == MessageKind::ReplAck;
      });
      CHECK(any_repl == (rf > 0));
    }
  }

  TEST_CASE("routing check rejects cross-group replication and cross-row EQs") {
    std::vector<CapturedMessage> ok{{MessageKind::ReplData, {0, 1}, {1, 1}, 0}, {MessageKind::RemoteEq, {1, 0}, {1, 2}, 0}};
    CHECK(routing_ok(ok));
    CHECK_FALSE(routing_ok({{MessageKind::ReplData, {0, 1}, {1, 2}, 0}}));
    CHECK_FALSE(routing_ok({{MessageKind::RemoteEq, {0, 0}, {1, 1}, 0}}));
    CHECK_FALSE(routing_ok({{MessageKind::EqAck, {1, 0}, {0, 0}, 0}}));
  }

  TEST_CASE("node and thread synchronization reach the same result") {
    ClusterConfig cc = small_cluster(2, 1);
    const Outcome node = run_outcome(cc, 4);
    cc.sync = SyncGranularity::Thread;
    const Outcome thread = run_outcome(cc, 4);
    CHECK(node.statuses == thread.statuses);
    CHECK(node.leader_state == thread.leader_state);
  }

  TEST_CASE("speculative and synchronous replication agree; only one speculates") {
    ClusterConfig cc = small_cluster(2, 1);
    cc.repl_latency = 3000us;
    Cluster spec(cc);
    Feed f1(contended(cc), cc.planners);
    f1.run(spec, 3);
    check_all_rows(spec);

    cc.repl_mode = ReplicationMode::Synchronous;
    Cluster sync(cc);
    Feed f2(contended(cc), cc.planners);
    f2.run(sync, 3);
    check_all_rows(sync);

    CHECK(outcome_of(spec).statuses == outcome_of(sync).statuses);
    CHECK(outcome_of(spec).leader_state == outcome_of(sync).leader_state);
    for (std::uint32_t r = 0; r < cc.rows(); ++r) {
      CHECK(check_commit_order(sync.trace(), sync.planned_transactions(), sync.decisions(r), r).ok);
    }
    CHECK(executed_before_replication(spec.trace(), spec.replication_ticks()) > 0);
    CHECK(executed_before_replication(sync.trace(), sync.replication_ticks()) == 0);
  }

  TEST_CASE("node sync keeps batches apart; thread sync lets them overlap") {
    ClusterConfig cc = small_cluster(2);
    cc.op_cost = 20us;
    cc.planners = 2;
    auto overlaps = [&](SyncGranularity g) {
      cc.sync = g;
      Cluster c(cc);
      Feed feed(contended(cc), cc.planners);
      RunMetrics m = feed.run(c, 5);
      std::map<std::uint64_t, std::int64_t> last_exec, first_plan;
      for (const auto& t : m.timings) {
        last_exec[t.batch_id] = std::max(last_exec[t.batch_id], t.exec_done_ns);
        auto it = first_plan.find(t.batch_id);
        if (it == first_plan.end() || t.plan_start_ns < it->second) first_plan[t.batch_id] = t.plan_start_ns;
      }
      int n = 0;
      for (std::uint64_t b = 1; b < 5; ++b) n += first_plan[b] < last_exec[b - 1];
      return n;
    };
    CHECK(overlaps(SyncGranularity::Node) == 0);
    CHECK(overlaps(SyncGranularity::Thread) > 0);
  }

  TEST_CASE("latency model") {
    BatchTimings t;
    t.t_pl_ms = 1;
    t.t_deliv_ms = 2;
    t.t_ex_ms = 4;
    t.t_repl_ms = 3;
    t.t_c_ms = 2;
    t.measured_ms = 18;
    CHECK(predicted_latency_ms(t) == doctest::Approx(9));
    LatencyReport r = latency_decompose(t);
    CHECK(r.ratio == doctest::Approx(2));
    t.t_repl_ms = 10;
    CHECK(predicted_latency_ms(t) == doctest::Approx(13));
    t.synchronous = true;
    CHECK(predicted_latency_ms(t) == doctest::Approx(19));
    BatchTimings z;
    z.t_pl_ms = 1;
    z.t_deliv_ms = 1;
    z.t_ex_ms = 1;
    z.t_c_ms = 1;
    CHECK(predicted_latency_ms(z) == doctest::Approx(4));
    CHECK(latency_decompose(BatchTimings{}).ratio == 0);
  }

  TEST_CASE("lost execution acks stall the batch and surface as an error") {
    ClusterConfig cc = small_cluster(2);
    cc.watchdog = 300ms;
    Cluster c(cc);
    LinkFaults f;
    f.drop = [](const Message& m) { return m.kind == MessageKind::EqAck; };
    c.transport().set_faults(f);
    WorkloadConfig wc = contended(cc);
    wc.mpt_fraction = 1.0;
    Feed feed(wc, cc.planners);
    CHECK_THROWS_AS(feed.run(c, 2), Error);
    CHECK_THROWS_AS(feed.run(c, 1), Error);  // stays failed
  }

  TEST_CASE("config validation") {
    ClusterConfig cc = small_cluster();
    CHECK_NOTHROW(cc.validate());
    cc.partitions = 0;
    CHECK_THROWS_AS(Cluster{cc}, ValidationError);
    cc = small_cluster();
    cc.subranges = 5;
    CHECK_THROWS_AS(cc.validate(), ValidationError);
    cc = small_cluster();
    cc.batch_size = 0;
    CHECK_THROWS_AS(cc.validate(), ValidationError);
    cc = small_cluster();
    Cluster c(cc);
    CHECK_THROWS_AS(c.fail_over(0), ValidationError);  // rf = 0
  }

  TEST_CASE("invalid client transactions are rejected, not planned") {
    ClusterConfig cc = small_cluster(1);
    Cluster c(cc);
    std::uint64_t n = 0;
    auto src = [&](std::uint32_t, std::uint32_t) {
      Transaction t;
      if (n++ % 10 == 0) {
        t.ops = {Operation::read(Key{1'000'000})};
      } else {
        t.ops = {Operation::read(Key{n % 32})};
      }
      return t;
    };
    RunMetrics m = c.run(src, {2, true});
    CHECK(m.rejected > 0);
    CHECK(m.committed + m.aborted == m.planned);
    CHECK(m.planned + m.rejected == 2 * cc.batch_size * cc.planners);
  }

  TEST_CASE("a follower crash mid-run recovers to the same state") {
    ClusterConfig cc = small_cluster(2, 2);
    cc.checkpoint_interval = 2;
    Cluster c(cc);
    c.script_crash({NodeId{1, 0}, 2});
    Feed feed(contended(cc), cc.planners);
    feed.run(c, 5);
    check_all_rows(c);
  }

  TEST_CASE("leader fail-over continues the same history") {
    ClusterConfig cc = small_cluster(2, 2);
    cc.checkpoint_interval = 2;
    cc.heartbeats = true;
    cc.heartbeat_period = 10ms;
    cc.heartbeat_misses = 3;

    Cluster ref(cc);
    Feed rf(contended(cc), cc.planners);
    rf.run(ref, 6);

    Cluster c(cc);
    Feed feed(contended(cc), cc.planners);
    feed.run(c, 4);
    const std::uint32_t elected = c.fail_over(0);
    CHECK((elected == 1 || elected == 2));
    feed.run(c, 2);

    check_all_rows(c);
    CHECK(stores_equal(c, ref));
    CHECK(outcome_of(c).statuses == outcome_of(ref).statuses);
  }

  TEST_CASE("durability files appear on disk") {
    const fs::path dir = fs::temp_directory_path() / ("qrstore_cluster_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    ClusterConfig cc = small_cluster(2, 1);
    cc.durability_dir = dir;
    cc.checkpoint_interval = 2;
    {
      Cluster c(cc);
      Feed feed(contended(cc), cc.planners);
      feed.run(c, 3);
      for (std::uint32_t r = 0; r < 2; ++r) {
        for (std::uint32_t col = 0; col < 2; ++col) {
          const std::string tag = std::to_string(r) + "_" + std::to_string(col);
          CHECK(fs::exists(dir / ("checkpoint_" + tag + ".bin")));
          auto recs = Log::read_file(dir / ("log_" + tag + ".bin"));
          CHECK(recs.size() == 3);
          CHECK(recs == c.node(NodeId{r, col}).log().records_after(std::nullopt));
        }
      }
    }
    fs::remove_all(dir);
  }

  TEST_CASE("transport, backend and compression do not change the outcome") {
    ClusterConfig cc = small_cluster(2, 1);
    const Outcome base = run_outcome(cc, 3);
    SUBCASE("tcp") { cc.transport = TransportKind::Tcp; }
    SUBCASE("middleware") { cc.backend = ReplicationBackend::Middleware; cc.broker_latency = 200us; }
    SUBCASE("compression") { cc.compression = true; }
    SUBCASE("latency") { cc.intra_latency = 300us; cc.repl_latency = 1000us; }
    const Outcome other = run_outcome(cc, 3);
    CHECK(base.statuses == other.statuses);
    CHECK(base.leader_state == other.leader_state);
  }

  TEST_CASE("compression shrinks replicated payloads") {
    ClusterConfig cc = small_cluster(2, 1);
    cc.compression = true;
    Cluster c(cc);
    WorkloadConfig wc = contended(cc);
    Feed feed(wc, cc.planners);
    RunMetrics m = feed.run(c, 2);
    CHECK(m.payloads == 2 * 2 * cc.planners);
    CHECK(m.payload_wire_bytes < m.payload_raw_bytes);
  }

  TEST_CASE("client-paced feeding keeps latencies bounded") {
    ClusterConfig cc = small_cluster(2, 1);
    Cluster c(cc);
    Feed feed(contended(cc), cc.planners);
    RunMetrics m = feed.run(c, 4, false);
    CHECK(m.committed + m.aborted == m.planned);
    CHECK(m.planned > 0);
    for (double l : m.client_latency_ms) CHECK(l >= 0);
    check_all_rows(c);
  }

  TEST_CASE("trace and commit-order checkers catch reorderings") {
    ClusterConfig cc = small_cluster(2, 1);
    Cluster c(cc);
    Feed feed(contended(cc), cc.planners);
    feed.run(c, 2);
    const auto planned = c.planned_transactions();
    auto trace = c.trace();
    const std::uint32_t S = cc.effective_subranges();
    CHECK(execution_order_violation(trace, planned, cc.rows(), cc.partitions, S) == "");
    CHECK(commit_order_violation(planned, c.decisions(0)) == "");

    // Swap the ticks of the first two row-0 accesses to one key by different txns.
    auto swapped = trace;
    bool done = false;
    for (std::size_t i = 0; i < swapped.size() && !done; ++i) {
      for (std::size_t j = i + 1; j < swapped.size() && !done; ++j) {
        if (swapped[i].row == 0 && swapped[j].row == 0 && swapped[i].key == swapped[j].key &&
            swapped[i].txn != swapped[j].txn) {
          std::swap(swapped[i].tick, swapped[j].tick);
          done = true;
        }
      }
    }
    REQUIRE(done);
    CHECK(execution_order_violation(swapped, planned, cc.rows(), cc.partitions, S) != "");

    auto doubled = trace;
    doubled.push_back(trace.back());
    doubled.back().tick = trace.back().tick + 1'000'000;
    CHECK(execution_order_violation(doubled, planned, cc.rows(), cc.partitions, S) != "");

    auto missing = trace;
    missing.pop_back();
    CHECK(execution_order_violation(missing, planned, cc.rows(), cc.partitions, S) != "");

    // Two committed writers of one key with their commit ticks exchanged.
    auto dec = c.decisions(0);
    std::map<std::uint64_t, std::vector<TxnId>> writers;
    for (const auto& t : planned) {
      if (dec.at(t.id).status != TxnStatus::Committed) continue;
      for (const auto& op : t.ops) {
        if (op.writes()) writers[op.key.id].push_back(t.id);
      }
    }
    auto it = std::find_if(writers.begin(), writers.end(), [](const auto& kv) { return kv.second.size() >= 2; });
    REQUIRE(it != writers.end());
    std::swap(dec[it->second[0]].commit_tick, dec[it->second[1]].commit_tick);
    CHECK(commit_order_violation(planned, dec) != "");
  }
}
