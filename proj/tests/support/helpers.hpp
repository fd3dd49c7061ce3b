#pragma once

#include <cstdint>
#include <vector>

#include "qrstore/cluster.hpp"
#include "qrstore/workload.hpp"
#include "support/oracle.hpp"

namespace qrtest {

using namespace qrstore;

inline Bytes filled(std::uint32_t size, std::uint8_t v) { return Bytes(size, v); }

inline Transaction txn(TxnId id, std::vector<Operation> ops) {
  Transaction t;
  t.id = id;
  t.ops = std::move(ops);
  return t;
}

inline TxnId tid(std::uint64_t batch, std::uint32_t node, std::uint32_t thread, std::uint64_t seq) {
  return TxnId{batch, Priority{node, thread}, seq};
}

/// One persistent generator per leader planner, so consecutive segments
/// continue the same streams.
struct Feed {
  std::vector<WorkloadGenerator> gens;
  std::uint32_t planners;

  Feed(const WorkloadConfig& wc, std::uint32_t pl) : planners(pl) {
    for (std::uint32_t i = 0; i < wc.partitions * pl; ++i) gens.emplace_back(wc, i);
  }
  TxnSource source() {
    return [this](std::uint32_t col, std::uint32_t t) { return gens[col * planners + t].next(); };
  }
  RunMetrics run(Cluster& c, std::uint64_t batches, bool prefill = true) {
    return c.run(source(), SegmentOptions{batches, prefill});
  }
};

inline WorkloadConfig workload_for(const ClusterConfig& cc) {
  WorkloadConfig wc;
  wc.partitions = cc.partitions;
  wc.records_per_partition = cc.records_per_partition;
  wc.record_size = cc.record_size;
  return wc;
}

/// Small contended instance used by many cluster tests.
inline ClusterConfig small_cluster(std::uint32_t P = 2, std::uint32_t rf = 0) {
  ClusterConfig cc;
  cc.partitions = P;
  cc.rf = rf;
  cc.planners = 2;
  cc.executors = 2;
  cc.records_per_partition = 32;
  cc.record_size = 16;
  cc.batch_size = 40;
  cc.record_outcomes = true;
  cc.trace = true;
  cc.watchdog = std::chrono::milliseconds(10'000);
  return cc;
}

inline WorkloadConfig contended(const ClusterConfig& cc, std::uint64_t seed = 7) {
  WorkloadConfig wc = workload_for(cc);
  wc.ops_per_txn = 4;
  wc.mpt_fraction = cc.partitions > 1 ? 0.5 : 0.0;
  wc.partitions_per_mpt = std::min<std::uint32_t>(2, cc.partitions);
  wc.write_fraction = 0.4;
  wc.rmw_fraction = 0.2;
  wc.abort_fraction = 0.1;
  wc.zipf_theta = 0.6;
  wc.seed = seed;
  return wc;
}

inline bool stores_equal(const Cluster& a, const Cluster& b, std::uint32_t row_a = 0, std::uint32_t row_b = 0) {
  for (std::uint32_t c = 0; c < a.config().partitions; ++c) {
    if (!(a.node(NodeId{row_a, c}).store() == b.node(NodeId{row_b, c}).store())) return false;
  }
  return true;
}

/// Stores and abort decisions of `row` against the independent reference.
/// Returns an empty string on a match, else the first difference.
inline std::string diff_against_reference(const Cluster& c, std::uint32_t row, const ReferenceOutcome& ref) {
  const ClusterConfig& cc = c.config();
  for (std::uint32_t col = 0; col < cc.partitions; ++col) {
    if (c.node(NodeId{row, col}).store().raw() != ref.partitions[col]) {
      return "row " + std::to_string(row) + " partition " + std::to_string(col) + " state differs";
    }
  }
  const auto dec = c.decisions(row);
  for (const auto& [id, d] : dec) {
    const bool want_abort = ref.aborted.contains(id);
    if (d.status == TxnStatus::Pending) return "undecided " + to_string(id);
    if ((d.status == TxnStatus::Aborted) != want_abort) return "decision differs for " + to_string(id);
  }
  return {};
}

inline ReferenceOutcome reference_for(const Cluster& c) {
  const ClusterConfig& cc = c.config();
  return reference_run(c.planned_transactions(), cc.partitions, cc.records_per_partition, cc.record_size);
}

}  // namespace qrtest
