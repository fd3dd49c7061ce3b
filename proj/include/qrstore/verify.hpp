#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "qrstore/cluster.hpp"
#include "qrstore/core.hpp"
#include "qrstore/executor.hpp"
#include "qrstore/store.hpp"

namespace qrstore {

/// Reference result of executing transactions one at a time in txn_id order.
struct SerialOutcome {
  std::vector<PartitionStore> stores;  // one per partition
  std::set<TxnId> aborted;
};

/// Per batch: run every transaction speculatively to find logic aborts and
/// read-from edges, close the abort set over those edges, then apply only
/// the committed transactions to the state left by earlier batches.
SerialOutcome serial_execute(std::vector<Transaction> txns, std::uint32_t partitions,
                             std::uint64_t records_per_partition, std::uint32_t record_size);

struct CheckResult {
  bool ok = true;
  std::string detail;  // first violation

  void fail(std::string what) {
    if (ok) detail = std::move(what);
    ok = false;
  }
};

/// Engine stores of `row` and its decisions against the serial outcome.
CheckResult check_against_serial(const Cluster& cluster, std::uint32_t row, const SerialOutcome& expected);

/// Conflicting operations ran in priority (then planning) order, and every
/// (txn, op, role) ran exactly once per row.
CheckResult check_execution_order(const std::vector<TraceEntry>& trace, const std::vector<Transaction>& planned,
                                  std::uint32_t rows);

/// For conflicting committed transactions, commit order equals planning order.
CheckResult check_commit_order(const std::vector<TraceEntry>& trace, const std::vector<Transaction>& planned,
                               const std::map<TxnId, Decision>& decisions, std::uint32_t row);

/// Count of leader-row operations that ran before the replication layer
/// confirmed their batch: evidence of speculative execution.
std::size_t executed_before_replication(const std::vector<TraceEntry>& trace,
                                        const std::map<std::pair<std::uint64_t, Priority>, std::uint64_t>& ticks);

}  // namespace qrstore
