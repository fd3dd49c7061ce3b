#pragma once

#include <cstdint>
#include <vector>

#include "qrstore/core.hpp"

namespace qrstore {

/// Per-transaction progress and dependency bookkeeping kept by the planning
/// (coordinator) thread.
struct TransactionContext {
  TxnId txn_id;
  std::uint64_t client_id = 0;
  std::int64_t arrival_ns = 0;
  std::uint32_t total_fragments = 0;
  std::uint32_t completed_fragments = 0;
  bool aborted = false;  // a fragment's abort predicate fired
  // Writers whose uncommitted values this transaction read.
  std::vector<TxnId> read_from;
  // Immediately preceding accessor of every key this transaction touched.
  std::vector<TxnId> commit_after;
  TxnStatus status = TxnStatus::Pending;
  std::uint64_t commit_seq = 0;

  bool executed() const noexcept { return completed_fragments == total_fragments; }
};

/// Execution outcome of one fragment, reported to the coordinator.
struct AckEntry {
  TxnId txn;
  std::uint32_t completed = 1;
  bool aborted = false;
  std::vector<TxnId> read_from;
  std::vector<TxnId> commit_after;

  friend bool operator==(const AckEntry&, const AckEntry&) = default;
};

struct EqAck {
  std::uint64_t batch_id = 0;
  Priority priority;
  std::uint32_t partition = 0;
  std::uint32_t subrange = 0;
  std::vector<AckEntry> entries;

  friend bool operator==(const EqAck&, const EqAck&) = default;
};

/// Merges one fragment's outcome into the context. Throws Error if the
/// fragment count would exceed total_fragments.
void apply_ack(TransactionContext& tc, const AckEntry& entry);

/// The transaction contexts created by one planner for one batch, in planning
/// order; `txns[i].txn_id.sequence == i`.
struct TcShard {
  std::uint64_t batch_id = 0;
  Priority priority;
  std::vector<TransactionContext> txns;

  TransactionContext& at(const TxnId& id);
  const TransactionContext& at(const TxnId& id) const;
  bool owns(const TxnId& id) const noexcept {
    return id.batch == batch_id && id.priority == priority && id.sequence < txns.size();
  }
  bool all_executed() const noexcept;
};

}  // namespace qrstore
