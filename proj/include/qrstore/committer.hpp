#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <vector>

#include "qrstore/context.hpp"
#include "qrstore/core.hpp"
#include "qrstore/executor.hpp"
#include "qrstore/store.hpp"

namespace qrstore {

/// Terminal status of a transaction planned elsewhere, or nullopt while it is
/// still undecided (or unknown here).
using StatusLookup = std::function<std::optional<TxnStatus>(const TxnId&)>;

/// Called once per transaction when it reaches a terminal status.
using TerminalHook = std::function<void(TransactionContext&)>;

/// Returns false while `t` has unexecuted fragments or an undecided
/// predecessor. Otherwise decides COMMITTED or ABORTED (own abort flag or an
/// aborted read-from writer), fires `on_terminal`, and returns true.
bool commit_txn(TransactionContext& t, const TcShard& shard, const StatusLookup& foreign,
                const TerminalHook& on_terminal);

struct CommitReport {
  std::size_t committed = 0;
  std::size_t aborted = 0;
  std::size_t deferred = 0;  // pushed to the pending queue at least once
};

/// One planner's commitment pass over its batch in planning order, with a
/// FIFO of pending transactions drained from the head. `wait_for_change` is
/// invoked while the head is blocked; it returns false when its deadline
/// passes, which raises WatchdogTimeout.
CommitReport commit_batch(TcShard& shard, const StatusLookup& foreign, const TerminalHook& on_terminal,
                          const std::function<bool()>& wait_for_change);

/// Transactions aborted by their own logic plus everything that transitively
/// read from them.
std::set<TxnId> cascade_closure(const std::vector<TransactionContext>& batch);

/// Rolls back keys whose most recent writers aborted by restoring
/// before-images in reverse execution order over that trailing run of aborted
/// writers. `aborted` must know every writer of the batch. Returns the number
/// of keys restored.
std::size_t restore_aborted_writes(const SlotState& state, PartitionStore& store,
                                   const std::function<bool(const TxnId&)>& aborted);

}  // namespace qrstore
