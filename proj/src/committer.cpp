#include "qrstore/committer.hpp"

#include <deque>
#include <map>

namespace qrstore {

namespace {

std::optional<TxnStatus> status_of(const TxnId& id, const TcShard& shard, const StatusLookup& foreign) {
  if (shard.owns(id)) return shard.at(id).status;
  return foreign ? foreign(id) : std::nullopt;
}

}  // namespace

bool commit_txn(TransactionContext& t, const TcShard& shard, const StatusLookup& foreign,
                const TerminalHook& on_terminal) {
  if (t.status != TxnStatus::Pending) return true;
  if (!t.executed()) return false;
  for (const TxnId& w : t.commit_after) {
    auto s = status_of(w, shard, foreign);
    if (!s || *s == TxnStatus::Pending) return false;
  }
  bool abort = t.aborted;
  for (const TxnId& w : t.read_from) {
    auto s = status_of(w, shard, foreign);
    if (!s || *s == TxnStatus::Pending) return false;
    if (*s == TxnStatus::Aborted) abort = true;
  }
  t.status = abort ? TxnStatus::Aborted : TxnStatus::Committed;
  if (on_terminal) on_terminal(t);
  return true;
}

CommitReport commit_batch(TcShard& shard, const StatusLookup& foreign, const TerminalHook& on_terminal,
                          const std::function<bool()>& wait_for_change) {
  CommitReport report;
  auto tally = [&](const TransactionContext& t) {
    if (t.status == TxnStatus::Committed) ++report.committed;
    if (t.status == TxnStatus::Aborted) ++report.aborted;
  };

  std::deque<TransactionContext*> pending;
  for (TransactionContext& t : shard.txns) {
    if (commit_txn(t, shard, foreign, on_terminal)) {
      tally(t);
    } else {
      pending.push_back(&t);
      ++report.deferred;
    }
  }
  while (!pending.empty()) {
    TransactionContext& head = *pending.front();
    if (commit_txn(head, shard, foreign, on_terminal)) {
      tally(head);
      pending.pop_front();
      continue;
    }
    if (!wait_for_change || !wait_for_change()) {
      throw WatchdogTimeout("commit of " + to_string(head.txn_id) + " stalled (" +
                            std::to_string(head.completed_fragments) + "/" + std::to_string(head.total_fragments) +
                            " fragments)");
    }
  }
  return report;
}

std::set<TxnId> cascade_closure(const std::vector<TransactionContext>& batch) {
  std::map<TxnId, std::vector<TxnId>> readers;  // writer -> transactions that read its writes
  std::deque<TxnId> frontier;
  std::set<TxnId> aborted;
  for (const auto& t : batch) {
    for (const TxnId& w : t.read_from) readers[w].push_back(t.txn_id);
    if (t.aborted && aborted.insert(t.txn_id).second) frontier.push_back(t.txn_id);
  }
  while (!frontier.empty()) {
    const TxnId w = frontier.front();
    frontier.pop_front();
    auto it = readers.find(w);
    if (it == readers.end()) continue;
    for (const TxnId& r : it->second) {
      if (aborted.insert(r).second) frontier.push_back(r);
    }
  }
  return aborted;
}

std::size_t restore_aborted_writes(const SlotState& state, PartitionStore& store,
                                   const std::function<bool(const TxnId&)>& aborted) {
  std::size_t restored = 0;
  for (const auto& [id, history] : state.keys) {
    bool touched = false;
    for (auto it = history.writes.rbegin(); it != history.writes.rend() && aborted(it->txn); ++it) {
      store.write(Key{id}, it->before);
      touched = true;
    }
    if (touched) ++restored;
  }
  return restored;
}

}  // namespace qrstore
