#include "qrstore/context.hpp"

#include <algorithm>

namespace qrstore {

namespace {

void merge_sorted(std::vector<TxnId>& into, const std::vector<TxnId>& more) {
  if (more.empty()) return;
  into.insert(into.end(), more.begin(), more.end());
  std::sort(into.begin(), into.end());
  into.erase(std::unique(into.begin(), into.end()), into.end());
}

}  // namespace

void apply_ack(TransactionContext& tc, const AckEntry& entry) {
  if (tc.completed_fragments + entry.completed > tc.total_fragments) {
    throw Error("fragment over-completion for " + to_string(tc.txn_id));
  }
  tc.completed_fragments += entry.completed;
  tc.aborted = tc.aborted || entry.aborted;
  merge_sorted(tc.read_from, entry.read_from);
  merge_sorted(tc.commit_after, entry.commit_after);
}

TransactionContext& TcShard::at(const TxnId& id) {
  if (!owns(id)) throw Error("transaction " + to_string(id) + " not in shard");
  return txns[id.sequence];
}

const TransactionContext& TcShard::at(const TxnId& id) const {
  if (!owns(id)) throw Error("transaction " + to_string(id) + " not in shard");
  return txns[id.sequence];
}

bool TcShard::all_executed() const noexcept {
  return std::all_of(txns.begin(), txns.end(), [](const auto& t) { return t.executed(); });
}

}  // namespace qrstore
