#include "qrstore/planner.hpp"

#include <algorithm>

namespace qrstore {

void ClientTransactionQueue::push(Transaction txn) {
  {
    std::lock_guard lk(mu_);
    q_.push_back(std::move(txn));
  }
  cv_.notify_all();
}

std::optional<Transaction> ClientTransactionQueue::pop_until(std::chrono::steady_clock::time_point deadline) {
  std::unique_lock lk(mu_);
  cv_.wait_until(lk, deadline, [&] { return !q_.empty() || closed_; });
  if (q_.empty()) return std::nullopt;
  Transaction t = std::move(q_.front());
  q_.pop_front();
  lk.unlock();
  cv_.notify_all();
  return t;
}

std::optional<Transaction> ClientTransactionQueue::try_pop() {
  std::unique_lock lk(mu_);
  if (q_.empty()) return std::nullopt;
  Transaction t = std::move(q_.front());
  q_.pop_front();
  lk.unlock();
  cv_.notify_all();
  return t;
}

void ClientTransactionQueue::close() {
  {
    std::lock_guard lk(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

void ClientTransactionQueue::reopen() {
  std::lock_guard lk(mu_);
  closed_ = false;
}

bool ClientTransactionQueue::closed_and_empty() const {
  std::lock_guard lk(mu_);
  return closed_ && q_.empty();
}

std::size_t ClientTransactionQueue::size() const {
  std::lock_guard lk(mu_);
  return q_.size();
}

bool ClientTransactionQueue::wait_below(std::size_t limit, std::chrono::steady_clock::time_point deadline) {
  std::unique_lock lk(mu_);
  cv_.wait_until(lk, deadline, [&] { return q_.size() < limit || closed_; });
  return !closed_;
}

PlannedTxn plan_message(const Transaction& txn, const Partitioner& partitioner, const KeyLimits& limits) {
  if (txn.ops.empty()) throw ValidationError("empty transaction " + to_string(txn.id));

  auto check_key = [&](Key k) {
    if (limits.records_per_partition != 0 && partitioner.local_index(k) >= limits.records_per_partition) {
      throw ValidationError("key " + std::to_string(k.id) + " outside the loaded key space");
    }
  };
  auto slot_of = [&](Key k) { return SlotRef{partitioner.partition_of(k), partitioner.subrange_of(k)}; };

  std::map<SlotRef, Fragment> frags;
  auto fragment_at = [&](SlotRef s) -> Fragment& {
    auto [it, fresh] = frags.try_emplace(s);
    if (fresh) it->second.txn = txn.id;
    return it->second;
  };

  for (std::uint32_t i = 0; i < txn.ops.size(); ++i) {
    const Operation& op = txn.ops[i];
    op.validate();
    check_key(op.key);
    if (op.kind == OpKind::Update && limits.record_size != 0 && op.write_value->size() != limits.record_size) {
      throw ValidationError("write value length differs from record size");
    }
    const SlotRef target = slot_of(op.key);
    fragment_at(target).ops.push_back(FragmentOp{i, OpRole::Primary, op});
    if (op.kind == OpKind::Rmw) {
      check_key(*op.dep_source);
      const SlotRef source = slot_of(*op.dep_source);
      if (source != target) {
        Fragment& src = fragment_at(source);
        src.ops.push_back(FragmentOp{i, OpRole::DepSource, op});
        src.produced_deps.push_back(DepTarget{txn.id, i});
        frags.at(target).unresolved_deps += 1;
      }
    }
  }

  PlannedTxn out;
  out.context.txn_id = txn.id;
  out.context.client_id = txn.client_id;
  out.context.arrival_ns = txn.arrival_ns;
  out.context.total_fragments = static_cast<std::uint32_t>(frags.size());
  out.fragments.reserve(frags.size());
  for (auto& [slot, f] : frags) out.fragments.emplace_back(slot, std::move(f));
  return out;
}

PlanBatch::PlanBatch(std::uint64_t batch_id, Priority owner) : batch_id_(batch_id), owner_(owner) {
  shard_.batch_id = batch_id;
  shard_.priority = owner;
}

void PlanBatch::merge(PlannedTxn planned) {
  const TxnId& id = planned.context.txn_id;
  if (id.batch != batch_id_ || id.priority != owner_) {
    throw ValidationError("transaction " + to_string(id) + " does not belong to this batch");
  }
  if (!seen_.insert(id).second) throw ValidationError("duplicate transaction " + to_string(id));
  if (id.sequence != shard_.txns.size()) {
    seen_.erase(id);
    throw ValidationError("out-of-order sequence for " + to_string(id));
  }
  for (auto& [slot, frag] : planned.fragments) {
    auto [it, fresh] = eqs_.try_emplace(slot);
    ExecutionQueue& q = it->second;
    if (fresh) {
      q.batch_id = batch_id_;
      q.priority = owner_;
      q.partition = slot.partition;
      q.subrange = slot.subrange;
      q.locality = slot.partition == owner_.node_rank ? Locality::Local : Locality::Remote;
    }
    q.fragments.push_back(std::move(frag));
  }
  shard_.txns.push_back(std::move(planned.context));
}

PlanBatch PlanBatch::from_parts(std::uint64_t batch_id, Priority owner, std::vector<ExecutionQueue> eqs,
                                std::vector<TransactionContext> contexts) {
  PlanBatch b(batch_id, owner);
  for (auto& q : eqs) {
    if (q.batch_id != batch_id || q.priority != owner) throw ValidationError("EQ does not belong to batch");
    const SlotRef slot{q.partition, q.subrange};
    if (!b.eqs_.emplace(slot, std::move(q)).second) throw ValidationError("duplicate EQ slot");
  }
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    if (contexts[i].txn_id.sequence != i) throw ValidationError("contexts out of planning order");
    b.seen_.insert(contexts[i].txn_id);
  }
  b.shard_.txns = std::move(contexts);
  return b;
}

bool batch_ready(const PlanBatch& batch, const ReadyPolicy& policy, std::chrono::steady_clock::duration elapsed,
                 bool input_closed_and_empty) {
  if (batch.planned() >= policy.batch_size) return true;
  if (input_closed_and_empty) return true;
  return batch.planned() > 0 && elapsed >= policy.timeout;
}

std::vector<std::vector<ExecutionQueue>> eqs_by_partition(const PlanBatch& batch, std::uint32_t partitions) {
  std::vector<std::vector<ExecutionQueue>> out(partitions);
  for (const auto& [slot, q] : batch.eqs()) {
    if (slot.partition >= partitions) throw ValidationError("EQ partition out of range");
    out[slot.partition].push_back(q);
  }
  return out;
}

void deliver_batch(const PlanBatch& batch, std::uint32_t local_partition, std::uint32_t partitions, DeliveryPort& port,
                   bool replicate) {
  auto groups = eqs_by_partition(batch, partitions);
  port.set_local_eqs(batch, std::move(groups[local_partition]));
  for (std::uint32_t p = 0; p < partitions; ++p) {
    if (p == local_partition) continue;
    port.send_remote_eqs(p, batch, std::move(groups[p]));
  }
  if (replicate) port.replicate_data(batch);
}

}  // namespace qrstore
