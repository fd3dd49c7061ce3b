#include "qrstore/executor.hpp"

#include <algorithm>

namespace qrstore {

ExecutionTrace::Writer ExecutionTrace::writer() {
  std::lock_guard lk(mu_);
  logs_.push_back(std::make_unique<std::vector<TraceEntry>>());
  return Writer(clock_, logs_.back().get());
}

std::vector<TraceEntry> ExecutionTrace::merged() const {
  std::vector<TraceEntry> all;
  std::lock_guard lk(mu_);
  for (const auto& log : logs_) all.insert(all.end(), log->begin(), log->end());
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.tick < b.tick; });
  return all;
}

// ---------------------------------------------------------------------------

void DependencyBoard::put(DependencyValue v) {
  {
    std::lock_guard lk(mu_);
    values_.insert_or_assign({v.txn, v.op_index}, std::move(v.value));
  }
  cv_.notify_all();
}

Bytes DependencyBoard::wait(const TxnId& txn, std::uint32_t op_index, std::chrono::steady_clock::time_point deadline,
                            const std::atomic<bool>* stop) {
  std::unique_lock lk(mu_);
  const auto key = std::make_pair(txn, op_index);
  for (;;) {
    if (auto it = values_.find(key); it != values_.end()) {
      Bytes v = std::move(it->second);
      values_.erase(it);
      return v;
    }
    if (stop && stop->load()) throw Cancelled("dependency wait cancelled");
    if (cv_.wait_until(lk, deadline) == std::cv_status::timeout && !values_.contains(key)) {
      throw WatchdogTimeout("dependency value for " + to_string(txn) + " op " + std::to_string(op_index) +
                            " never arrived");
    }
  }
}

void DependencyBoard::wake() {
  std::lock_guard lk(mu_);
  cv_.notify_all();
}

std::size_t DependencyBoard::pending() const {
  std::lock_guard lk(mu_);
  return values_.size();
}

// ---------------------------------------------------------------------------

BatchMetadata::BatchMetadata(std::uint64_t batch_id, std::uint32_t partition, std::vector<Priority> priorities,
                             std::uint32_t subranges)
    : batch_id_(batch_id),
      partition_(partition),
      priorities_(std::move(priorities)),
      subranges_(subranges),
      slots_(priorities_.size() * subranges, Slot::Unknown),
      eqs_(priorities_.size() * subranges),
      published_(priorities_.size(), false),
      cursor_(subranges, 0),
      busy_(subranges, false) {
  if (subranges == 0) throw ValidationError("sub-range count must be >= 1");
  std::sort(priorities_.begin(), priorities_.end());
  if (std::adjacent_find(priorities_.begin(), priorities_.end()) != priorities_.end()) {
    throw ValidationError("duplicate planner priority");
  }
}

std::size_t BatchMetadata::index_of(const Priority& p) const {
  auto it = std::lower_bound(priorities_.begin(), priorities_.end(), p);
  if (it == priorities_.end() || *it != p) throw ValidationError("unknown planner priority " + to_string(p));
  return static_cast<std::size_t>(it - priorities_.begin());
}

bool BatchMetadata::publish(const Priority& from, std::vector<ExecutionQueue> eqs) {
  const std::size_t pi = index_of(from);
  {
    std::lock_guard lk(mu_);
    if (published_[pi]) return false;
    for (auto& q : eqs) {
      if (q.batch_id != batch_id_ || q.partition != partition_ || q.priority != from || q.subrange >= subranges_) {
        throw ValidationError("EQ published into the wrong batch slot");
      }
      if (eqs_[pi * subranges_ + q.subrange]) throw ValidationError("two EQs for one slot");
      const std::uint32_t s = q.subrange;
      const bool empty = q.fragments.empty();
      eqs_[pi * subranges_ + s] = std::move(q);
      slot(pi, s) = empty ? Slot::Empty : Slot::Ready;
    }
    for (std::uint32_t s = 0; s < subranges_; ++s) {
      if (slot(pi, s) == Slot::Unknown) slot(pi, s) = Slot::Empty;
    }
    published_[pi] = true;
    ++published_count_;
  }
  cv_.notify_all();
  return true;
}

void BatchMetadata::advance_locked(std::uint32_t s) {
  while (cursor_[s] < priorities_.size()) {
    const Slot st = slot(cursor_[s], s);
    if (st == Slot::Empty || st == Slot::Completed) {
      ++cursor_[s];
    } else {
      break;
    }
  }
}

std::optional<SlotClaim> BatchMetadata::top_locked() {
  std::optional<SlotClaim> best;
  for (std::uint32_t s = 0; s < subranges_; ++s) {
    if (busy_[s]) continue;
    advance_locked(s);
    const std::size_t pi = cursor_[s];
    if (pi >= priorities_.size() || slot(pi, s) != Slot::Ready) continue;
    if (!best || pi < best->priority_index) best = SlotClaim{pi, s, nullptr};
  }
  if (!best) return std::nullopt;
  slot(best->priority_index, best->subrange) = Slot::Claimed;
  busy_[best->subrange] = true;
  ++claims_;
  best->eq = &*eqs_[best->priority_index * subranges_ + best->subrange];
  return best;
}

std::optional<SlotClaim> BatchMetadata::get_top() {
  std::lock_guard lk(mu_);
  return top_locked();
}

bool BatchMetadata::done_locked() {
  if (published_count_ != priorities_.size() || claims_ != 0) return false;
  for (std::uint32_t s = 0; s < subranges_; ++s) {
    advance_locked(s);
    if (cursor_[s] != priorities_.size()) return false;
  }
  return true;
}

std::optional<SlotClaim> BatchMetadata::wait_top(std::chrono::steady_clock::time_point deadline,
                                                 const std::atomic<bool>* stop) {
  std::unique_lock lk(mu_);
  for (;;) {
    if (stop && stop->load()) return std::nullopt;
    if (auto c = top_locked()) return c;
    if (done_locked()) return std::nullopt;
    if (cv_.wait_until(lk, deadline) == std::cv_status::timeout) {
      if (auto c = top_locked()) return c;
      if (done_locked()) return std::nullopt;
      throw WatchdogTimeout("batch " + std::to_string(batch_id_) + " partition " + std::to_string(partition_) +
                            ": no eligible EQ (published " + std::to_string(published_count_) + "/" +
                            std::to_string(priorities_.size()) + ")");
    }
  }
}

void BatchMetadata::complete(const SlotClaim& claim) {
  {
    std::lock_guard lk(mu_);
    Slot& st = slot(claim.priority_index, claim.subrange);
    if (st != Slot::Claimed) throw Error("completing an unclaimed slot");
    st = Slot::Completed;
    busy_[claim.subrange] = false;
    --claims_;
  }
  cv_.notify_all();
}

bool BatchMetadata::done() {
  std::lock_guard lk(mu_);
  return done_locked();
}

bool BatchMetadata::all_published() const {
  std::lock_guard lk(mu_);
  return published_count_ == priorities_.size();
}

bool BatchMetadata::slot_completed(const Priority& p, std::uint32_t subrange) const {
  const std::size_t pi = index_of(p);
  std::lock_guard lk(mu_);
  return slot(pi, subrange) == Slot::Completed;
}

void BatchMetadata::wake() {
  std::lock_guard lk(mu_);
  cv_.notify_all();
}

// ---------------------------------------------------------------------------

namespace {

void sort_unique(std::vector<TxnId>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace

AckEntry execute_fragment(const ExecutionQueue& q, const Fragment& f, ExecutionEnv& env,
                          ExecutionTrace::Writer* trace) {
  SlotState& state = (*env.slots)[q.subrange];
  PartitionStore& store = *env.store;
  const TxnId& txn = f.txn;

  AckEntry result;
  result.txn = txn;

  auto touch = [&](Key k, bool reads) -> KeyHistory& {
    KeyHistory& h = state.keys[k.id];
    if (h.last_accessor && *h.last_accessor != txn) result.commit_after.push_back(*h.last_accessor);
    h.last_accessor = txn;
    if (reads && h.last_writer && *h.last_writer != txn) result.read_from.push_back(*h.last_writer);
    return h;
  };
  auto will_write = [&](Key k, KeyHistory& h) {
    if (h.writes.empty() || h.writes.back().txn != txn) {
      auto cur = store.read(k);
      h.writes.push_back(WriteRecord{txn, Bytes(cur.begin(), cur.end())});
    }
    h.last_writer = txn;
  };
  auto in_this_slot = [&](Key k) {
    return env.partitioner->partition_of(k) == q.partition && env.partitioner->subrange_of(k) == q.subrange;
  };

  for (const FragmentOp& fo : f.ops) {
    if (env.op_cost.count() > 0) {
      const auto until = std::chrono::steady_clock::now() + env.op_cost;
      while (std::chrono::steady_clock::now() < until) {
      }
    }
    const Operation& op = fo.op;
    Key accessed = op.key;
    if (fo.role == OpRole::DepSource) {
      accessed = *op.dep_source;
      touch(accessed, true);
      auto v = store.read(accessed);
      resolve_dependency(DependencyValue{txn, fo.index, Bytes(v.begin(), v.end())}, op.key, env);
    } else {
      switch (op.kind) {
        case OpKind::Read:
          touch(op.key, true);
          break;
        case OpKind::Update: {
          KeyHistory& h = touch(op.key, false);
          will_write(op.key, h);
          store.write(op.key, *op.write_value);
          break;
        }
        case OpKind::Rmw: {
          Bytes source;
          if (in_this_slot(*op.dep_source)) {
            touch(*op.dep_source, true);
            auto v = store.read(*op.dep_source);
            source.assign(v.begin(), v.end());
          } else {
            source = env.deps->wait(txn, fo.index, std::chrono::steady_clock::now() + env.watchdog, env.stop);
          }
          KeyHistory& h = touch(op.key, true);
          will_write(op.key, h);
          combine_into(store.mutable_record(op.key), source);
          break;
        }
        case OpKind::CondAbort: {
          touch(op.key, true);
          if (store.read(op.key)[0] < *op.abort_below) result.aborted = true;
          break;
        }
      }
    }
    if (trace) {
      trace->append(TraceEntry{env.row, q.priority, q.partition, q.subrange, txn, fo.index, fo.role, accessed, 0});
    }
  }
  sort_unique(result.read_from);
  sort_unique(result.commit_after);
  return result;
}

void resolve_dependency(DependencyValue v, Key consumer_key, ExecutionEnv& env) {
  const std::uint32_t target = env.partitioner->partition_of(consumer_key);
  if (target == env.store->partition()) {
    env.deps->put(std::move(v));
  } else {
    env.send_dependency(std::move(v), target);
  }
}

void finish_eq(const ExecutionQueue& q, std::vector<AckEntry> entries, ExecutionEnv& env) {
  EqAck ack;
  ack.batch_id = q.batch_id;
  ack.priority = q.priority;
  ack.partition = q.partition;
  ack.subrange = q.subrange;
  ack.entries = std::move(entries);
  env.finish(q, std::move(ack));
}

std::size_t execute_batch(BatchMetadata& bm, ExecutionEnv& env, std::uint32_t /*tid*/) {
  std::optional<ExecutionTrace::Writer> writer;
  if (env.trace) writer.emplace(env.trace->writer());
  std::size_t executed = 0;
  for (;;) {
    auto claim = bm.wait_top(std::chrono::steady_clock::now() + env.watchdog, env.stop);
    if (!claim) break;
    const ExecutionQueue& q = *claim->eq;
    std::vector<AckEntry> entries;
    entries.reserve(q.fragments.size());
    for (const Fragment& f : q.fragments) entries.push_back(execute_fragment(q, f, env, writer ? &*writer : nullptr));
    finish_eq(q, std::move(entries), env);
    bm.complete(*claim);
    ++executed;
  }
  return executed;
}

}  // namespace qrstore
