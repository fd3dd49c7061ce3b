#include "qrstore/verify.hpp"

#include <algorithm>
#include <unordered_map>

#include "qrstore/committer.hpp"

namespace qrstore {

namespace {

class Scratch {
 public:
  Scratch(std::uint32_t record_size, const std::unordered_map<std::uint64_t, Bytes>* base)
      : record_size_(record_size), base_(base) {}

  Bytes& at(Key k) {
    auto it = values_.find(k.id);
    if (it != values_.end()) return it->second;
    if (base_) {
      if (auto b = base_->find(k.id); b != base_->end()) return values_.emplace(k.id, b->second).first->second;
    }
    return values_.emplace(k.id, initial_value(k, record_size_)).first->second;
  }
  std::unordered_map<std::uint64_t, Bytes>& values() { return values_; }

 private:
  std::uint32_t record_size_;
  const std::unordered_map<std::uint64_t, Bytes>* base_;
  std::unordered_map<std::uint64_t, Bytes> values_;
};

// Applies one transaction; `on_read`/`on_write` see every key access.
template <class OnRead, class OnWrite>
bool apply_txn(const Transaction& t, Scratch& s, OnRead on_read, OnWrite on_write) {
  bool abort = false;
  for (const Operation& op : t.ops) {
    switch (op.kind) {
      case OpKind::Read:
        on_read(op.key);
        break;
      case OpKind::Update:
        on_write(op.key);
        s.at(op.key) = *op.write_value;
        break;
      case OpKind::Rmw: {
        on_read(*op.dep_source);
        const Bytes src = s.at(*op.dep_source);
        on_read(op.key);
        on_write(op.key);
        combine_into(s.at(op.key), src);
        break;
      }
      case OpKind::CondAbort:
        on_read(op.key);
        if (s.at(op.key)[0] < *op.abort_below) abort = true;
        break;
    }
  }
  return abort;
}

}  // namespace

SerialOutcome serial_execute(std::vector<Transaction> txns, std::uint32_t partitions,
                             std::uint64_t records_per_partition, std::uint32_t record_size) {
  std::sort(txns.begin(), txns.end(), [](const Transaction& a, const Transaction& b) { return a.id < b.id; });
  SerialOutcome out;
  std::unordered_map<std::uint64_t, Bytes> committed;

  for (std::size_t lo = 0; lo < txns.size();) {
    std::size_t hi = lo;
    while (hi < txns.size() && txns[hi].id.batch == txns[lo].id.batch) ++hi;

    // Speculative pass over the whole batch.
    Scratch spec(record_size, &committed);
    std::unordered_map<std::uint64_t, TxnId> last_writer;
    std::vector<TransactionContext> ctx;
    for (std::size_t i = lo; i < hi; ++i) {
      const Transaction& t = txns[i];
      TransactionContext tc;
      tc.txn_id = t.id;
      auto on_read = [&](Key k) {
        auto w = last_writer.find(k.id);
        if (w != last_writer.end() && w->second != t.id) tc.read_from.push_back(w->second);
      };
      auto on_write = [&](Key k) { last_writer[k.id] = t.id; };
      tc.aborted = apply_txn(t, spec, on_read, on_write);
      ctx.push_back(std::move(tc));
    }
    const std::set<TxnId> aborted = cascade_closure(ctx);
    out.aborted.insert(aborted.begin(), aborted.end());

    // Committed-only pass.
    Scratch next(record_size, &committed);
    for (std::size_t i = lo; i < hi; ++i) {
      if (aborted.contains(txns[i].id)) continue;
      apply_txn(txns[i], next, [](Key) {}, [](Key) {});
    }
    for (auto& [k, v] : next.values()) committed[k] = std::move(v);
    lo = hi;
  }

  for (std::uint32_t p = 0; p < partitions; ++p) {
    out.stores.emplace_back(p, partitions, records_per_partition, record_size);
    out.stores.back().load_initial();
  }
  for (const auto& [k, v] : committed) out.stores[k % partitions].write(Key{k}, v);
  return out;
}

CheckResult check_against_serial(const Cluster& cluster, std::uint32_t row, const SerialOutcome& expected) {
  CheckResult r;
  const std::uint32_t P = cluster.config().partitions;
  for (std::uint32_t p = 0; p < P; ++p) {
    const PartitionStore& got = cluster.node(NodeId{row, p}).store();
    if (!(got == expected.stores[p])) {
      const std::uint32_t rs = got.record_size();
      for (std::uint64_t i = 0; i < got.records(); ++i) {
        if (!std::equal(got.raw().begin() + i * rs, got.raw().begin() + (i + 1) * rs,
                        expected.stores[p].raw().begin() + i * rs)) {
          r.fail("row " + std::to_string(row) + " partition " + std::to_string(p) + ": key " +
                 std::to_string(i * P + p) + " differs from serial execution");
          break;
        }
      }
      if (r.ok) r.fail("row " + std::to_string(row) + " partition " + std::to_string(p) + " differs");
    }
  }
  for (const auto& [id, d] : cluster.decisions(row)) {
    const bool engine_aborted = d.status == TxnStatus::Aborted;
    if (d.status == TxnStatus::Pending) r.fail(to_string(id) + " never decided");
    if (engine_aborted != expected.aborted.contains(id)) {
      r.fail(to_string(id) + (engine_aborted ? " aborted but serial execution commits it"
                                             : " committed but serial execution aborts it"));
    }
  }
  return r;
}

namespace {

struct Access {
  TxnId txn;
  bool write = false;
  std::uint64_t tick = 0;
};

// Per (row, batch, key): every access in tick order.
std::map<std::tuple<std::uint32_t, std::uint64_t, std::uint64_t>, std::vector<Access>> accesses(
    const std::vector<TraceEntry>& trace, const std::vector<Transaction>& planned) {
  std::unordered_map<TxnId, const Transaction*, TxnIdHash> by_id;
  for (const auto& t : planned) by_id[t.id] = &t;
  std::map<std::tuple<std::uint32_t, std::uint64_t, std::uint64_t>, std::vector<Access>> out;
  for (const auto& e : trace) {
    bool write = false;
    if (e.role == OpRole::Primary) {
      auto it = by_id.find(e.txn);
      if (it != by_id.end() && e.op_index < it->second->ops.size()) write = it->second->ops[e.op_index].writes();
    }
    out[{e.row, e.txn.batch, e.key.id}].push_back(Access{e.txn, write, e.tick});
  }
  for (auto& [k, v] : out) {
    std::sort(v.begin(), v.end(), [](const Access& a, const Access& b) { return a.tick < b.tick; });
  }
  return out;
}

}  // namespace

CheckResult check_execution_order(const std::vector<TraceEntry>& trace, const std::vector<Transaction>& planned,
                                  std::uint32_t rows) {
  CheckResult r;
  for (const auto& [where, list] : accesses(trace, planned)) {
    for (std::size_t i = 1; i < list.size(); ++i) {
      if (list[i].txn < list[i - 1].txn && (list[i].write || list[i - 1].write)) {
        r.fail("row " + std::to_string(std::get<0>(where)) + " key " + std::to_string(std::get<2>(where)) + ": " +
               to_string(list[i].txn) + " ran after " + to_string(list[i - 1].txn));
      }
    }
  }
  // Exactly once per (row, txn, op, role).
  std::map<std::tuple<std::uint32_t, TxnId, std::uint32_t, OpRole>, int> seen;
  for (const auto& e : trace) ++seen[{e.row, e.txn, e.op_index, e.role}];
  for (const auto& [k, n] : seen) {
    if (n != 1) r.fail(to_string(std::get<1>(k)) + " op " + std::to_string(std::get<2>(k)) + " ran " +
                       std::to_string(n) + " times");
  }
  std::size_t expected_primary = 0;
  for (const auto& t : planned) expected_primary += t.ops.size();
  std::size_t primary = 0;
  for (const auto& [k, n] : seen) primary += std::get<3>(k) == OpRole::Primary ? 1 : 0;
  if (primary != expected_primary * rows) {
    r.fail("trace holds " + std::to_string(primary) + " primary operations, expected " +
           std::to_string(expected_primary * rows));
  }
  return r;
}

CheckResult check_commit_order(const std::vector<TraceEntry>& trace, const std::vector<Transaction>& planned,
                               const std::map<TxnId, Decision>& decisions, std::uint32_t row) {
  CheckResult r;
  for (auto [where, list] : accesses(trace, planned)) {
    if (std::get<0>(where) != row) continue;
    // One entry per transaction, in planning order; a transaction writes the
    // key if any of its accesses does.
    std::map<TxnId, bool> by_txn;
    for (const auto& a : list) by_txn[a.txn] = by_txn[a.txn] || a.write;
    std::vector<std::pair<TxnId, bool>> seq;
    for (const auto& [id, w] : by_txn) {
      auto d = decisions.find(id);
      if (d == decisions.end()) {
        r.fail(to_string(id) + " has no decision");
        continue;
      }
      if (d->second.status == TxnStatus::Committed) seq.emplace_back(id, w);
    }
    // Each committed writer commits after every earlier committed accessor
    // and before every later one.
    std::uint64_t max_before = 0;
    std::vector<std::uint64_t> min_after(seq.size() + 1, ~std::uint64_t{0});
    for (std::size_t i = seq.size(); i-- > 0;) {
      min_after[i] = std::min(min_after[i + 1], decisions.at(seq[i].first).commit_tick);
    }
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const std::uint64_t tick = decisions.at(seq[i].first).commit_tick;
      if (seq[i].second && (tick <= max_before || tick >= min_after[i + 1])) {
        r.fail("row " + std::to_string(row) + " key " + std::to_string(std::get<2>(where)) + ": commit of " +
               to_string(seq[i].first) + " out of planning order");
      }
      max_before = std::max(max_before, tick);
    }
  }
  return r;
}

std::size_t executed_before_replication(const std::vector<TraceEntry>& trace,
                                        const std::map<std::pair<std::uint64_t, Priority>, std::uint64_t>& ticks) {
  std::size_t n = 0;
  for (const auto& e : trace) {
    if (e.row != 0) continue;
    auto it = ticks.find({e.txn.batch, e.txn.priority});
    if (it != ticks.end() && e.tick < it->second) ++n;
  }
  return n;
}

}  // namespace qrstore
