#include "qrstore/cluster.hpp"

#include <algorithm>

#include "qrstore/serialization.hpp"

namespace qrstore {

namespace {

using Clock = std::chrono::steady_clock;

std::int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now().time_since_epoch()).count();
}

double ms_between(std::int64_t from, std::int64_t to) { return to > from ? (to - from) / 1e6 : 0.0; }

}  // namespace

const char* to_string(SyncGranularity v) noexcept { return v == SyncGranularity::Node ? "node" : "thread"; }
const char* to_string(ReplicationMode v) noexcept {
  return v == ReplicationMode::Speculative ? "speculative" : "synchronous";
}
const char* to_string(ReplicationBackend v) noexcept {
  return v == ReplicationBackend::Quorum ? "quorum" : "middleware";
}
const char* to_string(TransportKind v) noexcept { return v == TransportKind::Loopback ? "loopback" : "tcp"; }

void ClusterConfig::validate() const {
  if (partitions == 0) throw ValidationError("partitions must be >= 1");
  if (planners == 0) throw ValidationError("planners must be >= 1");
  if (executors == 0) throw ValidationError("executors must be >= 1");
  // Dependency waits can only deadlock if one executor must hold two
  // sub-ranges at once; one sub-range per executor at most rules that out.
  if (effective_subranges() > executors) throw ValidationError("subranges must be <= executors");
  if (records_per_partition == 0) throw ValidationError("records_per_partition must be >= 1");
  if (record_size == 0) throw ValidationError("record_size must be >= 1");
  if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
  if (watchdog.count() <= 0) throw ValidationError("watchdog must be positive");
  if (heartbeats && heartbeat_period.count() <= 0) throw ValidationError("heartbeat_period must be positive");
}

double predicted_latency_ms(const BatchTimings& t) {
  if (t.synchronous) return t.t_pl_ms + t.t_repl_ms + t.t_deliv_ms + t.t_ex_ms + t.t_c_ms;
  return t.t_pl_ms + std::max(t.t_deliv_ms + t.t_ex_ms, t.t_repl_ms) + t.t_c_ms;
}

LatencyReport latency_decompose(const BatchTimings& t) {
  LatencyReport r;
  r.predicted_ms = predicted_latency_ms(t);
  r.measured_ms = t.measured_ms;
  r.ratio = r.predicted_ms > 0 ? r.measured_ms / r.predicted_ms : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Message bodies

Bytes encode_remote_eqs(const Priority& from, const std::vector<ExecutionQueue>& eqs) {
  ByteWriter w;
  w.priority(from);
  w.u32(static_cast<std::uint32_t>(eqs.size()));
  for (const auto& q : eqs) encode(w, q);
  return w.take();
}

std::pair<Priority, std::vector<ExecutionQueue>> decode_remote_eqs(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  const Priority from = r.priority();
  const std::uint32_t n = r.count(8);
  std::vector<ExecutionQueue> eqs;
  eqs.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) eqs.push_back(decode_eq(r));
  r.expect_end();
  return {from, std::move(eqs)};
}

Bytes encode_eq_ack(const EqAck& ack) {
  ByteWriter w;
  w.u64(ack.batch_id);
  w.priority(ack.priority);
  w.u32(ack.partition);
  w.u32(ack.subrange);
  w.u32(static_cast<std::uint32_t>(ack.entries.size()));
  for (const auto& e : ack.entries) {
    w.txn_id(e.txn);
    w.u32(e.completed);
    w.u8(e.aborted ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(e.read_from.size()));
    for (const auto& id : e.read_from) w.txn_id(id);
    w.u32(static_cast<std::uint32_t>(e.commit_after.size()));
    for (const auto& id : e.commit_after) w.txn_id(id);
  }
  return w.take();
}

EqAck decode_eq_ack(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  EqAck ack;
  ack.batch_id = r.u64();
  ack.priority = r.priority();
  ack.partition = r.u32();
  ack.subrange = r.u32();
  const std::uint32_t n = r.count(24 + 4 + 1 + 8);
  ack.entries.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    AckEntry e;
    e.txn = r.txn_id();
    e.completed = r.u32();
    e.aborted = r.u8() != 0;
    const std::uint32_t nr = r.count(24);
    for (std::uint32_t j = 0; j < nr; ++j) e.read_from.push_back(r.txn_id());
    const std::uint32_t nc = r.count(24);
    for (std::uint32_t j = 0; j < nc; ++j) e.commit_after.push_back(r.txn_id());
    ack.entries.push_back(std::move(e));
  }
  r.expect_end();
  return ack;
}

Bytes encode_dependency(const DependencyValue& v) {
  ByteWriter w;
  w.txn_id(v.txn);
  w.u32(v.op_index);
  w.bytes(v.value);
  return w.take();
}

DependencyValue decode_dependency(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  DependencyValue v;
  v.txn = r.txn_id();
  v.op_index = r.u32();
  v.value = r.bytes();
  r.expect_end();
  return v;
}

Bytes encode_txn_status(const Priority& from, const std::vector<TxnId>& aborted) {
  ByteWriter w;
  w.priority(from);
  w.u32(static_cast<std::uint32_t>(aborted.size()));
  for (const auto& id : aborted) w.txn_id(id);
  return w.take();
}

std::pair<Priority, std::vector<TxnId>> decode_txn_status(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  const Priority from = r.priority();
  const std::uint32_t n = r.count(24);
  std::vector<TxnId> ids;
  ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) ids.push_back(r.txn_id());
  r.expect_end();
  return {from, std::move(ids)};
}

bool routing_ok(const std::vector<CapturedMessage>& captured) {
  return std::all_of(captured.begin(), captured.end(), [](const CapturedMessage& m) {
    return is_group_traffic(m.kind) ? m.sender.col == m.destination.col : m.sender.row == m.destination.row;
  });
}

// ---------------------------------------------------------------------------
// Node internals

struct Node::NodeBatch {
  NodeBatch(std::uint64_t b, std::uint32_t partition, std::vector<Priority> priorities, std::uint32_t subranges)
      : bm(b, partition, std::move(priorities), subranges), slots(subranges) {}

  BatchMetadata bm;
  std::vector<SlotState> slots;
  DependencyBoard deps;
};

struct Node::PlannerBatch {
  std::unique_ptr<PlanBatch> plan;
  bool delivered = false;
  bool executed = false;
  bool repl_done = false;
  bool repl_ok = true;
  std::int64_t t_plan_start = 0;
  std::int64_t t_plan_end = 0;
  std::int64_t t_deliv_start = 0;
  std::int64_t t_deliv_end = 0;
  std::int64_t t_exec_done = 0;
  std::int64_t t_repl_start = 0;
  std::int64_t t_repl_ack = 0;
};

struct Node::PlannerState {
  Priority priority;
  std::map<std::uint64_t, std::shared_ptr<PlannerBatch>> batches;
  std::map<std::uint64_t, Bytes> incoming;  // follower payloads
  std::optional<std::uint64_t> last_executed;
};

class Node::Port : public DeliveryPort {
 public:
  Port(Node& node, std::shared_ptr<PlannerBatch> pb, Bytes payload)
      : node_(node), pb_(std::move(pb)), payload_(std::move(payload)) {}

  void set_local_eqs(const PlanBatch& batch, std::vector<ExecutionQueue> eqs) override {
    node_.batch(batch.batch_id()).bm.publish(batch.owner(), std::move(eqs));
  }
  void send_remote_eqs(std::uint32_t partition, const PlanBatch& batch, std::vector<ExecutionQueue> eqs) override {
    node_.send(MessageKind::RemoteEq, NodeId{node_.id_.row, partition}, batch.batch_id(),
               encode_remote_eqs(batch.owner(), eqs));
  }
  void replicate_data(const PlanBatch& batch) override {
    pb_->t_deliv_end = now_ns();
    node_.submit_replication(pb_, batch, std::move(payload_));
  }

 private:
  Node& node_;
  std::shared_ptr<PlannerBatch> pb_;
  Bytes payload_;
};

Node::Node(Cluster& cluster, NodeId id)
    : cluster_(cluster),
      id_(id),
      partitioner_(cluster.config().partitions, cluster.config().effective_subranges()),
      detector_(cluster.config().heartbeat_period, cluster.config().heartbeat_misses) {
  const ClusterConfig& cfg = cluster.config();
  store_ = std::make_unique<PartitionStore>(id.col, cfg.partitions, cfg.records_per_partition, cfg.record_size);
  store_->load_initial();
  checkpoint_ = take_checkpoint(*store_, std::nullopt, cfg.effective_subranges());
  if (cfg.durability_dir) {
    std::filesystem::create_directories(*cfg.durability_dir);
    const std::string tag = std::to_string(id.row) + "_" + std::to_string(id.col);
    log_ = std::make_unique<Log>(*cfg.durability_dir / ("log_" + tag + ".bin"));
    checkpoint_file_ = *cfg.durability_dir / ("checkpoint_" + tag + ".bin");
    save_checkpoint(checkpoint_, *checkpoint_file_);
  } else {
    log_ = std::make_unique<Log>();
  }
  for (std::uint32_t t = 0; t < cfg.planners; ++t) {
    auto ps = std::make_unique<PlannerState>();
    ps->priority = Priority{id.col, t};
    planners_.push_back(std::move(ps));
  }
  rebuild_replication();
}

Node::~Node() {
  stop_ = true;
  join_segment();
  if (replication_) replication_->stop();
}

void Node::rebuild_replication() {
  const ClusterConfig& cfg = cluster_.config();
  if (replication_) replication_->stop();
  if (cfg.backend == ReplicationBackend::Quorum) {
    QuorumOptions opt;
    opt.rf = cfg.rf;
    opt.compress = cfg.compression;
    opt.timeout = cfg.repl_timeout;
    replication_ = std::make_unique<QuorumReplication>(id_, cluster_.transport(), opt);
  } else {
    replication_ = std::make_unique<MiddlewareReplication>(*cluster_.broker_, cfg.compression);
  }
}

void Node::rebind(NodeId id) {
  id_ = id;
  rebuild_replication();
}

std::chrono::steady_clock::time_point Node::deadline() const { return Clock::now() + cluster_.config().watchdog; }

void Node::send(MessageKind kind, NodeId to, std::uint64_t b, Bytes body) {
  Message m;
  m.kind = kind;
  m.sender = id_;
  m.destination = to;
  m.batch_id = b;
  m.body = std::move(body);
  cluster_.transport().send(std::move(m));
}

void Node::fail(const std::string& what) { cluster_.fatal(to_string(id_) + ": " + what); }

template <class Pred>
void Node::await(std::unique_lock<std::mutex>& lk, Pred pred, const char* what, std::uint64_t b) {
  const auto until = deadline();
  while (!pred()) {
    if (stop_) throw Cancelled(what);
    if (Clock::now() >= until) {
      throw WatchdogTimeout(std::string("watchdog: ") + what + " for batch " + std::to_string(b) + " stalled");
    }
    cv_.wait_for(lk, std::chrono::milliseconds(20));
  }
}

Node::NodeBatch& Node::batch(std::uint64_t b) { return *batch_ptr(b); }

std::shared_ptr<Node::NodeBatch> Node::batch_ptr(std::uint64_t b) {
  std::lock_guard lk(batches_mu_);
  auto& slot = batches_[b];
  if (!slot) {
    const ClusterConfig& cfg = cluster_.config();
    std::vector<Priority> pris;
    for (std::uint32_t c = 0; c < cfg.partitions; ++c) {
      for (std::uint32_t t = 0; t < cfg.planners; ++t) pris.push_back(Priority{c, t});
    }
    slot = std::make_shared<NodeBatch>(b, id_.col, std::move(pris), cfg.effective_subranges());
  }
  return slot;
}

void Node::handle(Message m) {
  if (stop_) return;
  try {
    switch (m.kind) {
      case MessageKind::RemoteEq: {
        auto [from, eqs] = decode_remote_eqs(m.body);
        batch(m.batch_id).bm.publish(from, std::move(eqs));
        break;
      }
      case MessageKind::EqAck:
        apply_acks(decode_eq_ack(m.body));
        break;
      case MessageKind::DepValue:
        batch(m.batch_id).deps.put(decode_dependency(m.body));
        break;
      case MessageKind::ReplData:
      case MessageKind::ReplAck:
        if (auto* q = dynamic_cast<QuorumReplication*>(replication_.get())) q->on_message(m);
        break;
      case MessageKind::Barrier:
        record_barrier(m.batch_id);
        break;
      case MessageKind::TxnStatus: {
        auto [from, aborted] = decode_txn_status(m.body);
        record_status(m.batch_id, from, std::move(aborted));
        break;
      }
      case MessageKind::Heartbeat:
        detector_.beat(m.sender.row, Clock::now());
        break;
      case MessageKind::ClientTxn:
      case MessageKind::ClientResp:
        break;
    }
  } catch (const std::exception& e) {
    fail(std::string("handling ") + to_string(m.kind) + ": " + e.what());
  }
}

void Node::apply_acks(const EqAck& ack) {
  std::lock_guard lk(mu_);
  if (ack.priority.node_rank != id_.col || ack.priority.thread_rank >= planners_.size()) {
    throw Error("EQ ack routed to the wrong planner");
  }
  PlannerState& ps = *planners_[ack.priority.thread_rank];
  auto it = ps.batches.find(ack.batch_id);
  if (it == ps.batches.end()) throw Error("EQ ack for unknown batch " + std::to_string(ack.batch_id));
  PlannerBatch& pb = *it->second;
  TcShard& shard = pb.plan->contexts();
  for (const AckEntry& e : ack.entries) apply_ack(shard.at(e.txn), e);
  if (!pb.executed && shard.all_executed()) {
    pb.executed = true;
    pb.t_exec_done = now_ns();
    ps.last_executed = ack.batch_id;
  }
  cv_.notify_all();
}

void Node::record_status(std::uint64_t b, const Priority& from, std::vector<TxnId> aborted) {
  {
    std::lock_guard lk(mu_);
    statuses_[b][from] = std::set<TxnId>(aborted.begin(), aborted.end());
  }
  cv_.notify_all();
}

void Node::record_barrier(std::uint64_t b) {
  {
    std::lock_guard lk(mu_);
    ++barriers_[b];
  }
  cv_.notify_all();
}

std::optional<TxnStatus> Node::foreign_status(const TxnId& id) {
  auto it = statuses_.find(id.batch);
  if (it == statuses_.end()) return std::nullopt;
  auto p = it->second.find(id.priority);
  if (p == it->second.end()) return std::nullopt;
  return p->second.contains(id) ? TxnStatus::Aborted : TxnStatus::Committed;
}

// ---------------------------------------------------------------------------
// Segment lifecycle

void Node::start_segment(std::uint64_t first, std::uint64_t end) {
  stop_ = false;
  {
    std::lock_guard lk(mu_);
    segment_first_ = first;
    exec_batch_ = first;
    end_batch_ = end;
    exec_arrivals_ = 0;
  }
  const ClusterConfig& cfg = cluster_.config();
  for (std::uint32_t t = 0; t < cfg.planners; ++t) {
    threads_.emplace_back([this, t] { planner_loop(t); });
    threads_.emplace_back([this, t] { committer_loop(t); });
  }
  for (std::uint32_t w = 0; w < cfg.executors; ++w) threads_.emplace_back([this, w] { executor_loop(w); });
}

void Node::join_segment() {
  for (auto& t : threads_) {
    if (t.joinable()) t.join();
  }
  threads_.clear();
}

void Node::wake_all() {
  cv_.notify_all();
  std::lock_guard lk(batches_mu_);
  for (auto& [b, nb] : batches_) {
    nb->bm.wake();
    nb->deps.wake();
  }
}

template <class Fn>
void Node::guarded(Fn fn) {
  try {
    fn();
  } catch (const Cancelled&) {
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

// ---------------------------------------------------------------------------
// Planner

void Node::wait_sync(std::uint32_t t, std::uint64_t b) {
  std::unique_lock lk(mu_);
  if (b == segment_first_) return;
  const ClusterConfig& cfg = cluster_.config();
  if (cfg.sync == SyncGranularity::Node) {
    await(
        lk, [&] { return barriers_[b - 1] >= cfg.partitions; }, "node barrier", b - 1);
  } else {
    PlannerState& ps = *planners_[t];
    await(
        lk, [&] { return ps.last_executed && *ps.last_executed >= b - 1; }, "own EQ acknowledgements", b - 1);
  }
}

std::unique_ptr<PlanBatch> Node::plan_leader(std::uint32_t t, std::uint64_t b) {
  const ClusterConfig& cfg = cluster_.config();
  const Priority pri = planners_[t]->priority;
  ClientTransactionQueue& queue = *cluster_.queues_[id_.col * cfg.planners + t];
  auto batch = std::make_unique<PlanBatch>(b, pri);
  batch->set_recording(cfg.record_outcomes);
  const KeyLimits limits{cfg.records_per_partition, cfg.record_size};
  const ReadyPolicy policy{cfg.batch_size, cfg.batch_timeout};
  const auto start = Clock::now();
  std::uint64_t seq = 0;
  while (!batch_ready(*batch, policy, Clock::now() - start, queue.closed_and_empty())) {
    if (stop_) throw Cancelled("planner stopped");
    auto until = start + cfg.batch_timeout;
    if (batch->planned() == 0 || until <= Clock::now()) until = Clock::now() + cfg.batch_timeout;
    auto txn = queue.pop_until(until);
    if (!txn) continue;
    txn->id = TxnId{b, pri, seq};
    PlannedTxn planned;
    try {
      planned = plan_message(*txn, partitioner_, limits);
    } catch (const ValidationError&) {
      cluster_.count_rejected();
      continue;
    }
    ++seq;
    batch->record(*txn);
    batch->merge(std::move(planned));
  }
  return batch;
}

std::unique_ptr<PlanBatch> Node::plan_follower(std::uint32_t t, std::uint64_t b) {
  PlannerState& ps = *planners_[t];
  replication_->receive_data(b, ps.priority, [this, &ps, b](const ReplicationMeta&, Bytes raw) {
    {
      std::lock_guard lk(mu_);
      ps.incoming[b] = std::move(raw);
    }
    cv_.notify_all();
  });
  Bytes raw;
  {
    std::unique_lock lk(mu_);
    await(
        lk, [&] { return ps.incoming.contains(b); }, "replicated payload", b);
    raw = std::move(ps.incoming[b]);
    ps.incoming.erase(b);
  }
  DecodedPayload d = deserialize_payload(raw);
  if (d.batch_id != b || d.priority != ps.priority) throw Error("replicated payload for the wrong batch");
  return std::make_unique<PlanBatch>(
      PlanBatch::from_parts(b, ps.priority, std::move(d.eqs), std::move(d.shard.txns)));
}

void Node::submit_replication(const std::shared_ptr<PlannerBatch>& pb, const PlanBatch& batch, Bytes raw) {
  pb->t_repl_start = now_ns();
  const std::uint64_t b = batch.batch_id();
  const Priority pri = batch.owner();
  replication_->replicate_data(b, pri, std::move(raw), [this, pb, b, pri](bool ok) {
    const std::uint64_t tick = cluster_.clock().next();
    {
      std::lock_guard lk(mu_);
      pb->repl_done = true;
      pb->repl_ok = ok;
      pb->t_repl_ack = now_ns();
    }
    cluster_.record_replication(b, pri, tick);
    cv_.notify_all();
  });
}

void Node::deliver(std::uint32_t t, std::unique_ptr<PlanBatch> batch, std::int64_t plan_start) {
  const ClusterConfig& cfg = cluster_.config();
  PlannerState& ps = *planners_[t];
  const std::uint64_t b = batch->batch_id();
  const bool replicate = leader() && cfg.rf > 0;
  // Snapshot before any EQ runs: acks mutate the contexts from here on.
  Bytes payload = replicate ? serialize_payload(*batch) : Bytes{};
  auto pb = std::make_shared<PlannerBatch>();
  pb->t_plan_start = plan_start;
  pb->t_plan_end = now_ns();
  PlanBatch& plan = *batch;
  pb->plan = std::move(batch);
  {
    std::lock_guard lk(mu_);
    if (!replicate) pb->repl_done = true;
    if (plan.contexts().all_executed()) {
      pb->executed = true;
      pb->t_exec_done = pb->t_plan_end;
      ps.last_executed = b;
    }
    ps.batches[b] = pb;
  }
  // No wake-up here: nobody can act on the batch before it is delivered, and
  // on a busy CPU the notify hands the core away mid-hand-off.

  if (replicate && cfg.repl_mode == ReplicationMode::Synchronous) {
    Port port(*this, pb, {});
    submit_replication(pb, plan, std::move(payload));
    {
      std::unique_lock lk(mu_);
      await(
          lk, [&] { return pb->repl_done; }, "synchronous replication", b);
      if (!pb->repl_ok) throw Error("replication failed for batch " + std::to_string(b));
    }
    pb->t_deliv_start = now_ns();
    deliver_batch(plan, id_.col, cfg.partitions, port, false);
  } else {
    Port port(*this, pb, std::move(payload));
    pb->t_deliv_start = now_ns();
    deliver_batch(plan, id_.col, cfg.partitions, port, replicate);
  }
  {
    std::lock_guard lk(mu_);
    if (!replicate || cfg.repl_mode == ReplicationMode::Synchronous) pb->t_deliv_end = now_ns();
    // Work that finished while delivery was still going counts as zero.
    if (pb->executed && pb->t_exec_done < pb->t_deliv_end) pb->t_exec_done = pb->t_deliv_end;
    pb->delivered = true;
  }
  cv_.notify_all();
}

void Node::planner_loop(std::uint32_t t) {
  guarded([&] {
    for (std::uint64_t b = segment_first_; b < end_batch_; ++b) {
      wait_sync(t, b);
      const std::int64_t plan_start = now_ns();
      std::unique_ptr<PlanBatch> batch = leader() ? plan_leader(t, b) : plan_follower(t, b);
      if (leader()) cluster_.record_planned(*batch);
      deliver(t, std::move(batch), plan_start);
    }
  });
}

// ---------------------------------------------------------------------------
// Committer

void Node::committer_loop(std::uint32_t t) {
  guarded([&] {
    const ClusterConfig& cfg = cluster_.config();
    PlannerState& ps = *planners_[t];
    for (std::uint64_t b = segment_first_; b < end_batch_; ++b) {
      std::unique_lock lk(mu_);
      await(
          lk, [&] { return ps.batches.contains(b); }, "planning", b);
      std::shared_ptr<PlannerBatch> pb = ps.batches[b];
      await(
          lk, [&] { return pb->delivered && pb->executed; }, "execution acknowledgements", b);
      await(
          lk, [&] { return pb->repl_done; }, "replication acknowledgement", b);
      if (!pb->repl_ok) throw Error("replication failed for batch " + std::to_string(b) + "; batch cannot commit");

      const std::int64_t commit_start = now_ns();
      TcShard& shard = pb->plan->contexts();
      const bool is_leader = leader();
      const std::uint32_t row = id_.row;
      auto foreign = [this](const TxnId& id) { return foreign_status(id); };
      auto on_terminal = [&](TransactionContext& tc) {
        tc.commit_seq = cluster_.clock().next();
        cluster_.record_decision(row, tc, is_leader);
      };
      auto wait_for_change = [&] {
        if (stop_) throw Cancelled("committer stopped");
        return cv_.wait_until(lk, deadline()) == std::cv_status::no_timeout;
      };
      commit_batch(shard, foreign, on_terminal, wait_for_change);

      std::vector<TxnId> aborted;
      for (const auto& tc : shard.txns) {
        if (tc.status == TxnStatus::Aborted) aborted.push_back(tc.txn_id);
      }
      ps.batches.erase(b);
      lk.unlock();

      const Bytes body = encode_txn_status(ps.priority, aborted);
      for (std::uint32_t c = 0; c < cfg.partitions; ++c) {
        if (c != id_.col) send(MessageKind::TxnStatus, NodeId{id_.row, c}, b, body);
      }
      record_status(b, ps.priority, std::move(aborted));
      const std::int64_t commit_end = now_ns();

      if (is_leader) {
        BatchTimings tm;
        tm.batch_id = b;
        tm.priority = ps.priority;
        tm.txns = shard.txns.size();
        tm.synchronous = cfg.repl_mode == ReplicationMode::Synchronous && cfg.rf > 0;
        tm.t_pl_ms = ms_between(pb->t_plan_start, pb->t_plan_end);
        tm.t_deliv_ms = ms_between(pb->t_deliv_start, pb->t_deliv_end);
        tm.t_ex_ms = ms_between(pb->t_deliv_end, pb->t_exec_done);
        if (cfg.rf > 0) {
          tm.t_repl_ms = tm.synchronous ? ms_between(pb->t_repl_start, pb->t_repl_ack)
                                        : ms_between(pb->t_deliv_start, pb->t_repl_ack);
        }
        tm.t_c_ms = ms_between(commit_start, commit_end);
        tm.measured_ms = ms_between(pb->t_plan_start, commit_end);
        tm.plan_start_ns = pb->t_plan_start;
        tm.exec_done_ns = pb->t_exec_done;
        tm.commit_end_ns = commit_end;
        cluster_.record_timings(tm);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Executors and batch finalization

void Node::executor_loop(std::uint32_t w) {
  guarded([&] {
    const ClusterConfig& cfg = cluster_.config();
    for (std::uint64_t b = segment_first_; b < end_batch_; ++b) {
      std::shared_ptr<NodeBatch> nb = batch_ptr(b);
      ExecutionEnv env;
      env.row = id_.row;
      env.store = store_.get();
      env.partitioner = &partitioner_;
      env.slots = &nb->slots;
      env.deps = &nb->deps;
      env.send_dependency = [this, b](DependencyValue v, std::uint32_t partition) {
        send(MessageKind::DepValue, NodeId{id_.row, partition}, b, encode_dependency(v));
      };
      env.finish = [this](const ExecutionQueue& q, EqAck ack) {
        if (q.priority.node_rank == id_.col) {
          apply_acks(ack);
        } else {
          send(MessageKind::EqAck, NodeId{id_.row, q.priority.node_rank}, q.batch_id, encode_eq_ack(ack));
        }
      };
      env.trace = cfg.trace ? &cluster_.trace_ : nullptr;
      env.watchdog = cfg.watchdog;
      env.stop = &stop_;
      env.op_cost = cfg.op_cost;
      try {
        execute_batch(nb->bm, env, w);
      } catch (const WatchdogTimeout& e) {
        throw WatchdogTimeout(std::string("execution of batch ") + std::to_string(b) + ": " + e.what());
      }
      if (stop_) throw Cancelled("executor stopped");

      std::unique_lock lk(mu_);
      if (++exec_arrivals_ == cfg.executors) {
        exec_arrivals_ = 0;
        lk.unlock();
        finalize(b);
      } else {
        await(
            lk, [&] { return exec_batch_ > b; }, "batch finalization", b);
      }
    }
  });
}

void Node::finalize(std::uint64_t b) {
  const ClusterConfig& cfg = cluster_.config();
  const std::size_t expected = static_cast<std::size_t>(cfg.partitions) * cfg.planners;
  std::set<TxnId> aborted;
  {
    std::unique_lock lk(mu_);
    await(
        lk, [&] { return statuses_[b].size() == expected; }, "commit decisions", b);
    for (const auto& [pri, ids] : statuses_[b]) aborted.insert(ids.begin(), ids.end());
  }
  std::shared_ptr<NodeBatch> nb = batch_ptr(b);
  auto is_aborted = [&](const TxnId& id) { return aborted.contains(id); };
  auto is_committed = [&](const TxnId& id) { return !aborted.contains(id); };
  LogRecord rec;
  rec.batch_id = b;
  rec.partition = id_.col;
  for (std::uint32_t s = 0; s < nb->slots.size(); ++s) {
    restore_aborted_writes(nb->slots[s], *store_, is_aborted);
    rec.eqs.push_back(build_write_only_eq(b, id_.col, s, nb->slots[s], *store_, is_committed));
  }
  log_->append(std::move(rec));
  if (cfg.checkpoint_interval > 0 && (b + 1) % cfg.checkpoint_interval == 0) {
    checkpoint_ = take_checkpoint(*store_, b, cfg.effective_subranges());
    if (checkpoint_file_) save_checkpoint(checkpoint_, *checkpoint_file_);
  }
  if (cluster_.crash_scheduled(id_, b)) {
    crash_and_recover(b);
  }
  {
    std::lock_guard lk(batches_mu_);
    batches_.erase(b);
  }
  replication_->prune_below(b);
  {
    std::lock_guard lk(mu_);
    statuses_.erase(b);
    if (b >= 1) barriers_.erase(b - 1);
    exec_batch_ = b + 1;
  }
  cv_.notify_all();
  for (std::uint32_t c = 0; c < cfg.partitions; ++c) {
    if (c != id_.col) send(MessageKind::Barrier, NodeId{id_.row, c}, b, {});
  }
  record_barrier(b);
}

void Node::crash_and_recover(std::uint64_t b) {
  // Memory is gone; the checkpoint survives, the unsynced log tail does not.
  store_->wipe();
  log_->truncate_from(checkpoint_.watermark ? *checkpoint_.watermark + 1 : 0);
  const Node& leader_peer = cluster_.node(NodeId{0, id_.col});
  const auto until = deadline();
  while (!leader_peer.committed_batch() || *leader_peer.committed_batch() < b) {
    if (stop_) throw Cancelled("recovery stopped");
    if (Clock::now() >= until) throw WatchdogTimeout("recovery: leader log never reached batch " + std::to_string(b));
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  recover_from(leader_peer, b);
}

void Node::recover_from(const Node& peer, std::uint64_t through) {
  std::vector<LogRecord> records = peer.log().records_after(checkpoint_.watermark);
  std::erase_if(records, [&](const LogRecord& r) { return r.batch_id > through; });
  const Recovered rec = recover_node(*store_, checkpoint_, records);
  if (rec.last_batch != through) throw RecoveryError("recovery stopped short of batch " + std::to_string(through));
  log_->truncate_from(checkpoint_.watermark ? *checkpoint_.watermark + 1 : 0);
  for (auto& r : records) log_->append(std::move(r));
}

// ---------------------------------------------------------------------------
// Cluster

Cluster::Cluster(ClusterConfig config) : config_(std::move(config)) {
  config_.validate();
  if (config_.transport == TransportKind::Tcp) {
    transport_ = std::make_unique<TcpTransport>();
  } else {
    transport_ = std::make_unique<LoopbackTransport>();
  }
  LinkFaults faults;
  faults.intra_latency = config_.intra_latency;
  faults.group_latency = config_.repl_latency;
  transport_->set_faults(faults);
  transport_->enable_capture(config_.capture_messages);
  if (config_.backend == ReplicationBackend::Middleware) {
    broker_ = std::make_unique<Broker>(config_.broker_latency + config_.repl_latency);
  }
  for (std::uint32_t r = 0; r < config_.rows(); ++r) {
    grid_.emplace_back();
    for (std::uint32_t c = 0; c < config_.partitions; ++c) {
      grid_.back().push_back(std::make_unique<Node>(*this, NodeId{r, c}));
      transport_->attach(NodeId{r, c}, [this](Message m) {
        Node* target;
        {
          std::shared_lock lk(grid_mu_);
          target = grid_[m.destination.row][m.destination.col].get();
        }
        target->handle(std::move(m));
      });
    }
  }
  for (std::uint32_t i = 0; i < config_.partitions * config_.planners; ++i) {
    queues_.push_back(std::make_unique<ClientTransactionQueue>());
  }
  decisions_.resize(config_.rows());
  transport_->start();
  if (config_.heartbeats) start_heartbeats();
}

Cluster::~Cluster() {
  hb_stop_ = true;
  for (auto& t : heartbeat_threads_) {
    if (t.joinable()) t.join();
  }
  for (auto& q : queues_) q->close();
  for (auto& row : grid_) {
    for (auto& n : row) {
      n->stop_ = true;
      n->wake_all();
      n->join_segment();
    }
  }
  transport_->stop();
  if (broker_) broker_->stop();
  for (auto& row : grid_) {
    for (auto& n : row) n->replication().stop();
  }
}

void Cluster::start_heartbeats() {
  const auto now = Clock::now();
  for (std::uint32_t r = 0; r < config_.rows(); ++r) {
    for (std::uint32_t c = 0; c < config_.partitions; ++c) {
      for (std::uint32_t peer = 0; peer < config_.rows(); ++peer) {
        if (peer != r) grid_[r][c]->detector().watch(peer, now);
      }
      heartbeat_threads_.emplace_back([this, r, c] {
        while (!hb_stop_) {
          for (std::uint32_t peer = 0; peer < config_.rows(); ++peer) {
            if (peer == r) continue;
            Message m;
            m.kind = MessageKind::Heartbeat;
            m.sender = NodeId{r, c};
            m.destination = NodeId{peer, c};
            transport_->send(std::move(m));
          }
          std::this_thread::sleep_for(config_.heartbeat_period);
        }
      });
    }
  }
}

void Cluster::fatal(const std::string& what) {
  {
    std::lock_guard lk(fatal_mu_);
    if (fatal_) return;
    fatal_ = what;
  }
  for (auto& q : queues_) q->close();
  for (auto& row : grid_) {
    for (auto& n : row) {
      n->stop_ = true;
      n->wake_all();
    }
  }
}

void Cluster::script_crash(CrashScript c) {
  if (c.node.row == 0 || c.node.row >= config_.rows() || c.node.col >= config_.partitions) {
    throw ValidationError("crash scripts target follower nodes only");
  }
  crashes_.push_back(c);
}

bool Cluster::crash_scheduled(NodeId id, std::uint64_t b) const {
  return std::any_of(crashes_.begin(), crashes_.end(),
                     [&](const CrashScript& c) { return c.node == id && c.batch == b; });
}

void Cluster::record_decision(std::uint32_t row, const TransactionContext& tc, bool client_visible) {
  std::lock_guard lk(rec_mu_);
  if (config_.record_outcomes) decisions_[row][tc.txn_id] = Decision{tc.status, tc.commit_seq};
  if (!client_visible) return;
  if (tc.status == TxnStatus::Committed) ++committed_;
  if (tc.status == TxnStatus::Aborted) ++aborted_;
  latencies_.push_back((now_ns() - tc.arrival_ns) / 1e6);
}

void Cluster::record_planned(const PlanBatch& batch) {
  std::lock_guard lk(rec_mu_);
  planned_count_ += batch.planned();
  if (config_.record_outcomes) {
    planned_.insert(planned_.end(), batch.transactions().begin(), batch.transactions().end());
  }
}

void Cluster::record_replication(std::uint64_t b, const Priority& pri, std::uint64_t tick) {
  std::lock_guard lk(rec_mu_);
  if (config_.record_outcomes) repl_ticks_[{b, pri}] = tick;
}

void Cluster::record_timings(const BatchTimings& t) {
  std::lock_guard lk(rec_mu_);
  timings_.push_back(t);
}

void Cluster::count_rejected() {
  std::lock_guard lk(rec_mu_);
  ++rejected_;
}

RunMetrics Cluster::run(const TxnSource& source, SegmentOptions options) {
  {
    std::lock_guard lk(fatal_mu_);
    if (fatal_) throw Error("cluster failed earlier: " + *fatal_);
  }
  const std::uint64_t first = next_batch_;
  const std::uint64_t end = first + options.batches;
  const std::uint64_t per_planner = options.batches * config_.batch_size;

  {
    std::lock_guard lk(rec_mu_);
    latencies_.clear();
    timings_.clear();
    committed_ = aborted_ = planned_count_ = rejected_ = 0;
  }
  transport_->reset_stats();
  ReplicationStats before;
  for (std::uint32_t c = 0; c < config_.partitions; ++c) {
    const ReplicationStats s = grid_[0][c]->replication().stats();
    before.payloads += s.payloads;
    before.raw_bytes += s.raw_bytes;
    before.wire_bytes += s.wire_bytes;
  }

  std::vector<std::thread> feeders;
  for (std::uint32_t c = 0; c < config_.partitions; ++c) {
    for (std::uint32_t t = 0; t < config_.planners; ++t) {
      ClientTransactionQueue& q = *queues_[c * config_.planners + t];
      q.reopen();
      if (options.prefill) {
        for (std::uint64_t i = 0; i < per_planner; ++i) {
          Transaction txn = source(c, t);
          txn.arrival_ns = now_ns();
          q.push(std::move(txn));
        }
        q.close();
      }
    }
  }

  const auto t0 = Clock::now();
  if (!options.prefill) {
    for (std::uint32_t c = 0; c < config_.partitions; ++c) {
      for (std::uint32_t t = 0; t < config_.planners; ++t) {
        feeders.emplace_back([this, c, t, per_planner, &source] {
          ClientTransactionQueue& q = *queues_[c * config_.planners + t];
          for (std::uint64_t i = 0; i < per_planner; ++i) {
            if (!q.wait_below(2 * config_.batch_size, Clock::now() + config_.watchdog)) break;
            Transaction txn = source(c, t);
            txn.arrival_ns = now_ns();
            q.push(std::move(txn));
          }
          q.close();
        });
      }
    }
  }
  for (auto& row : grid_) {
    for (auto& n : row) n->start_segment(first, end);
  }
  for (auto& row : grid_) {
    for (auto& n : row) n->join_segment();
  }
  for (auto& q : queues_) q->close();
  for (auto& f : feeders) f.join();
  const auto t1 = Clock::now();

  {
    std::lock_guard lk(fatal_mu_);
    if (fatal_) throw Error(*fatal_);
  }
  next_batch_ = end;

  RunMetrics m;
  {
    std::lock_guard lk(rec_mu_);
    m.planned = planned_count_;
    m.committed = committed_;
    m.aborted = aborted_;
    m.rejected = rejected_;
    m.client_latency_ms = latencies_;
    m.timings = timings_;
  }
  m.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  for (std::uint32_t c = 0; c < config_.partitions; ++c) {
    const ReplicationStats s = grid_[0][c]->replication().stats();
    m.payloads += s.payloads;
    m.payload_raw_bytes += s.raw_bytes;
    m.payload_wire_bytes += s.wire_bytes;
  }
  m.payloads -= before.payloads;
  m.payload_raw_bytes -= before.raw_bytes;
  m.payload_wire_bytes -= before.wire_bytes;
  m.messages = transport_->counts();
  std::sort(m.timings.begin(), m.timings.end(), [](const BatchTimings& a, const BatchTimings& b) {
    return std::tie(a.batch_id, a.priority) < std::tie(b.batch_id, b.priority);
  });
  return m;
}

std::uint32_t Cluster::fail_over(std::uint32_t col) {
  if (config_.rf == 0) throw ValidationError("fail-over needs rf >= 1");
  if (col >= config_.partitions) throw ValidationError("no such replication group");
  const NodeId old_pos{0, col};
  transport_->set_down(old_pos, true);

  if (config_.heartbeats) {
    const auto until = Clock::now() + config_.watchdog;
    Node& observer = node(NodeId{1, col});
    for (;;) {
      auto s = observer.detector().suspects(Clock::now());
      if (std::find(s.begin(), s.end(), 0u) != s.end()) break;
      if (Clock::now() >= until) throw WatchdogTimeout("leader failure never detected");
      std::this_thread::sleep_for(config_.heartbeat_period);
    }
  }

  std::vector<ElectionCandidate> group;
  for (std::uint32_t r = 1; r < config_.rows(); ++r) {
    group.push_back(ElectionCandidate{r, node(NodeId{r, col}).committed_batch(), !transport_->is_down(NodeId{r, col})});
  }
  const std::uint32_t elected = elect_leader(group);
  Node& winner = node(NodeId{elected, col});
  for (std::uint32_t r = 1; r < config_.rows(); ++r) {
    if (r != elected && !transport_->is_down(NodeId{r, col})) catch_up(winner.log(), node(NodeId{r, col}).log());
  }

  {
    std::unique_lock lk(grid_mu_);
    std::swap(grid_[0][col], grid_[elected][col]);
  }
  Node& new_leader = *grid_[0][col];
  Node& old_leader = *grid_[elected][col];
  new_leader.rebind(NodeId{0, col});
  old_leader.rebind(NodeId{elected, col});
  transport_->set_down(old_pos, false);

  // The old leader comes back as a follower and rebuilds from its
  // checkpoint plus the new leader's log.
  old_leader.store().wipe();
  const auto last = new_leader.committed_batch();
  if (last) {
    old_leader.recover_from(new_leader, *last);
  } else {
    old_leader.store().assign_raw(old_leader.checkpoint().data);
  }
  return elected;
}

bool Cluster::replicas_converged() const {
  for (std::uint32_t c = 0; c < config_.partitions; ++c) {
    for (std::uint32_t r = 1; r < config_.rows(); ++r) {
      if (!(node(NodeId{r, c}).store() == node(NodeId{0, c}).store())) return false;
    }
  }
  return true;
}

std::vector<Transaction> Cluster::planned_transactions() const {
  std::lock_guard lk(rec_mu_);
  std::vector<Transaction> out = planned_;
  std::sort(out.begin(), out.end(), [](const Transaction& a, const Transaction& b) { return a.id < b.id; });
  return out;
}

std::map<TxnId, Decision> Cluster::decisions(std::uint32_t row) const {
  std::lock_guard lk(rec_mu_);
  return decisions_.at(row);
}

std::map<std::pair<std::uint64_t, Priority>, std::uint64_t> Cluster::replication_ticks() const {
  std::lock_guard lk(rec_mu_);
  return repl_ticks_;
}

}  // namespace qrstore
