#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "qrstore/committer.hpp"
#include "qrstore/context.hpp"
#include "qrstore/core.hpp"
#include "qrstore/durability.hpp"
#include "qrstore/executor.hpp"
#include "qrstore/planner.hpp"
#include "qrstore/replication.hpp"
#include "qrstore/store.hpp"
#include "qrstore/transport.hpp"

namespace qrstore {

enum class SyncGranularity : std::uint8_t { Node, Thread };
enum class ReplicationMode : std::uint8_t { Speculative, Synchronous };
enum class ReplicationBackend : std::uint8_t { Quorum, Middleware };
enum class TransportKind : std::uint8_t { Loopback, Tcp };

const char* to_string(SyncGranularity v) noexcept;
const char* to_string(ReplicationMode v) noexcept;
const char* to_string(ReplicationBackend v) noexcept;
const char* to_string(TransportKind v) noexcept;

struct ClusterConfig {
  std::uint32_t partitions = 4;
  std::uint32_t rf = 0;
  std::uint32_t planners = 1;   // per node
  std::uint32_t executors = 2;  // per node
  std::uint32_t subranges = 0;  // 0 = one per executor
  std::uint64_t records_per_partition = 50'000;
  std::uint32_t record_size = 100;

  std::size_t batch_size = 2'000;
  std::chrono::milliseconds batch_timeout{50};

  SyncGranularity sync = SyncGranularity::Node;
  ReplicationMode repl_mode = ReplicationMode::Speculative;
  ReplicationBackend backend = ReplicationBackend::Quorum;
  bool compression = false;
  TransportKind transport = TransportKind::Loopback;

  std::chrono::microseconds intra_latency{0};
  std::chrono::microseconds repl_latency{0};    // REPL_DATA link latency
  std::chrono::microseconds broker_latency{0};  // middleware service time
  std::chrono::nanoseconds op_cost{0};          // simulated per-operation work
  std::chrono::milliseconds watchdog{10'000};
  std::chrono::milliseconds repl_timeout{10'000};

  std::uint64_t checkpoint_interval = 0;  // batches; 0 = never
  std::optional<std::filesystem::path> durability_dir;

  bool heartbeats = false;
  std::chrono::milliseconds heartbeat_period{100};
  std::uint32_t heartbeat_misses = 5;

  bool capture_messages = false;
  bool trace = false;          // per-operation execution trace
  bool record_outcomes = false;  // planned transactions and per-row decisions

  std::uint32_t effective_subranges() const noexcept { return subranges ? subranges : executors; }
  std::uint32_t rows() const noexcept { return rf + 1; }
  /// Throws ValidationError naming the offending field.
  void validate() const;
};

/// Per (leader planner, batch) phase timestamps, nanoseconds on the steady
/// clock.
struct BatchTimings {
  std::uint64_t batch_id = 0;
  Priority priority;
  std::uint64_t txns = 0;
  double t_pl_ms = 0;
  double t_deliv_ms = 0;
  double t_ex_ms = 0;
  double t_repl_ms = 0;
  double t_c_ms = 0;
  double measured_ms = 0;
  bool synchronous = false;
  // Absolute steady-clock stamps, for cross-node ordering checks.
  std::int64_t plan_start_ns = 0;
  std::int64_t exec_done_ns = 0;
  std::int64_t commit_end_ns = 0;
};

struct LatencyReport {
  double predicted_ms = 0;
  double measured_ms = 0;
  double ratio = 0;  // measured / predicted
};

/// Latency model: T = T_pl + max(T_deliv + T_ex, T_repl) + T_c for
/// speculative replication, plain sum when replication precedes delivery.
double predicted_latency_ms(const BatchTimings& t);
LatencyReport latency_decompose(const BatchTimings& t);

struct Decision {
  TxnStatus status = TxnStatus::Pending;
  std::uint64_t commit_tick = 0;
};

struct RunMetrics {
  std::uint64_t planned = 0;
  std::uint64_t committed = 0;
  std::uint64_t aborted = 0;
  double wall_seconds = 0;
  std::vector<double> client_latency_ms;
  std::vector<BatchTimings> timings;  // leader row
  std::uint64_t payload_raw_bytes = 0;
  std::uint64_t payload_wire_bytes = 0;
  std::uint64_t payloads = 0;
  std::uint64_t rejected = 0;
  std::array<std::uint64_t, kMessageKinds> messages{};

  double throughput_tps() const noexcept { return wall_seconds > 0 ? committed / wall_seconds : 0.0; }
};

/// Pulls client transactions for the leader planner (col, thread).
using TxnSource = std::function<Transaction(std::uint32_t col, std::uint32_t thread)>;

struct SegmentOptions {
  std::uint64_t batches = 1;
  /// Fill every client queue with batches * batch_size transactions up
  /// front: batch boundaries then depend only on counts.
  bool prefill = true;
};

/// Scripted follower crash: at the end of `batch` the node loses its memory
/// and rebuilds from its checkpoint plus the leader's log.
struct CrashScript {
  NodeId node;
  std::uint64_t batch = 0;
};

/// EQs a planner ships to one partition's owner.
Bytes encode_remote_eqs(const Priority& from, const std::vector<ExecutionQueue>& eqs);
std::pair<Priority, std::vector<ExecutionQueue>> decode_remote_eqs(std::span<const std::uint8_t> body);
Bytes encode_eq_ack(const EqAck& ack);
EqAck decode_eq_ack(std::span<const std::uint8_t> body);
Bytes encode_dependency(const DependencyValue& v);
DependencyValue decode_dependency(std::span<const std::uint8_t> body);
Bytes encode_txn_status(const Priority& from, const std::vector<TxnId>& aborted);
std::pair<Priority, std::vector<TxnId>> decode_txn_status(std::span<const std::uint8_t> body);

/// REPL_* traffic stays in a column, everything else stays in a row.
bool routing_ok(const std::vector<CapturedMessage>& captured);

class Cluster;

/// One grid position's state: a partition replica with its planners,
/// committers and executors.
class Node {
 public:
  Node(Cluster& cluster, NodeId id);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  NodeId id() const noexcept { return id_; }
  bool leader() const noexcept { return id_.row == 0; }
  PartitionStore& store() noexcept { return *store_; }
  const PartitionStore& store() const noexcept { return *store_; }
  Log& log() noexcept { return *log_; }
  const Log& log() const noexcept { return *log_; }
  const Checkpoint& checkpoint() const noexcept { return checkpoint_; }
  ReplicationLayer& replication() noexcept { return *replication_; }
  std::optional<std::uint64_t> committed_batch() const { return log_->last_batch(); }
  FailureDetector& detector() noexcept { return detector_; }

  void handle(Message m);

 private:
  friend class Cluster;
  struct NodeBatch;
  struct PlannerBatch;
  struct PlannerState;
  class Port;

  // Segment lifecycle (cluster-driven, threads stopped in between).
  void rebind(NodeId id);
  void start_segment(std::uint64_t first, std::uint64_t end);
  void join_segment();
  void wake_all();
  void rebuild_replication();
  void crash_and_recover(std::uint64_t b);
  /// Snapshot plus the peer's log records up to `through`.
  void recover_from(const Node& peer, std::uint64_t through);

  NodeBatch& batch(std::uint64_t b);
  std::shared_ptr<NodeBatch> batch_ptr(std::uint64_t b);
  void planner_loop(std::uint32_t t);
  void committer_loop(std::uint32_t t);
  void executor_loop(std::uint32_t w);
  void wait_sync(std::uint32_t t, std::uint64_t b);
  std::unique_ptr<PlanBatch> plan_leader(std::uint32_t t, std::uint64_t b);
  std::unique_ptr<PlanBatch> plan_follower(std::uint32_t t, std::uint64_t b);
  void deliver(std::uint32_t t, std::unique_ptr<PlanBatch> batch, std::int64_t plan_start);
  void submit_replication(const std::shared_ptr<PlannerBatch>& pb, const PlanBatch& batch, Bytes raw);
  void finalize(std::uint64_t b);
  void apply_acks(const EqAck& ack);
  void record_status(std::uint64_t b, const Priority& from, std::vector<TxnId> aborted);
  void record_barrier(std::uint64_t b);
  std::optional<TxnStatus> foreign_status(const TxnId& id);  // mu_ held
  void send(MessageKind kind, NodeId to, std::uint64_t batch, Bytes body);
  void fail(const std::string& what);
  std::chrono::steady_clock::time_point deadline() const;
  template <class Pred>
  void await(std::unique_lock<std::mutex>& lk, Pred pred, const char* what, std::uint64_t b);
  template <class Fn>
  void guarded(Fn fn);

  Cluster& cluster_;
  NodeId id_;
  Partitioner partitioner_;
  std::unique_ptr<PartitionStore> store_;
  std::unique_ptr<Log> log_;
  Checkpoint checkpoint_;
  std::optional<std::filesystem::path> checkpoint_file_;
  std::unique_ptr<ReplicationLayer> replication_;
  FailureDetector detector_;

  std::vector<std::unique_ptr<PlannerState>> planners_;

  std::mutex batches_mu_;
  std::map<std::uint64_t, std::shared_ptr<NodeBatch>> batches_;

  // Commit-side state shared by acks, statuses, replication acks, barriers.
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::uint64_t, std::map<Priority, std::set<TxnId>>> statuses_;
  std::map<std::uint64_t, std::uint32_t> barriers_;
  std::uint64_t segment_first_ = 0;
  std::uint64_t exec_batch_ = 0;
  std::uint64_t end_batch_ = 0;
  std::uint32_t exec_arrivals_ = 0;

  std::vector<std::thread> threads_;
  std::atomic<bool> stop_{false};
};

class Cluster {
 public:
  explicit Cluster(ClusterConfig config);
  ~Cluster();
  Cluster(const Cluster&) = delete;
  Cluster& operator=(const Cluster&) = delete;

  const ClusterConfig& config() const noexcept { return config_; }
  Transport& transport() noexcept { return *transport_; }
  Node& node(NodeId id) { return *grid_.at(id.row).at(id.col); }
  const Node& node(NodeId id) const { return *grid_.at(id.row).at(id.col); }
  std::uint64_t next_batch() const noexcept { return next_batch_; }

  /// Runs the next `options.batches` batches to completion on every node.
  RunMetrics run(const TxnSource& source, SegmentOptions options);

  void script_crash(CrashScript c);

  /// Leader of `col` fails between segments: the surviving follower with the
  /// highest committed batch (lowest row on ties) takes over row 0 and the
  /// old leader rejoins as a follower. Returns the row that was elected.
  std::uint32_t fail_over(std::uint32_t col);

  /// Every (row, col) pair's store, leader row first.
  bool replicas_converged() const;

  // Recorded when config.record_outcomes is set.
  std::vector<Transaction> planned_transactions() const;
  std::map<TxnId, Decision> decisions(std::uint32_t row) const;
  std::vector<TraceEntry> trace() const { return trace_.merged(); }
  /// Tick at which the replication layer confirmed (batch, priority).
  std::map<std::pair<std::uint64_t, Priority>, std::uint64_t> replication_ticks() const;

  TickClock& clock() noexcept { return clock_; }

 private:
  friend class Node;

  void record_decision(std::uint32_t row, const TransactionContext& tc, bool client_visible);
  void record_planned(const PlanBatch& batch);
  void record_replication(std::uint64_t b, const Priority& pri, std::uint64_t tick);
  void record_timings(const BatchTimings& t);
  void count_rejected();
  bool crash_scheduled(NodeId id, std::uint64_t b) const;
  void fatal(const std::string& what);
  void start_heartbeats();

  ClusterConfig config_;
  std::unique_ptr<Transport> transport_;
  std::unique_ptr<Broker> broker_;
  mutable std::shared_mutex grid_mu_;
  std::vector<std::vector<std::unique_ptr<Node>>> grid_;
  // Client queue per leader planner, indexed col * planners + thread.
  std::vector<std::unique_ptr<ClientTransactionQueue>> queues_;
  std::uint64_t next_batch_ = 0;
  std::vector<CrashScript> crashes_;

  TickClock clock_;
  ExecutionTrace trace_{clock_};

  mutable std::mutex rec_mu_;
  std::vector<Transaction> planned_;
  std::vector<std::map<TxnId, Decision>> decisions_;
  std::map<std::pair<std::uint64_t, Priority>, std::uint64_t> repl_ticks_;
  std::vector<double> latencies_;
  std::vector<BatchTimings> timings_;
  std::uint64_t committed_ = 0;
  std::uint64_t aborted_ = 0;
  std::uint64_t planned_count_ = 0;
  std::uint64_t rejected_ = 0;

  std::mutex fatal_mu_;
  std::optional<std::string> fatal_;

  std::atomic<bool> hb_stop_{false};
  std::vector<std::thread> heartbeat_threads_;
};

}  // namespace qrstore
