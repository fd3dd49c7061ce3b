#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <unordered_set>
#include <vector>

#include "qrstore/context.hpp"
#include "qrstore/core.hpp"

namespace qrstore {

/// FIFO of client transactions feeding one planner thread.
class ClientTransactionQueue {
 public:
  void push(Transaction txn);
  /// Pops the head, waiting until `deadline`. Returns nullopt on timeout or
  /// when the queue is closed and drained.
  std::optional<Transaction> pop_until(std::chrono::steady_clock::time_point deadline);
  std::optional<Transaction> try_pop();
  void close();
  /// Reopens a closed queue (between run segments).
  void reopen();
  bool closed_and_empty() const;
  std::size_t size() const;
  /// Blocks while size() >= limit (client back-pressure). Returns false on close.
  bool wait_below(std::size_t limit, std::chrono::steady_clock::time_point deadline);

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Transaction> q_;
  bool closed_ = false;
};

struct SlotRef {
  std::uint32_t partition = 0;
  std::uint32_t subrange = 0;

  friend auto operator<=>(const SlotRef&, const SlotRef&) = default;
};

struct KeyLimits {
  std::uint64_t records_per_partition = 0;  // 0 = unchecked
  std::uint32_t record_size = 0;            // 0 = unchecked
};

/// Result of planning a single transaction: its context plus one fragment per
/// touched (partition, sub-range), in slot order.
struct PlannedTxn {
  TransactionContext context;
  std::vector<std::pair<SlotRef, Fragment>> fragments;
};

/// Splits `txn` (whose id is already assigned) into fragments. Throws
/// ValidationError for empty transactions, malformed operations, or keys
/// outside `limits`.
PlannedTxn plan_message(const Transaction& txn, const Partitioner& partitioner, const KeyLimits& limits = {});

/// EQs and contexts one planner thread builds for one batch.
class PlanBatch {
 public:
  PlanBatch(std::uint64_t batch_id, Priority owner);

  std::uint64_t batch_id() const noexcept { return batch_id_; }
  const Priority& owner() const noexcept { return owner_; }
  std::size_t planned() const noexcept { return shard_.txns.size(); }

  /// Appends every fragment to its slot's EQ (created on first touch).
  /// Throws ValidationError on a duplicate or out-of-order transaction id.
  void merge(PlannedTxn planned);

  const std::map<SlotRef, ExecutionQueue>& eqs() const noexcept { return eqs_; }
  const TcShard& contexts() const noexcept { return shard_; }
  TcShard& contexts() noexcept { return shard_; }

  /// Planned transactions, kept only when recording is enabled.
  void set_recording(bool on) noexcept { recording_ = on; }
  void record(const Transaction& txn) {
    if (recording_) transactions_.push_back(txn);
  }
  const std::vector<Transaction>& transactions() const noexcept { return transactions_; }

  /// Rebuilds a batch from its replicated parts.
  static PlanBatch from_parts(std::uint64_t batch_id, Priority owner, std::vector<ExecutionQueue> eqs,
                              std::vector<TransactionContext> contexts);

 private:
  std::uint64_t batch_id_;
  Priority owner_;
  std::map<SlotRef, ExecutionQueue> eqs_;
  TcShard shard_;
  std::unordered_set<TxnId, TxnIdHash> seen_;
  bool recording_ = false;
  std::vector<Transaction> transactions_;
};

inline void merge_eqs(PlanBatch& batch, PlannedTxn planned) { batch.merge(std::move(planned)); }

struct ReadyPolicy {
  std::size_t batch_size = 20'000;
  std::chrono::milliseconds timeout{50};
};

/// Count-or-timeout rule. An empty batch is ready only once its input stream
/// is closed and drained.
bool batch_ready(const PlanBatch& batch, const ReadyPolicy& policy, std::chrono::steady_clock::duration elapsed,
                 bool input_closed_and_empty = false);

/// Where a planned batch is delivered.
class DeliveryPort {
 public:
  virtual ~DeliveryPort() = default;
  /// Publishes the planner's EQs for the local partition (possibly none).
  virtual void set_local_eqs(const PlanBatch& batch, std::vector<ExecutionQueue> eqs) = 0;
  /// Sends the planner's EQs for `partition` (possibly none) to its owner.
  virtual void send_remote_eqs(std::uint32_t partition, const PlanBatch& batch, std::vector<ExecutionQueue> eqs) = 0;
  /// Submits the batch to the replication layer without waiting.
  virtual void replicate_data(const PlanBatch& batch) = 0;
};

/// Groups the batch's EQs by partition. Every partition gets an entry, so the
/// owner learns this planner's contribution is complete even when empty.
std::vector<std::vector<ExecutionQueue>> eqs_by_partition(const PlanBatch& batch, std::uint32_t partitions);

/// Local publish, then remote sends, then (optionally) replication.
void deliver_batch(const PlanBatch& batch, std::uint32_t local_partition, std::uint32_t partitions, DeliveryPort& port,
                   bool replicate);

}  // namespace qrstore
