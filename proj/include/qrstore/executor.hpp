#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <unordered_map>
#include <vector>

#include "qrstore/context.hpp"
#include "qrstore/core.hpp"
#include "qrstore/store.hpp"

namespace qrstore {

/// An await exceeded its watchdog budget.
class WatchdogTimeout : public Error {
 public:
  using Error::Error;
};

/// A wait was abandoned because the owner is shutting down.
class Cancelled : public Error {
 public:
  using Error::Error;
};

/// Monotonic logical clock shared by trace producers.
class TickClock {
 public:
  std::uint64_t next() noexcept { return ticks_.fetch_add(1, std::memory_order_acq_rel) + 1; }
  std::uint64_t now() const noexcept { return ticks_.load(std::memory_order_acquire); }

 private:
  std::atomic<std::uint64_t> ticks_{0};
};

struct TraceEntry {
  std::uint32_t row = 0;
  Priority priority;
  std::uint32_t partition = 0;
  std::uint32_t subrange = 0;
  TxnId txn;
  std::uint32_t op_index = 0;
  OpRole role = OpRole::Primary;
  Key key;
  std::uint64_t tick = 0;
};

/// Append-only per-thread logs of executed operations.
class ExecutionTrace {
 public:
  class Writer {
   public:
    void append(TraceEntry e) {
      e.tick = clock_->next();
      log_->push_back(e);
    }

   private:
    friend class ExecutionTrace;
    Writer(TickClock* clock, std::vector<TraceEntry>* log) : clock_(clock), log_(log) {}
    TickClock* clock_;
    std::vector<TraceEntry>* log_;
  };

  explicit ExecutionTrace(TickClock& clock) : clock_(&clock) {}

  /// Each executor thread takes its own writer; writers stay valid for the
  /// trace's lifetime.
  Writer writer();
  /// All entries of all threads, ordered by tick. Call after writers stop.
  std::vector<TraceEntry> merged() const;

 private:
  TickClock* clock_;
  mutable std::mutex mu_;
  std::vector<std::unique_ptr<std::vector<TraceEntry>>> logs_;
};

struct WriteRecord {
  TxnId txn;
  Bytes before;  // value prior to txn's first write of the key
};

struct KeyHistory {
  std::optional<TxnId> last_writer;
  std::optional<TxnId> last_accessor;
  std::vector<WriteRecord> writes;  // execution order
};

/// Per-batch speculative-execution bookkeeping for one sub-range.
struct SlotState {
  std::unordered_map<std::uint64_t, KeyHistory> keys;
};

struct DependencyValue {
  TxnId txn;
  std::uint32_t op_index = 0;
  Bytes value;

  friend bool operator==(const DependencyValue&, const DependencyValue&) = default;
};

/// Cross-fragment values awaited by RMW operations of one batch on one node.
class DependencyBoard {
 public:
  void put(DependencyValue v);
  /// Blocks until the value for (txn, op) arrives. Throws WatchdogTimeout at
  /// `deadline`, Cancelled if `stop` becomes true.
  Bytes wait(const TxnId& txn, std::uint32_t op_index, std::chrono::steady_clock::time_point deadline,
             const std::atomic<bool>* stop = nullptr);
  void wake();
  std::size_t pending() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::pair<TxnId, std::uint32_t>, Bytes> values_;
};

struct SlotClaim {
  std::size_t priority_index = 0;
  std::uint32_t subrange = 0;
  const ExecutionQueue* eq = nullptr;
};

/// Node-local part of the batch metadata: one EQ slot per (planner priority,
/// sub-range) of this node's partition. Every planner publishes exactly once
/// per batch, possibly with no EQs.
class BatchMetadata {
 public:
  BatchMetadata(std::uint64_t batch_id, std::uint32_t partition, std::vector<Priority> priorities,
                std::uint32_t subranges);

  std::uint64_t batch_id() const noexcept { return batch_id_; }
  std::uint32_t partition() const noexcept { return partition_; }
  const std::vector<Priority>& priorities() const noexcept { return priorities_; }

  /// Single-assignment publish of a planner's contribution. Returns false if
  /// that planner already published (re-delivery is a no-op).
  bool publish(const Priority& from, std::vector<ExecutionQueue> eqs);

  /// Exclusive claim of the highest-priority EQ whose sub-range has no pending
  /// higher-priority EQ. nullopt when nothing is eligible right now.
  std::optional<SlotClaim> get_top();
  /// Blocking get_top. Returns nullopt once done() or when `stop` is set.
  std::optional<SlotClaim> wait_top(std::chrono::steady_clock::time_point deadline,
                                    const std::atomic<bool>* stop = nullptr);
  void complete(const SlotClaim& claim);

  /// True iff every planner published and every non-empty slot completed.
  bool done();
  bool all_published() const;
  bool slot_completed(const Priority& p, std::uint32_t subrange) const;
  void wake();

 private:
  enum class Slot : std::uint8_t { Unknown, Empty, Ready, Claimed, Completed };

  std::size_t index_of(const Priority& p) const;
  Slot& slot(std::size_t pi, std::uint32_t s) { return slots_[pi * subranges_ + s]; }
  const Slot& slot(std::size_t pi, std::uint32_t s) const { return slots_[pi * subranges_ + s]; }
  void advance_locked(std::uint32_t s);
  std::optional<SlotClaim> top_locked();
  bool done_locked();

  std::uint64_t batch_id_;
  std::uint32_t partition_;
  std::vector<Priority> priorities_;  // ascending: index 0 is the highest priority
  std::uint32_t subranges_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Slot> slots_;
  std::vector<std::optional<ExecutionQueue>> eqs_;
  std::vector<bool> published_;
  std::size_t published_count_ = 0;
  std::vector<std::size_t> cursor_;
  std::vector<bool> busy_;
  std::size_t claims_ = 0;
};

/// What an executor thread needs from its node.
struct ExecutionEnv {
  std::uint32_t row = 0;
  PartitionStore* store = nullptr;
  const Partitioner* partitioner = nullptr;
  std::vector<SlotState>* slots = nullptr;  // indexed by sub-range
  DependencyBoard* deps = nullptr;
  // Ships a dependency value to the node owning `partition` (never local).
  std::function<void(DependencyValue, std::uint32_t partition)> send_dependency;
  // sendAck for remote EQs, updateTC for local ones.
  std::function<void(const ExecutionQueue&, EqAck)> finish;
  ExecutionTrace* trace = nullptr;
  std::chrono::milliseconds watchdog{10'000};
  const std::atomic<bool>* stop = nullptr;
  std::chrono::nanoseconds op_cost{0};  // simulated work per operation
};

/// Speculatively executes one fragment against the store, recording
/// before-images, read-from and commit-order edges.
AckEntry execute_fragment(const ExecutionQueue& q, const Fragment& f, ExecutionEnv& env,
                          ExecutionTrace::Writer* trace = nullptr);

/// Routes a produced value to the consumer's node; local consumers go
/// straight to the dependency board.
void resolve_dependency(DependencyValue v, Key consumer_key, ExecutionEnv& env);

/// Builds the EQ's acknowledgement and hands it to env.finish.
void finish_eq(const ExecutionQueue& q, std::vector<AckEntry> entries, ExecutionEnv& env);

/// Worker loop: claim, drain, ack, until the batch is done. Returns the number
/// of EQs this thread executed.
std::size_t execute_batch(BatchMetadata& bm, ExecutionEnv& env, std::uint32_t tid);

}  // namespace qrstore
