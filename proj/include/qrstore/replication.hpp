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
#include <queue>
#include <set>
#include <span>
#include <thread>
#include <vector>

#include "qrstore/context.hpp"
#include "qrstore/core.hpp"
#include "qrstore/planner.hpp"
#include "qrstore/serialization.hpp"
#include "qrstore/transport.hpp"

namespace qrstore {

/// Checksum or decompression failure on a replicated payload.
class ChecksumError : public DecodeError {
 public:
  using DecodeError::DecodeError;
};

struct ReplicationMeta {
  std::uint64_t batch_id = 0;
  Priority priority;
  std::uint32_t raw_length = 0;   // serialized body before compression
  std::uint32_t wire_length = 0;  // body as carried (compressed or not)
  bool compressed = false;
  std::uint64_t checksum = 0;  // FNV-1a over the carried body

  friend bool operator==(const ReplicationMeta&, const ReplicationMeta&) = default;
};

struct ReplicationPayload {
  ReplicationMeta meta;
  Bytes body;  // carried bytes

  friend bool operator==(const ReplicationPayload&, const ReplicationPayload&) = default;
};

/// Body: batch, priority, EQs (all partitions), TC shard.
Bytes serialize_payload(std::uint64_t batch_id, const Priority& priority, const std::vector<ExecutionQueue>& eqs,
                        const TcShard& shard);
Bytes serialize_payload(const PlanBatch& batch);

struct DecodedPayload {
  std::uint64_t batch_id = 0;
  Priority priority;
  std::vector<ExecutionQueue> eqs;
  TcShard shard;
};
DecodedPayload deserialize_payload(std::span<const std::uint8_t> body);

void encode(ByteWriter& w, const TransactionContext& tc);
TransactionContext decode_context(ByteReader& r);

/// Builds meta and carried body for a serialized batch.
ReplicationPayload make_payload(std::uint64_t batch_id, const Priority& priority, Bytes raw, bool compress);
/// Verifies the checksum and undoes compression. Throws ChecksumError.
Bytes open_payload(const ReplicationPayload& p);

inline constexpr std::uint32_t kReplMagic = 0x51525354;  // "TSRQ" on the wire
inline constexpr std::uint16_t kReplVersion = 1;
inline constexpr std::size_t kReplHeader = 4 + 2 + 8 + 4 + 4 + 2 + 4 + 8;
inline constexpr std::uint16_t kFlagCompressed = 1;
inline constexpr std::uint16_t kFlagNack = 2;

/// REPL_DATA / REPL_ACK body: fixed header then the carried body (empty for
/// acks).
Bytes encode_repl_message(const ReplicationPayload& p, std::uint16_t extra_flags = 0);
/// Parses header and body; does not verify the checksum.
std::pair<ReplicationPayload, std::uint16_t> decode_repl_message(std::span<const std::uint8_t> wire);

/// Total copies (leader included) that must hold a payload: a majority of
/// the rf+1 replicas.
constexpr std::uint32_t required_acks(std::uint32_t rf) noexcept { return (rf + 1) / 2 + 1; }

/// Ack counter for one payload. Acks from the same replica count once.
class QuorumState {
 public:
  explicit QuorumState(std::uint32_t required) : required_(required) {}

  /// Returns true exactly once: on the ack that reaches the quorum.
  bool ack(std::uint32_t replica);
  std::uint32_t acks() const noexcept { return static_cast<std::uint32_t>(from_.size()); }
  std::uint32_t required() const noexcept { return required_; }
  bool confirmed() const noexcept { return acks() >= required_; }

 private:
  std::uint32_t required_;
  std::set<std::uint32_t> from_;
};

using ReplicateCallback = std::function<void(bool success)>;
using ReceiveCallback = std::function<void(const ReplicationMeta&, Bytes raw_body)>;

struct ReplicationStats {
  std::uint64_t payloads = 0;
  std::uint64_t raw_bytes = 0;
  std::uint64_t wire_bytes = 0;
  std::uint64_t resends = 0;
  std::uint64_t checksum_failures = 0;
};

/// Leader side: replicate_data. Follower side: receive_data.
class ReplicationLayer {
 public:
  virtual ~ReplicationLayer() = default;

  /// Returns at once; `done` fires exactly once.
  virtual void replicate_data(std::uint64_t batch_id, const Priority& priority, Bytes raw, ReplicateCallback done) = 0;
  /// `cb` fires exactly once with the verified raw body; per priority in
  /// ascending batch order.
  virtual void receive_data(std::uint64_t batch_id, const Priority& priority, ReceiveCallback cb) = 0;
  /// Raw body of a payload this replica holds.
  virtual std::optional<Bytes> fetch(std::uint64_t batch_id, const Priority& priority) const = 0;
  /// Forgets payloads of batches below `batch_id`.
  virtual void prune_below(std::uint64_t batch_id) = 0;
  virtual ReplicationStats stats() const = 0;
  virtual void stop() {}
};

/// Follower-side buffer: holds verified payloads and releases them to
/// subscribers in ascending batch order per priority.
class OrderedDelivery {
 public:
  /// Returns false for a duplicate.
  bool offer(const ReplicationMeta& meta, Bytes raw);
  void subscribe(std::uint64_t batch_id, const Priority& priority, ReceiveCallback cb);
  std::optional<Bytes> held(std::uint64_t batch_id, const Priority& priority) const;
  bool holds(std::uint64_t batch_id, const Priority& priority) const;
  void prune_below(std::uint64_t batch_id);

 private:
  struct PerPriority {
    std::optional<std::uint64_t> next;
    std::map<std::uint64_t, std::pair<ReplicationMeta, Bytes>> held;
    std::map<std::uint64_t, ReceiveCallback> subs;
    std::set<std::uint64_t> delivered;
  };
  using Ready = std::vector<std::tuple<ReceiveCallback, ReplicationMeta, Bytes>>;
  void drain_locked(PerPriority& pp, Ready& out);

  mutable std::mutex mu_;
  std::map<Priority, PerPriority> per_;
};

struct QuorumOptions {
  std::uint32_t rf = 0;
  bool compress = false;
  std::chrono::milliseconds timeout{10'000};
  std::uint32_t max_resends = 3;
};

/// Integrated quorum backend on top of the cluster transport. One endpoint
/// per node; the node forwards REPL_* messages to on_message.
class QuorumReplication : public ReplicationLayer {
 public:
  QuorumReplication(NodeId self, Transport& transport, QuorumOptions options);
  ~QuorumReplication() override;

  void replicate_data(std::uint64_t batch_id, const Priority& priority, Bytes raw, ReplicateCallback done) override;
  void receive_data(std::uint64_t batch_id, const Priority& priority, ReceiveCallback cb) override;
  std::optional<Bytes> fetch(std::uint64_t batch_id, const Priority& priority) const override;
  void prune_below(std::uint64_t batch_id) override;
  ReplicationStats stats() const override;
  void stop() override;

  void on_message(const Message& m);

 private:
  struct Pending {
    ReplicationPayload payload;
    QuorumState quorum;
    ReplicateCallback done;
    std::chrono::steady_clock::time_point deadline;
    std::map<std::uint32_t, std::uint32_t> resends;  // follower row -> count
  };

  void on_data(const Message& m);
  void on_ack(const Message& m);
  void send_data(const ReplicationPayload& p, std::uint32_t row);
  void timer_loop();

  NodeId self_;
  Transport& transport_;
  QuorumOptions options_;
  OrderedDelivery delivery_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::pair<std::uint64_t, Priority>, Pending> pending_;
  ReplicationStats stats_;
  bool stopping_ = false;
  std::thread timer_;
};

/// In-process stand-in for a coordination service: a single service thread
/// that confirms publishes and serves subscribers after a fixed latency.
class Broker {
 public:
  explicit Broker(std::chrono::microseconds service_latency = std::chrono::microseconds{0});
  ~Broker();
  Broker(const Broker&) = delete;
  Broker& operator=(const Broker&) = delete;

  void publish(ReplicationPayload p, ReplicateCallback done);
  /// Hands stored payloads to `deliver` once available.
  void subscribe(std::uint64_t batch_id, const Priority& priority,
                 std::function<void(const ReplicationPayload&)> deliver);
  std::optional<ReplicationPayload> get(std::uint64_t batch_id, const Priority& priority) const;
  void prune_below(std::uint64_t batch_id);
  void stop();

 private:
  struct Task {
    std::chrono::steady_clock::time_point due;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Task& o) const { return due != o.due ? due > o.due : seq > o.seq; }
  };
  void schedule(std::function<void()> fn);
  void run();

  std::chrono::microseconds latency_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::priority_queue<Task, std::vector<Task>, std::greater<>> tasks_;
  std::uint64_t seq_ = 0;
  std::map<std::pair<std::uint64_t, Priority>, ReplicationPayload> store_;
  std::map<std::pair<std::uint64_t, Priority>, std::vector<std::function<void(const ReplicationPayload&)>>> waiting_;
  bool stopping_ = false;
  std::thread thread_;
};

/// Middleware backend: every replica talks to the shared broker.
class MiddlewareReplication : public ReplicationLayer {
 public:
  MiddlewareReplication(Broker& broker, bool compress);

  void replicate_data(std::uint64_t batch_id, const Priority& priority, Bytes raw, ReplicateCallback done) override;
  void receive_data(std::uint64_t batch_id, const Priority& priority, ReceiveCallback cb) override;
  std::optional<Bytes> fetch(std::uint64_t batch_id, const Priority& priority) const override;
  void prune_below(std::uint64_t batch_id) override;
  ReplicationStats stats() const override;

 private:
  Broker& broker_;
  bool compress_;
  OrderedDelivery delivery_;
  mutable std::mutex mu_;
  ReplicationStats stats_;
};

}  // namespace qrstore
