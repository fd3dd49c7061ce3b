#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <queue>
#include <set>
#include <span>
#include <thread>
#include <vector>

#include "qrstore/core.hpp"

namespace qrstore {

enum class MessageKind : std::uint8_t {
  ClientTxn = 0,
  ClientResp,
  RemoteEq,
  EqAck,
  DepValue,
  ReplData,
  ReplAck,
  Barrier,
  Heartbeat,
  TxnStatus,
};
inline constexpr std::size_t kMessageKinds = 10;

const char* to_string(MessageKind k) noexcept;

/// Replication-group (column) traffic; everything else stays in a row.
constexpr bool is_group_traffic(MessageKind k) noexcept {
  return k == MessageKind::ReplData || k == MessageKind::ReplAck || k == MessageKind::Heartbeat;
}

/// Grid position: row = cluster instance (0 is the leader instance),
/// col = partition / replication group.
struct NodeId {
  std::uint32_t row = 0;
  std::uint32_t col = 0;

  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

std::string to_string(const NodeId& n);

struct Message {
  MessageKind kind = MessageKind::Heartbeat;
  NodeId sender;
  NodeId destination;
  std::uint64_t batch_id = 0;
  Bytes body;

  friend bool operator==(const Message&, const Message&) = default;
};

/// Header after the 4-byte length prefix: kind u8, sender row/col u32,
/// destination row/col u32, batch u64, body length u32.
inline constexpr std::size_t kFrameHeader = 1 + 4 * 4 + 8 + 4;

/// 4-byte little-endian length prefix + header + body.
Bytes encode_frame(const Message& m);
/// Decodes one frame (length prefix included). Throws DecodeError.
Message decode_frame(std::span<const std::uint8_t> frame);

struct CapturedMessage {
  MessageKind kind;
  NodeId sender;
  NodeId destination;
  std::uint64_t batch_id;
};

struct LinkFaults {
  std::chrono::microseconds intra_latency{0};
  std::chrono::microseconds group_latency{0};  // ReplData only
  std::function<bool(const Message&)> drop;
  std::function<void(Message&)> mutate;
};

class Transport {
 public:
  using Handler = std::function<void(Message)>;

  virtual ~Transport() = default;

  virtual void attach(NodeId id, Handler handler) = 0;
  virtual void start() = 0;
  virtual void stop() = 0;
  virtual void send(Message m) = 0;

  /// Crashed nodes neither send nor receive.
  void set_down(NodeId id, bool down);
  bool is_down(NodeId id) const;
  void set_faults(LinkFaults faults);
  void enable_capture(bool on);
  std::vector<CapturedMessage> captured() const;
  std::array<std::uint64_t, kMessageKinds> counts() const;
  void reset_stats();

 protected:
  /// Applies crash, drop, mutate, statistics and capture. False = dropped.
  bool admit(Message& m);
  std::chrono::microseconds latency_for(const Message& m) const;

 private:
  mutable std::mutex mu_;
  std::set<NodeId> down_;
  LinkFaults faults_;
  bool capture_ = false;
  std::vector<CapturedMessage> captured_;
  std::array<std::atomic<std::uint64_t>, kMessageKinds> counts_{};
};

/// Delay-ordered mailbox with one delivery thread: the node's communication
/// thread.
class Inbox {
 public:
  explicit Inbox(Transport::Handler handler);
  ~Inbox();
  Inbox(const Inbox&) = delete;
  Inbox& operator=(const Inbox&) = delete;

  void start();
  void stop();
  /// Delivery time is clamped to be no earlier than the previous message on
  /// the same link, which keeps per-link FIFO order.
  void push(Message m, std::chrono::steady_clock::time_point due);

 private:
  struct Entry {
    std::chrono::steady_clock::time_point due;
    std::uint64_t seq;
    Message msg;
    bool operator>(const Entry& o) const { return due != o.due ? due > o.due : seq > o.seq; }
  };

  void run();

  Transport::Handler handler_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> q_;
  std::map<NodeId, std::chrono::steady_clock::time_point> last_due_;
  std::uint64_t seq_ = 0;
  bool stopping_ = false;
  std::thread thread_;
};

/// In-process channels.
class LoopbackTransport : public Transport {
 public:
  void attach(NodeId id, Handler handler) override;
  void start() override;
  void stop() override;
  void send(Message m) override;

 private:
  std::map<NodeId, std::unique_ptr<Inbox>> inboxes_;
};

/// Every node listens on 127.0.0.1; frames travel over per-link TCP
/// connections and land in the same inbox machinery.
class TcpTransport : public Transport {
 public:
  TcpTransport();
  ~TcpTransport() override;

  void attach(NodeId id, Handler handler) override;
  void start() override;
  void stop() override;
  void send(Message m) override;

  std::uint16_t port_of(NodeId id) const;

 private:
  struct Endpoint;
  struct Link {
    std::mutex mu;
    int fd = -1;
  };

  void accept_loop(Endpoint& ep);
  void read_loop(Endpoint& ep, int fd);
  Link& link(NodeId from, NodeId to);

  std::map<NodeId, std::unique_ptr<Endpoint>> endpoints_;
  std::mutex links_mu_;
  std::map<std::pair<NodeId, NodeId>, std::unique_ptr<Link>> links_;
  std::atomic<bool> running_{false};
};

}  // namespace qrstore
