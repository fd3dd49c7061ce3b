#include "qrstore/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "qrstore/serialization.hpp"

namespace qrstore {

const char* to_string(MessageKind k) noexcept {
  switch (k) {
    case MessageKind::ClientTxn: return "CLIENT_TXN";
    case MessageKind::ClientResp: return "CLIENT_RESP";
    case MessageKind::RemoteEq: return "REMOTE_EQ";
    case MessageKind::EqAck: return "EQ_ACK";
    case MessageKind::DepValue: return "DEP_VALUE";
    case MessageKind::ReplData: return "REPL_DATA";
    case MessageKind::ReplAck: return "REPL_ACK";
    case MessageKind::Barrier: return "BARRIER";
    case MessageKind::Heartbeat: return "HEARTBEAT";
    case MessageKind::TxnStatus: return "TXN_STATUS";
  }
  return "?";
}

std::string to_string(const NodeId& n) { return "n" + std::to_string(n.row) + "." + std::to_string(n.col); }

Bytes encode_frame(const Message& m) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(kFrameHeader + m.body.size()));
  w.u8(static_cast<std::uint8_t>(m.kind));
  w.u32(m.sender.row);
  w.u32(m.sender.col);
  w.u32(m.destination.row);
  w.u32(m.destination.col);
  w.u64(m.batch_id);
  w.u32(static_cast<std::uint32_t>(m.body.size()));
  w.raw(m.body);
  return w.take();
}

Message decode_frame(std::span<const std::uint8_t> frame) {
  ByteReader r(frame);
  const std::uint32_t len = r.u32();
  if (len != r.remaining()) throw DecodeError("frame length mismatch");
  Message m;
  const std::uint8_t kind = r.u8();
  if (kind >= kMessageKinds) throw DecodeError("unknown message kind");
  m.kind = static_cast<MessageKind>(kind);
  m.sender.row = r.u32();
  m.sender.col = r.u32();
  m.destination.row = r.u32();
  m.destination.col = r.u32();
  m.batch_id = r.u64();
  const std::uint32_t body = r.u32();
  if (body != r.remaining()) throw DecodeError("frame body length mismatch");
  m.body = r.raw(body);
  return m;
}

// ---------------------------------------------------------------------------

void Transport::set_down(NodeId id, bool down) {
  std::lock_guard lk(mu_);
  if (down) {
    down_.insert(id);
  } else {
    down_.erase(id);
  }
}

bool Transport::is_down(NodeId id) const {
  std::lock_guard lk(mu_);
  return down_.contains(id);
}

void Transport::set_faults(LinkFaults faults) {
  std::lock_guard lk(mu_);
  faults_ = std::move(faults);
}

void Transport::enable_capture(bool on) {
  std::lock_guard lk(mu_);
  capture_ = on;
}

std::vector<CapturedMessage> Transport::captured() const {
  std::lock_guard lk(mu_);
  return captured_;
}

std::array<std::uint64_t, kMessageKinds> Transport::counts() const {
  std::array<std::uint64_t, kMessageKinds> out{};
  for (std::size_t i = 0; i < kMessageKinds; ++i) out[i] = counts_[i].load();
  return out;
}

void Transport::reset_stats() {
  std::lock_guard lk(mu_);
  captured_.clear();
  for (auto& c : counts_) c.store(0);
}

bool Transport::admit(Message& m) {
  std::function<bool(const Message&)> drop;
  std::function<void(Message&)> mutate;
  {
    std::lock_guard lk(mu_);
    if (down_.contains(m.sender) || down_.contains(m.destination)) return false;
    drop = faults_.drop;
    mutate = faults_.mutate;
  }
  if (drop && drop(m)) return false;
  if (mutate) mutate(m);
  counts_[static_cast<std::size_t>(m.kind)].fetch_add(1, std::memory_order_relaxed);
  std::lock_guard lk(mu_);
  if (capture_) captured_.push_back(CapturedMessage{m.kind, m.sender, m.destination, m.batch_id});
  return true;
}

std::chrono::microseconds Transport::latency_for(const Message& m) const {
  std::lock_guard lk(mu_);
  if (m.kind == MessageKind::ReplData) return faults_.group_latency;
  if (is_group_traffic(m.kind)) return std::chrono::microseconds{0};
  return faults_.intra_latency;
}

// ---------------------------------------------------------------------------

Inbox::Inbox(Transport::Handler handler) : handler_(std::move(handler)) {}

Inbox::~Inbox() { stop(); }

void Inbox::start() {
  std::lock_guard lk(mu_);
  if (thread_.joinable()) return;
  stopping_ = false;
  thread_ = std::thread([this] { run(); });
}

void Inbox::stop() {
  {
    std::lock_guard lk(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

void Inbox::push(Message m, std::chrono::steady_clock::time_point due) {
  {
    std::lock_guard lk(mu_);
    auto& last = last_due_[m.sender];
    if (due < last) due = last;
    last = due;
    q_.push(Entry{due, seq_++, std::move(m)});
  }
  cv_.notify_all();
}

void Inbox::run() {
  std::unique_lock lk(mu_);
  for (;;) {
    if (stopping_) return;
    if (q_.empty()) {
      cv_.wait(lk);
      continue;
    }
    const auto due = q_.top().due;
    if (std::chrono::steady_clock::now() < due) {
      cv_.wait_until(lk, due);
      continue;
    }
    Message m = std::move(const_cast<Entry&>(q_.top()).msg);
    q_.pop();
    lk.unlock();
    handler_(std::move(m));
    lk.lock();
  }
}

// ---------------------------------------------------------------------------

void LoopbackTransport::attach(NodeId id, Handler handler) {
  inboxes_[id] = std::make_unique<Inbox>(std::move(handler));
}

void LoopbackTransport::start() {
  for (auto& [id, inbox] : inboxes_) inbox->start();
}

void LoopbackTransport::stop() {
  for (auto& [id, inbox] : inboxes_) inbox->stop();
}

void LoopbackTransport::send(Message m) {
  auto it = inboxes_.find(m.destination);
  if (it == inboxes_.end()) throw Error("no route to " + to_string(m.destination));
  if (!admit(m)) return;
  const auto due = std::chrono::steady_clock::now() + latency_for(m);
  it->second->push(std::move(m), due);
}

// ---------------------------------------------------------------------------

struct TcpTransport::Endpoint {
  NodeId id;
  std::unique_ptr<Inbox> inbox;
  int listen_fd = -1;
  std::uint16_t port = 0;
  std::thread acceptor;
  std::mutex mu;
  std::vector<int> conns;
  std::vector<std::thread> readers;
};

namespace {

bool write_all(int fd, const std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::send(fd, data, n, MSG_NOSIGNAL);
    if (k < 0 && errno == EINTR) continue;
    if (k <= 0) return false;
    data += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

bool read_all(int fd, std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::recv(fd, data, n, 0);
    if (k < 0 && errno == EINTR) continue;
    if (k <= 0) return false;
    data += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

}  // namespace

TcpTransport::TcpTransport() = default;

TcpTransport::~TcpTransport() { stop(); }

void TcpTransport::attach(NodeId id, Handler handler) {
  auto ep = std::make_unique<Endpoint>();
  ep->id = id;
  ep->inbox = std::make_unique<Inbox>(std::move(handler));
  endpoints_[id] = std::move(ep);
}

void TcpTransport::start() {
  if (running_.exchange(true)) return;
  for (auto& [id, ep] : endpoints_) {
    ep->listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (ep->listen_fd < 0) throw Error("socket: " + std::string(std::strerror(errno)));
    int one = 1;
    ::setsockopt(ep->listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(ep->listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(ep->listen_fd, 64) != 0) {
      throw Error("bind/listen: " + std::string(std::strerror(errno)));
    }
    socklen_t len = sizeof addr;
    ::getsockname(ep->listen_fd, reinterpret_cast<sockaddr*>(&addr), &len);
    ep->port = ntohs(addr.sin_port);
    ep->inbox->start();
    Endpoint* raw = ep.get();
    ep->acceptor = std::thread([this, raw] { accept_loop(*raw); });
  }
}

void TcpTransport::stop() {
  if (!running_.exchange(false)) return;
  {
    std::lock_guard lk(links_mu_);
    for (auto& [key, l] : links_) {
      std::lock_guard ll(l->mu);
      if (l->fd >= 0) {
        ::shutdown(l->fd, SHUT_RDWR);
        ::close(l->fd);
        l->fd = -1;
      }
    }
    links_.clear();
  }
  for (auto& [id, ep] : endpoints_) {
    ::shutdown(ep->listen_fd, SHUT_RDWR);
    ::close(ep->listen_fd);
    if (ep->acceptor.joinable()) ep->acceptor.join();
    {
      std::lock_guard lk(ep->mu);
      for (int fd : ep->conns) ::shutdown(fd, SHUT_RDWR);
    }
    for (auto& t : ep->readers) {
      if (t.joinable()) t.join();
    }
    for (int fd : ep->conns) ::close(fd);
    ep->conns.clear();
    ep->readers.clear();
    ep->inbox->stop();
  }
}

void TcpTransport::accept_loop(Endpoint& ep) {
  while (running_) {
    const int fd = ::accept(ep.listen_fd, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lk(ep.mu);
    ep.conns.push_back(fd);
    ep.readers.emplace_back([this, &ep, fd] { read_loop(ep, fd); });
  }
}

void TcpTransport::read_loop(Endpoint& ep, int fd) {
  for (;;) {
    std::uint8_t prefix[4];
    if (!read_all(fd, prefix, 4)) return;
    const std::uint32_t len = static_cast<std::uint32_t>(prefix[0]) | static_cast<std::uint32_t>(prefix[1]) << 8 |
                              static_cast<std::uint32_t>(prefix[2]) << 16 | static_cast<std::uint32_t>(prefix[3]) << 24;
    Bytes frame(4 + static_cast<std::size_t>(len));
    std::copy(prefix, prefix + 4, frame.begin());
    if (!read_all(fd, frame.data() + 4, len)) return;
    Message m = decode_frame(frame);
    const auto due = std::chrono::steady_clock::now() + latency_for(m);
    ep.inbox->push(std::move(m), due);
  }
}

TcpTransport::Link& TcpTransport::link(NodeId from, NodeId to) {
  std::lock_guard lk(links_mu_);
  auto& slot = links_[{from, to}];
  if (!slot) slot = std::make_unique<Link>();
  return *slot;
}

void TcpTransport::send(Message m) {
  auto it = endpoints_.find(m.destination);
  if (it == endpoints_.end()) throw Error("no route to " + to_string(m.destination));
  if (!admit(m)) return;
  Link& l = link(m.sender, m.destination);
  const Bytes frame = encode_frame(m);
  std::lock_guard lk(l.mu);
  if (l.fd < 0) {
    l.fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(it->second->port);
    if (::connect(l.fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      ::close(l.fd);
      l.fd = -1;
      throw Error("connect to " + to_string(m.destination) + ": " + std::strerror(errno));
    }
    int one = 1;
    ::setsockopt(l.fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  if (!write_all(l.fd, frame.data(), frame.size())) throw Error("send to " + to_string(m.destination) + " failed");
}

std::uint16_t TcpTransport::port_of(NodeId id) const { return endpoints_.at(id)->port; }

}  // namespace qrstore
