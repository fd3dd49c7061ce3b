#include "qrstore/replication.hpp"

#include "qrstore/compression.hpp"

namespace qrstore {

void encode(ByteWriter& w, const TransactionContext& tc) {
  w.txn_id(tc.txn_id);
  w.u64(tc.client_id);
  w.u64(static_cast<std::uint64_t>(tc.arrival_ns));
  w.u32(tc.total_fragments);
  w.u32(tc.completed_fragments);
  w.u8(tc.aborted ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(tc.read_from.size()));
  for (const auto& id : tc.read_from) w.txn_id(id);
  w.u32(static_cast<std::uint32_t>(tc.commit_after.size()));
  for (const auto& id : tc.commit_after) w.txn_id(id);
  w.u8(static_cast<std::uint8_t>(tc.status));
  w.u64(tc.commit_seq);
}

TransactionContext decode_context(ByteReader& r) {
  TransactionContext tc;
  tc.txn_id = r.txn_id();
  tc.client_id = r.u64();
  tc.arrival_ns = static_cast<std::int64_t>(r.u64());
  tc.total_fragments = r.u32();
  tc.completed_fragments = r.u32();
  const std::uint8_t aborted = r.u8();
  if (aborted > 1) throw DecodeError("bad aborted flag");
  tc.aborted = aborted == 1;
  const std::uint32_t nr = r.count(24);
  for (std::uint32_t i = 0; i < nr; ++i) tc.read_from.push_back(r.txn_id());
  const std::uint32_t nc = r.count(24);
  for (std::uint32_t i = 0; i < nc; ++i) tc.commit_after.push_back(r.txn_id());
  const std::uint8_t status = r.u8();
  if (status > 2) throw DecodeError("bad txn status");
  tc.status = static_cast<TxnStatus>(status);
  tc.commit_seq = r.u64();
  return tc;
}

Bytes serialize_payload(std::uint64_t batch_id, const Priority& priority, const std::vector<ExecutionQueue>& eqs,
                        const TcShard& shard) {
  ByteWriter w;
  w.u64(batch_id);
  w.priority(priority);
  w.u32(static_cast<std::uint32_t>(eqs.size()));
  for (const auto& q : eqs) encode(w, q);
  w.u64(shard.batch_id);
  w.priority(shard.priority);
  w.u32(static_cast<std::uint32_t>(shard.txns.size()));
  for (const auto& tc : shard.txns) encode(w, tc);
  return w.take();
}

Bytes serialize_payload(const PlanBatch& batch) {
  std::vector<ExecutionQueue> eqs;
  eqs.reserve(batch.eqs().size());
  for (const auto& [slot, q] : batch.eqs()) eqs.push_back(q);
  return serialize_payload(batch.batch_id(), batch.owner(), eqs, batch.contexts());
}

DecodedPayload deserialize_payload(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  DecodedPayload out;
  out.batch_id = r.u64();
  out.priority = r.priority();
  const std::uint32_t neq = r.count(8);
  out.eqs.reserve(neq);
  for (std::uint32_t i = 0; i < neq; ++i) out.eqs.push_back(decode_eq(r));
  out.shard.batch_id = r.u64();
  out.shard.priority = r.priority();
  const std::uint32_t ntc = r.count(24);
  out.shard.txns.reserve(ntc);
  for (std::uint32_t i = 0; i < ntc; ++i) out.shard.txns.push_back(decode_context(r));
  r.expect_end();
  return out;
}

ReplicationPayload make_payload(std::uint64_t batch_id, const Priority& priority, Bytes raw, bool compress_body) {
  ReplicationPayload p;
  p.meta.batch_id = batch_id;
  p.meta.priority = priority;
  p.meta.raw_length = static_cast<std::uint32_t>(raw.size());
  p.meta.compressed = compress_body;
  p.body = compress_body ? compress(raw) : std::move(raw);
  p.meta.wire_length = static_cast<std::uint32_t>(p.body.size());
  p.meta.checksum = fnv1a64(p.body);
  return p;
}

Bytes open_payload(const ReplicationPayload& p) {
  if (p.body.size() != p.meta.wire_length || fnv1a64(p.body) != p.meta.checksum) {
    throw ChecksumError("payload checksum mismatch for batch " + std::to_string(p.meta.batch_id));
  }
  if (!p.meta.compressed) return p.body;
  try {
    Bytes raw = decompress(p.body);
    if (raw.size() != p.meta.raw_length) throw ChecksumError("decompressed length mismatch");
    return raw;
  } catch (const CompressionError& e) {
    throw ChecksumError(std::string("payload decompression failed: ") + e.what());
  }
}

Bytes encode_repl_message(const ReplicationPayload& p, std::uint16_t extra_flags) {
  ByteWriter w;
  w.u32(kReplMagic);
  w.u16(kReplVersion);
  w.u64(p.meta.batch_id);
  w.u32(p.meta.priority.node_rank);
  w.u32(p.meta.priority.thread_rank);
  w.u16(static_cast<std::uint16_t>((p.meta.compressed ? kFlagCompressed : 0) | extra_flags));
  w.u32(static_cast<std::uint32_t>(p.body.size()));
  w.u64(p.meta.checksum);
  w.raw(p.body);
  return w.take();
}

std::pair<ReplicationPayload, std::uint16_t> decode_repl_message(std::span<const std::uint8_t> wire) {
  ByteReader r(wire);
  if (r.u32() != kReplMagic) throw DecodeError("bad replication magic");
  if (r.u16() != kReplVersion) throw DecodeError("unsupported replication version");
  ReplicationPayload p;
  p.meta.batch_id = r.u64();
  p.meta.priority.node_rank = r.u32();
  p.meta.priority.thread_rank = r.u32();
  const std::uint16_t flags = r.u16();
  p.meta.compressed = (flags & kFlagCompressed) != 0;
  const std::uint32_t len = r.u32();
  p.meta.checksum = r.u64();
  p.body = r.raw(len);
  r.expect_end();
  p.meta.wire_length = len;
  p.meta.raw_length = len;
  if (p.meta.compressed && len >= 8) {
    ByteReader pre(std::span<const std::uint8_t>(p.body.data(), 8));
    p.meta.raw_length = static_cast<std::uint32_t>(pre.u64());
  }
  return {std::move(p), flags};
}

bool QuorumState::ack(std::uint32_t replica) {
  if (confirmed()) {
    from_.insert(replica);
    return false;
  }
  from_.insert(replica);
  return confirmed();
}

// ---------------------------------------------------------------------------

bool OrderedDelivery::offer(const ReplicationMeta& meta, Bytes raw) {
  Ready ready;
  {
    std::lock_guard lk(mu_);
    auto& pp = per_[meta.priority];
    if (pp.held.contains(meta.batch_id) || pp.delivered.contains(meta.batch_id)) return false;
    pp.held.emplace(meta.batch_id, std::make_pair(meta, std::move(raw)));
    drain_locked(pp, ready);
  }
  for (auto& [cb, m, b] : ready) cb(m, std::move(b));
  return true;
}

void OrderedDelivery::subscribe(std::uint64_t batch_id, const Priority& priority, ReceiveCallback cb) {
  Ready ready;
  {
    std::lock_guard lk(mu_);
    auto& pp = per_[priority];
    if (pp.delivered.contains(batch_id) || pp.subs.contains(batch_id)) return;
    if (!pp.next || (pp.delivered.empty() && batch_id < *pp.next)) pp.next = batch_id;
    pp.subs.emplace(batch_id, std::move(cb));
    drain_locked(pp, ready);
  }
  for (auto& [cb2, m, b] : ready) cb2(m, std::move(b));
}

void OrderedDelivery::drain_locked(PerPriority& pp, Ready& out) {
  while (pp.next) {
    auto s = pp.subs.find(*pp.next);
    auto h = pp.held.find(*pp.next);
    if (s == pp.subs.end() || h == pp.held.end()) return;
    out.emplace_back(std::move(s->second), h->second.first, h->second.second);
    pp.subs.erase(s);
    pp.delivered.insert(*pp.next);
    pp.next = *pp.next + 1;
  }
}

std::optional<Bytes> OrderedDelivery::held(std::uint64_t batch_id, const Priority& priority) const {
  std::lock_guard lk(mu_);
  auto it = per_.find(priority);
  if (it == per_.end()) return std::nullopt;
  auto h = it->second.held.find(batch_id);
  if (h == it->second.held.end()) return std::nullopt;
  return h->second.second;
}

bool OrderedDelivery::holds(std::uint64_t batch_id, const Priority& priority) const {
  std::lock_guard lk(mu_);
  auto it = per_.find(priority);
  return it != per_.end() && it->second.held.contains(batch_id);
}

void OrderedDelivery::prune_below(std::uint64_t batch_id) {
  std::lock_guard lk(mu_);
  for (auto& [pri, pp] : per_) {
    pp.held.erase(pp.held.begin(), pp.held.lower_bound(batch_id));
    pp.delivered.erase(pp.delivered.begin(), pp.delivered.lower_bound(batch_id));
  }
}

// ---------------------------------------------------------------------------

QuorumReplication::QuorumReplication(NodeId self, Transport& transport, QuorumOptions options)
    : self_(self), transport_(transport), options_(options) {
  timer_ = std::thread([this] { timer_loop(); });
}

QuorumReplication::~QuorumReplication() { stop(); }

void QuorumReplication::stop() {
  {
    std::lock_guard lk(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (timer_.joinable()) timer_.join();
}

void QuorumReplication::send_data(const ReplicationPayload& p, std::uint32_t row) {
  Message m;
  m.kind = MessageKind::ReplData;
  m.sender = self_;
  m.destination = NodeId{row, self_.col};
  m.batch_id = p.meta.batch_id;
  m.body = encode_repl_message(p);
  transport_.send(std::move(m));
}

void QuorumReplication::replicate_data(std::uint64_t batch_id, const Priority& priority, Bytes raw,
                                       ReplicateCallback done) {
  ReplicationPayload p = make_payload(batch_id, priority, raw, options_.compress);
  {
    std::lock_guard lk(mu_);
    stats_.payloads++;
    stats_.raw_bytes += p.meta.raw_length;
    stats_.wire_bytes += p.meta.wire_length;
  }
  delivery_.offer(p.meta, std::move(raw));
  QuorumState q(required_acks(options_.rf));
  if (q.ack(self_.row)) {
    done(true);
    return;
  }
  {
    std::lock_guard lk(mu_);
    auto key = std::make_pair(batch_id, priority);
    if (pending_.contains(key)) throw Error("payload replicated twice: batch " + std::to_string(batch_id));
    pending_.emplace(key, Pending{p, std::move(q), std::move(done),
                                  std::chrono::steady_clock::now() + options_.timeout, {}});
  }
  cv_.notify_all();
  for (std::uint32_t row = 1; row <= options_.rf; ++row) send_data(p, row);
}

void QuorumReplication::receive_data(std::uint64_t batch_id, const Priority& priority, ReceiveCallback cb) {
  delivery_.subscribe(batch_id, priority, std::move(cb));
}

std::optional<Bytes> QuorumReplication::fetch(std::uint64_t batch_id, const Priority& priority) const {
  return delivery_.held(batch_id, priority);
}

void QuorumReplication::prune_below(std::uint64_t batch_id) { delivery_.prune_below(batch_id); }

ReplicationStats QuorumReplication::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

void QuorumReplication::on_message(const Message& m) {
  if (m.kind == MessageKind::ReplData) {
    on_data(m);
  } else if (m.kind == MessageKind::ReplAck) {
    on_ack(m);
  }
}

void QuorumReplication::on_data(const Message& m) {
  ReplicationPayload p;
  try {
    p = decode_repl_message(m.body).first;
  } catch (const DecodeError&) {
    // Nothing to name in a NACK; the leader's timer covers it.
    std::lock_guard lk(mu_);
    stats_.checksum_failures++;
    return;
  }
  bool ok = false;
  try {
    Bytes raw = open_payload(p);
    delivery_.offer(p.meta, std::move(raw));
    ok = true;
  } catch (const ChecksumError&) {
    std::lock_guard lk(mu_);
    stats_.checksum_failures++;
  }
  ReplicationPayload ack;
  ack.meta = p.meta;
  Message reply;
  reply.kind = MessageKind::ReplAck;
  reply.sender = self_;
  reply.destination = m.sender;
  reply.batch_id = m.batch_id;
  reply.body = encode_repl_message(ack, ok ? 0 : kFlagNack);
  transport_.send(std::move(reply));
}

void QuorumReplication::on_ack(const Message& m) {
  auto [ack, flags] = decode_repl_message(m.body);
  ReplicateCallback fire;
  std::optional<ReplicationPayload> resend;
  {
    std::lock_guard lk(mu_);
    auto it = pending_.find({ack.meta.batch_id, ack.meta.priority});
    if (it == pending_.end()) return;
    Pending& pend = it->second;
    if (flags & kFlagNack) {
      auto& n = pend.resends[m.sender.row];
      if (n < options_.max_resends) {
        ++n;
        stats_.resends++;
        resend = pend.payload;
      }
    } else if (pend.quorum.ack(m.sender.row)) {
      fire = std::move(pend.done);
      pending_.erase(it);
    }
  }
  if (resend) send_data(*resend, m.sender.row);
  if (fire) fire(true);
}

void QuorumReplication::timer_loop() {
  std::unique_lock lk(mu_);
  while (!stopping_) {
    const auto now = std::chrono::steady_clock::now();
    std::vector<ReplicateCallback> expired;
    auto next = now + std::chrono::milliseconds(100);
    for (auto it = pending_.begin(); it != pending_.end();) {
      if (it->second.deadline <= now) {
        expired.push_back(std::move(it->second.done));
        it = pending_.erase(it);
      } else {
        next = std::min(next, it->second.deadline);
        ++it;
      }
    }
    if (!expired.empty()) {
      lk.unlock();
      for (auto& cb : expired) cb(false);
      lk.lock();
      continue;
    }
    cv_.wait_until(lk, next);
  }
}

// ---------------------------------------------------------------------------

Broker::Broker(std::chrono::microseconds service_latency) : latency_(service_latency) {
  thread_ = std::thread([this] { run(); });
}

Broker::~Broker() { stop(); }

void Broker::stop() {
  {
    std::lock_guard lk(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

void Broker::schedule(std::function<void()> fn) {
  {
    std::lock_guard lk(mu_);
    tasks_.push(Task{std::chrono::steady_clock::now() + latency_, seq_++, std::move(fn)});
  }
  cv_.notify_all();
}

void Broker::run() {
  std::unique_lock lk(mu_);
  while (!stopping_) {
    if (tasks_.empty()) {
      cv_.wait(lk);
      continue;
    }
    const auto due = tasks_.top().due;
    if (std::chrono::steady_clock::now() < due) {
      cv_.wait_until(lk, due);
      continue;
    }
    auto fn = std::move(const_cast<Task&>(tasks_.top()).fn);
    tasks_.pop();
    lk.unlock();
    fn();
    lk.lock();
  }
}

void Broker::publish(ReplicationPayload p, ReplicateCallback done) {
  schedule([this, p = std::move(p), done = std::move(done)]() mutable {
    std::vector<std::function<void(const ReplicationPayload&)>> waiters;
    const auto key = std::make_pair(p.meta.batch_id, p.meta.priority);
    {
      std::lock_guard lk(mu_);
      store_[key] = p;
      auto it = waiting_.find(key);
      if (it != waiting_.end()) {
        waiters = std::move(it->second);
        waiting_.erase(it);
      }
    }
    done(true);
    for (auto& w : waiters) w(p);
  });
}

void Broker::subscribe(std::uint64_t batch_id, const Priority& priority,
                       std::function<void(const ReplicationPayload&)> deliver) {
  schedule([this, key = std::make_pair(batch_id, priority), deliver = std::move(deliver)]() mutable {
    std::optional<ReplicationPayload> have;
    {
      std::lock_guard lk(mu_);
      auto it = store_.find(key);
      if (it == store_.end()) {
        waiting_[key].push_back(std::move(deliver));
        return;
      }
      have = it->second;
    }
    deliver(*have);
  });
}

std::optional<ReplicationPayload> Broker::get(std::uint64_t batch_id, const Priority& priority) const {
  std::lock_guard lk(mu_);
  auto it = store_.find({batch_id, priority});
  if (it == store_.end()) return std::nullopt;
  return it->second;
}

void Broker::prune_below(std::uint64_t batch_id) {
  std::lock_guard lk(mu_);
  for (auto it = store_.begin(); it != store_.end();) {
    it = it->first.first < batch_id ? store_.erase(it) : std::next(it);
  }
}

// ---------------------------------------------------------------------------

MiddlewareReplication::MiddlewareReplication(Broker& broker, bool compress_body)
    : broker_(broker), compress_(compress_body) {}

void MiddlewareReplication::replicate_data(std::uint64_t batch_id, const Priority& priority, Bytes raw,
                                           ReplicateCallback done) {
  ReplicationPayload p = make_payload(batch_id, priority, std::move(raw), compress_);
  {
    std::lock_guard lk(mu_);
    stats_.payloads++;
    stats_.raw_bytes += p.meta.raw_length;
    stats_.wire_bytes += p.meta.wire_length;
  }
  broker_.publish(std::move(p), std::move(done));
}

void MiddlewareReplication::receive_data(std::uint64_t batch_id, const Priority& priority, ReceiveCallback cb) {
  delivery_.subscribe(batch_id, priority, std::move(cb));
  broker_.subscribe(batch_id, priority, [this](const ReplicationPayload& first) {
    std::optional<ReplicationPayload> p = first;
    for (int attempt = 0; attempt < 3 && p; ++attempt) {
      try {
        delivery_.offer(p->meta, open_payload(*p));
        return;
      } catch (const ChecksumError&) {
        std::lock_guard lk(mu_);
        stats_.checksum_failures++;
      }
      p = broker_.get(first.meta.batch_id, first.meta.priority);
    }
  });
}

std::optional<Bytes> MiddlewareReplication::fetch(std::uint64_t batch_id, const Priority& priority) const {
  if (auto held = delivery_.held(batch_id, priority)) return held;
  auto p = broker_.get(batch_id, priority);
  if (!p) return std::nullopt;
  return open_payload(*p);
}

void MiddlewareReplication::prune_below(std::uint64_t batch_id) { delivery_.prune_below(batch_id); }

ReplicationStats MiddlewareReplication::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

}  // namespace qrstore
