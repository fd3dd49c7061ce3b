#include "qrstore/durability.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>

namespace qrstore {

WriteOnlyEQ build_write_only_eq(std::uint64_t batch_id, std::uint32_t partition, std::uint32_t subrange,
                                const SlotState& state, const PartitionStore& store,
                                const std::function<bool(const TxnId&)>& committed) {
  WriteOnlyEQ out{batch_id, partition, subrange, {}};
  for (const auto& [id, hist] : state.keys) {
    const bool any = std::any_of(hist.writes.begin(), hist.writes.end(),
                                 [&](const WriteRecord& w) { return committed(w.txn); });
    if (!any) continue;
    const Key k{id};
    auto v = store.read(k);
    out.entries.push_back(WriteOnlyEntry{k, Bytes(v.begin(), v.end())});
  }
  std::sort(out.entries.begin(), out.entries.end(),
            [](const WriteOnlyEntry& a, const WriteOnlyEntry& b) { return a.key < b.key; });
  return out;
}

void apply(const WriteOnlyEQ& eq, PartitionStore& store) {
  for (const auto& e : eq.entries) store.write(e.key, e.value);
}

void encode(ByteWriter& w, const WriteOnlyEQ& eq) {
  w.u64(eq.batch_id);
  w.u32(eq.partition);
  w.u32(eq.subrange);
  w.u32(static_cast<std::uint32_t>(eq.entries.size()));
  for (const auto& e : eq.entries) {
    w.u64(e.key.id);
    w.bytes(e.value);
  }
}

WriteOnlyEQ decode_write_only_eq(ByteReader& r) {
  WriteOnlyEQ eq;
  eq.batch_id = r.u64();
  eq.partition = r.u32();
  eq.subrange = r.u32();
  const std::uint32_t n = r.count(12);
  eq.entries.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    WriteOnlyEntry e;
    e.key.id = r.u64();
    e.value = r.bytes();
    eq.entries.push_back(std::move(e));
  }
  return eq;
}

Bytes encode_log_record(const LogRecord& rec) {
  ByteWriter w;
  w.u64(rec.batch_id);
  w.u32(rec.partition);
  w.u32(static_cast<std::uint32_t>(rec.eqs.size()));
  for (const auto& eq : rec.eqs) encode(w, eq);
  return w.take();
}

LogRecord decode_log_record(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  LogRecord rec;
  rec.batch_id = r.u64();
  rec.partition = r.u32();
  const std::uint32_t n = r.count(20);
  for (std::uint32_t i = 0; i < n; ++i) rec.eqs.push_back(decode_write_only_eq(r));
  r.expect_end();
  return rec;
}

// ---------------------------------------------------------------------------

Log::Log(std::filesystem::path file, bool fsync) : file_(std::move(file)), fsync_(fsync) {
  std::ofstream(*file_, std::ios::binary | std::ios::trunc);
}

void Log::append(LogRecord rec) {
  std::lock_guard lk(mu_);
  if (!records_.empty() && rec.batch_id != records_.back().batch_id + 1) {
    throw Error("log append out of order: batch " + std::to_string(rec.batch_id) + " after " +
                std::to_string(records_.back().batch_id));
  }
  if (file_) {
    const Bytes body = encode_log_record(rec);
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(body.size()));
    w.raw(body);
    const Bytes framed = w.take();
    const int fd = ::open(file_->c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
    if (fd < 0) throw Error("cannot open log file " + file_->string());
    const bool ok = ::write(fd, framed.data(), framed.size()) == static_cast<ssize_t>(framed.size());
    if (ok && fsync_) ::fsync(fd);
    ::close(fd);
    if (!ok) throw Error("short write to log file " + file_->string());
  }
  records_.push_back(std::move(rec));
}

std::vector<LogRecord> Log::records_after(std::optional<std::uint64_t> watermark) const {
  std::lock_guard lk(mu_);
  std::vector<LogRecord> out;
  for (const auto& r : records_) {
    if (!watermark || r.batch_id > *watermark) out.push_back(r);
  }
  return out;
}

std::optional<std::uint64_t> Log::last_batch() const {
  std::lock_guard lk(mu_);
  if (records_.empty()) return std::nullopt;
  return records_.back().batch_id;
}

std::size_t Log::size() const {
  std::lock_guard lk(mu_);
  return records_.size();
}

void Log::clear() {
  std::lock_guard lk(mu_);
  records_.clear();
  if (file_) std::ofstream(*file_, std::ios::binary | std::ios::trunc);
}

void Log::truncate_from(std::uint64_t batch_id) {
  std::lock_guard lk(mu_);
  std::erase_if(records_, [&](const LogRecord& r) { return r.batch_id >= batch_id; });
}

std::vector<LogRecord> Log::read_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot open log file " + file.string());
  const Bytes all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(all);
  std::vector<LogRecord> out;
  while (!r.at_end()) {
    const Bytes body = r.bytes();
    out.push_back(decode_log_record(body));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::uint64_t kNoWatermark = ~std::uint64_t{0};
constexpr std::uint32_t kCheckpointMagic = 0x51524350;
}  // namespace

Checkpoint take_checkpoint(const PartitionStore& store, std::optional<std::uint64_t> watermark,
                           std::uint32_t subranges) {
  return Checkpoint{watermark, store.partitions(), subranges, store.record_size(), store.partition(), store.raw()};
}

Bytes encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.u32(kCheckpointMagic);
  w.u64(c.watermark ? *c.watermark : kNoWatermark);
  w.u32(c.partitions);
  w.u32(c.subranges);
  w.u32(c.record_size);
  w.u32(c.partition);
  w.u64(c.data.size());
  w.raw(c.data);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.u32() != kCheckpointMagic) throw DecodeError("not a checkpoint");
  Checkpoint c;
  const std::uint64_t wm = r.u64();
  if (wm != kNoWatermark) c.watermark = wm;
  c.partitions = r.u32();
  c.subranges = r.u32();
  c.record_size = r.u32();
  c.partition = r.u32();
  const std::uint64_t n = r.u64();
  if (n > r.remaining()) throw DecodeError("checkpoint truncated");
  c.data = r.raw(static_cast<std::size_t>(n));
  r.expect_end();
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& file) {
  const Bytes b = encode_checkpoint(c);
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw Error("cannot write checkpoint " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + file.string());
  const Bytes all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(all);
}

Recovered recover_node(PartitionStore& store, const Checkpoint& checkpoint, const std::vector<LogRecord>& log) {
  if (checkpoint.partition != store.partition() || checkpoint.record_size != store.record_size() ||
      checkpoint.partitions != store.partitions()) {
    throw RecoveryError("checkpoint does not match partition " + std::to_string(store.partition()));
  }
  store.assign_raw(checkpoint.data);
  std::vector<const LogRecord*> todo;
  for (const auto& r : log) {
    if (!checkpoint.watermark || r.batch_id > *checkpoint.watermark) todo.push_back(&r);
  }
  std::sort(todo.begin(), todo.end(), [](const LogRecord* a, const LogRecord* b) { return a->batch_id < b->batch_id; });
  Recovered out{checkpoint.watermark, 0};
  std::uint64_t expect = checkpoint.watermark ? *checkpoint.watermark + 1 : 0;
  for (const LogRecord* r : todo) {
    if (r->batch_id != expect) {
      throw RecoveryError("log gap: missing epoch " + std::to_string(expect) + " for partition " +
                          std::to_string(store.partition()));
    }
    if (r->partition != store.partition()) throw RecoveryError("log record for a different partition");
    for (const auto& eq : r->eqs) apply(eq, store);
    out.last_batch = r->batch_id;
    ++out.replayed;
    ++expect;
  }
  return out;
}

std::uint32_t elect_leader(const std::vector<ElectionCandidate>& group) {
  const ElectionCandidate* best = nullptr;
  for (const auto& c : group) {
    if (!c.alive) continue;
    if (!best || c.committed_batch > best->committed_batch ||
        (c.committed_batch == best->committed_batch && c.rank < best->rank)) {
      best = &c;
    }
  }
  if (!best) throw RecoveryError("replication group unavailable: every member failed");
  return best->rank;
}

std::size_t catch_up(Log& target, const Log& source) {
  std::size_t n = 0;
  for (auto& r : source.records_after(target.last_batch())) {
    target.append(std::move(r));
    ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------

void FailureDetector::watch(std::uint32_t peer, Clock::time_point now) {
  std::lock_guard lk(mu_);
  last_.try_emplace(peer, now);
}

void FailureDetector::beat(std::uint32_t peer, Clock::time_point now) {
  std::lock_guard lk(mu_);
  auto& t = last_[peer];
  t = std::max(t, now);
}

std::vector<std::uint32_t> FailureDetector::suspects(Clock::time_point now) const {
  std::lock_guard lk(mu_);
  std::vector<std::uint32_t> out;
  for (const auto& [peer, t] : last_) {
    if (now - t > period_ * missed_) out.push_back(peer);
  }
  return out;
}

}  // namespace qrstore
