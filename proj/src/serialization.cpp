#include "qrstore/serialization.hpp"

namespace qrstore {

std::uint64_t fnv1a64(std::span<const std::uint8_t> data) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : data) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text) noexcept {
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace {

enum : std::uint8_t { kHasValue = 1, kHasSource = 2, kHasThreshold = 4 };

}  // namespace

void encode(ByteWriter& w, const Operation& op) {
  w.u8(static_cast<std::uint8_t>(op.kind));
  w.u64(op.key.id);
  std::uint8_t flags = 0;
  if (op.write_value) flags |= kHasValue;
  if (op.dep_source) flags |= kHasSource;
  if (op.abort_below) flags |= kHasThreshold;
  w.u8(flags);
  if (op.write_value) w.bytes(*op.write_value);
  if (op.dep_source) w.u64(op.dep_source->id);
  if (op.abort_below) w.u8(*op.abort_below);
}

Operation decode_operation(ByteReader& r) {
  Operation op;
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(OpKind::CondAbort)) throw DecodeError("bad operation kind");
  op.kind = static_cast<OpKind>(kind);
  op.key.id = r.u64();
  const std::uint8_t flags = r.u8();
  if (flags & ~(kHasValue | kHasSource | kHasThreshold)) throw DecodeError("bad operation flags");
  if (flags & kHasValue) op.write_value = r.bytes();
  if (flags & kHasSource) op.dep_source = Key{r.u64()};
  if (flags & kHasThreshold) op.abort_below = r.u8();
  try {
    op.validate();
  } catch (const ValidationError& e) {
    throw DecodeError(e.what());
  }
  return op;
}

void encode(ByteWriter& w, const Fragment& f) {
  w.txn_id(f.txn);
  w.u32(static_cast<std::uint32_t>(f.ops.size()));
  for (const auto& fo : f.ops) {
    w.u32(fo.index);
    w.u8(static_cast<std::uint8_t>(fo.role));
    encode(w, fo.op);
  }
  w.u32(f.unresolved_deps);
  w.u32(static_cast<std::uint32_t>(f.produced_deps.size()));
  for (const auto& d : f.produced_deps) {
    w.txn_id(d.txn);
    w.u32(d.op_index);
  }
}

Fragment decode_fragment(ByteReader& r) {
  Fragment f;
  f.txn = r.txn_id();
  const std::uint32_t n = r.count(15);
  f.ops.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    FragmentOp fo;
    fo.index = r.u32();
    const std::uint8_t role = r.u8();
    if (role > 1) throw DecodeError("bad op role");
    fo.role = static_cast<OpRole>(role);
    fo.op = decode_operation(r);
    f.ops.push_back(std::move(fo));
  }
  f.unresolved_deps = r.u32();
  const std::uint32_t d = r.count(28);
  f.produced_deps.reserve(d);
  for (std::uint32_t i = 0; i < d; ++i) {
    DepTarget t;
    t.txn = r.txn_id();
    t.op_index = r.u32();
    f.produced_deps.push_back(t);
  }
  return f;
}

void encode(ByteWriter& w, const ExecutionQueue& q) {
  w.u64(q.batch_id);
  w.priority(q.priority);
  w.u32(q.partition);
  w.u32(q.subrange);
  w.u8(static_cast<std::uint8_t>(q.locality));
  w.u8(q.write_only ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(q.fragments.size()));
  for (const auto& f : q.fragments) encode(w, f);
}

ExecutionQueue decode_eq(ByteReader& r) {
  ExecutionQueue q;
  q.batch_id = r.u64();
  q.priority = r.priority();
  q.partition = r.u32();
  q.subrange = r.u32();
  const std::uint8_t loc = r.u8();
  if (loc > 1) throw DecodeError("bad locality");
  q.locality = static_cast<Locality>(loc);
  const std::uint8_t wo = r.u8();
  if (wo > 1) throw DecodeError("bad write_only flag");
  q.write_only = wo == 1;
  const std::uint32_t n = r.count(36);
  q.fragments.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) q.fragments.push_back(decode_fragment(r));
  return q;
}

void encode(ByteWriter& w, const Transaction& t) {
  w.txn_id(t.id);
  w.u64(t.client_id);
  w.u64(static_cast<std::uint64_t>(t.arrival_ns));
  w.u32(static_cast<std::uint32_t>(t.ops.size()));
  for (const auto& op : t.ops) encode(w, op);
}

Transaction decode_transaction(ByteReader& r) {
  Transaction t;
  t.id = r.txn_id();
  t.client_id = r.u64();
  t.arrival_ns = static_cast<std::int64_t>(r.u64());
  const std::uint32_t n = r.count(10);
  t.ops.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) t.ops.push_back(decode_operation(r));
  return t;
}

}  // namespace qrstore
