#include "qrstore/core.hpp"

#include <functional>

namespace qrstore {

std::string to_string(const Priority& p) {
  return "(" + std::to_string(p.node_rank) + "," + std::to_string(p.thread_rank) + ")";
}

std::string to_string(const TxnId& id) {
  return "t[" + std::to_string(id.batch) + "," + to_string(id.priority) + "," +
         std::to_string(id.sequence) + "]";
}

std::size_t TxnIdHash::operator()(const TxnId& id) const noexcept {
  std::uint64_t h = id.batch * 0x9E3779B97F4A7C15ULL;
  h ^= (static_cast<std::uint64_t>(id.priority.node_rank) << 32 | id.priority.thread_rank) +
       0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  h ^= id.sequence + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  return static_cast<std::size_t>(h);
}

void Operation::validate() const {
  switch (kind) {
    case OpKind::Read:
      if (write_value || dep_source || abort_below) throw ValidationError("READ carries a payload");
      return;
    case OpKind::Update:
      if (!write_value || dep_source || abort_below) throw ValidationError("UPDATE needs write_value only");
      return;
    case OpKind::Rmw:
      if (!dep_source || write_value || abort_below) throw ValidationError("RMW needs dep_source only");
      return;
    case OpKind::CondAbort:
      if (!abort_below || write_value || dep_source) throw ValidationError("COND_ABORT needs abort_predicate only");
      return;
  }
  throw ValidationError("unknown operation kind");
}

Partitioner::Partitioner(std::uint32_t partitions, std::uint32_t subranges)
    : partitions_(partitions), subranges_(subranges) {
  if (partitions == 0) throw ValidationError("partition count must be >= 1");
  if (subranges == 0) throw ValidationError("sub-range count must be >= 1");
}

const char* to_string(TxnStatus s) noexcept {
  switch (s) {
    case TxnStatus::Pending: return "PENDING";
    case TxnStatus::Committed: return "COMMITTED";
    case TxnStatus::Aborted: return "ABORTED";
  }
  return "?";
}

}  // namespace qrstore
