#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace qrstore {

using Bytes = std::vector<std::uint8_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

struct Key {
  std::uint64_t id = 0;

  friend auto operator<=>(const Key&, const Key&) = default;
};

/// Planner identity. Lower tuple means higher priority; no two planner threads
/// of a cluster instance share one.
struct Priority {
  std::uint32_t node_rank = 0;
  std::uint32_t thread_rank = 0;

  friend auto operator<=>(const Priority&, const Priority&) = default;
};

/// True iff `a` has strictly higher priority than `b`.
constexpr bool priority_less(const Priority& a, const Priority& b) noexcept { return a < b; }

/// (batch, planner priority, sequence). Lexicographic order on this triple is
/// the planning order of transactions.
struct TxnId {
  std::uint64_t batch = 0;
  Priority priority;
  std::uint64_t sequence = 0;

  friend auto operator<=>(const TxnId&, const TxnId&) = default;
};

std::string to_string(const TxnId& id);
std::string to_string(const Priority& p);

struct TxnIdHash {
  std::size_t operator()(const TxnId& id) const noexcept;
};

enum class OpKind : std::uint8_t { Read = 0, Update = 1, Rmw = 2, CondAbort = 3 };

struct Operation {
  OpKind kind = OpKind::Read;
  Key key;
  std::optional<Bytes> write_value;         // Update
  std::optional<Key> dep_source;            // Rmw: key += dep_source
  std::optional<std::uint8_t> abort_below;  // CondAbort: abort if first byte < threshold

  static Operation read(Key k) { return {OpKind::Read, k, {}, {}, {}}; }
  static Operation update(Key k, Bytes v) { return {OpKind::Update, k, std::move(v), {}, {}}; }
  static Operation rmw(Key k, Key source) { return {OpKind::Rmw, k, {}, source, {}}; }
  static Operation cond_abort(Key k, std::uint8_t threshold) {
    return {OpKind::CondAbort, k, {}, {}, threshold};
  }

  bool writes() const noexcept { return kind == OpKind::Update || kind == OpKind::Rmw; }

  /// Throws ValidationError if the optional payload does not match `kind`.
  void validate() const;

  friend bool operator==(const Operation&, const Operation&) = default;
};

struct Transaction {
  TxnId id;  // assigned by the planner
  std::uint64_t client_id = 0;
  std::vector<Operation> ops;
  std::int64_t arrival_ns = 0;  // client-side enqueue time, steady clock

  friend bool operator==(const Transaction& a, const Transaction& b) {
    return a.id == b.id && a.client_id == b.client_id && a.ops == b.ops;
  }
};

/// Maps keys to (partition, sub-range). Modulo-based on both levels.
class Partitioner {
 public:
  Partitioner(std::uint32_t partitions, std::uint32_t subranges);

  std::uint32_t partitions() const noexcept { return partitions_; }
  std::uint32_t subranges() const noexcept { return subranges_; }

  std::uint32_t partition_of(Key k) const noexcept {
    return static_cast<std::uint32_t>(k.id % partitions_);
  }
  std::uint32_t subrange_of(Key k) const noexcept {
    return static_cast<std::uint32_t>((k.id / partitions_) % subranges_);
  }
  /// Dense index of `k` inside its partition.
  std::uint64_t local_index(Key k) const noexcept { return k.id / partitions_; }
  Key key_at(std::uint32_t partition, std::uint64_t local_index) const noexcept {
    return Key{local_index * partitions_ + partition};
  }

 private:
  std::uint32_t partitions_;
  std::uint32_t subranges_;
};

inline std::uint32_t partition_of(Key k, std::uint32_t partitions) {
  if (partitions == 0) throw ValidationError("partition count must be >= 1");
  return static_cast<std::uint32_t>(k.id % partitions);
}

inline std::uint32_t subrange_of(Key k, std::uint32_t partitions, std::uint32_t subranges) {
  if (partitions == 0 || subranges == 0) throw ValidationError("partition/sub-range count must be >= 1");
  return static_cast<std::uint32_t>((k.id / partitions) % subranges);
}

/// An op inside a fragment. `DepSource` entries read the source key of a
/// cross-slot RMW at the RMW's position and ship the value to the consumer.
enum class OpRole : std::uint8_t { Primary = 0, DepSource = 1 };

struct FragmentOp {
  std::uint32_t index = 0;  // position in Transaction::ops
  OpRole role = OpRole::Primary;
  Operation op;

  friend bool operator==(const FragmentOp&, const FragmentOp&) = default;
};

struct DepTarget {
  TxnId txn;
  std::uint32_t op_index = 0;

  friend bool operator==(const DepTarget&, const DepTarget&) = default;
};

struct Fragment {
  TxnId txn;
  std::vector<FragmentOp> ops;  // ascending index
  std::uint32_t unresolved_deps = 0;
  std::vector<DepTarget> produced_deps;

  friend bool operator==(const Fragment&, const Fragment&) = default;
};

enum class Locality : std::uint8_t { Local = 0, Remote = 1 };

struct ExecutionQueue {
  std::uint64_t batch_id = 0;
  Priority priority;
  std::uint32_t partition = 0;
  std::uint32_t subrange = 0;
  std::vector<Fragment> fragments;
  Locality locality = Locality::Local;
  bool write_only = false;

  friend bool operator==(const ExecutionQueue&, const ExecutionQueue&) = default;
};

/// Two EQs conflict iff they share (batch, partition, subrange).
inline bool conflicts(const ExecutionQueue& a, const ExecutionQueue& b) noexcept {
  return a.batch_id == b.batch_id && a.partition == b.partition && a.subrange == b.subrange;
}

enum class TxnStatus : std::uint8_t { Pending = 0, Committed = 1, Aborted = 2 };

const char* to_string(TxnStatus s) noexcept;

}  // namespace qrstore
