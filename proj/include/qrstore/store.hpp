#pragma once

#include <cstdint>
#include <span>

#include "qrstore/core.hpp"

namespace qrstore {

/// Deterministic pre-load value of a record.
Bytes initial_value(Key k, std::uint32_t record_size);

/// RMW combine: element-wise byte addition mod 256.
void combine_into(std::span<std::uint8_t> target, std::span<const std::uint8_t> source) noexcept;

/// Dense fixed-width record array holding one partition of the database.
class PartitionStore {
 public:
  PartitionStore(std::uint32_t partition, std::uint32_t partitions, std::uint64_t records,
                 std::uint32_t record_size);

  std::uint32_t partition() const noexcept { return partition_; }
  std::uint32_t partitions() const noexcept { return partitions_; }
  std::uint64_t records() const noexcept { return records_; }
  std::uint32_t record_size() const noexcept { return record_size_; }

  bool owns(Key k) const noexcept {
    return k.id % partitions_ == partition_ && k.id / partitions_ < records_;
  }

  std::span<const std::uint8_t> read(Key k) const;
  std::span<std::uint8_t> mutable_record(Key k);
  void write(Key k, std::span<const std::uint8_t> value);

  /// Resets every record to its initial value.
  void load_initial();
  /// Zeroes the partition (simulated memory loss).
  void wipe();

  const Bytes& raw() const noexcept { return data_; }
  void assign_raw(Bytes data);

  friend bool operator==(const PartitionStore& a, const PartitionStore& b) {
    return a.partition_ == b.partition_ && a.record_size_ == b.record_size_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(Key k) const;

  std::uint32_t partition_;
  std::uint32_t partitions_;
  std::uint64_t records_;
  std::uint32_t record_size_;
  Bytes data_;
};

}  // namespace qrstore
