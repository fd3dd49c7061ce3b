#include "qrstore/store.hpp"

#include <algorithm>

namespace qrstore {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Bytes initial_value(Key k, std::uint32_t record_size) {
  Bytes out(record_size);
  std::uint64_t state = k.id ^ 0x5151'A11C'E5ULL;
  for (std::uint32_t i = 0; i < record_size; i += 8) {
    const std::uint64_t word = splitmix64(state);
    for (std::uint32_t b = 0; b < 8 && i + b < record_size; ++b) {
      out[i + b] = static_cast<std::uint8_t>(word >> (8 * b));
    }
  }
  return out;
}

void combine_into(std::span<std::uint8_t> target, std::span<const std::uint8_t> source) noexcept {
  const std::size_t n = std::min(target.size(), source.size());
  for (std::size_t i = 0; i < n; ++i) target[i] = static_cast<std::uint8_t>(target[i] + source[i]);
}

PartitionStore::PartitionStore(std::uint32_t partition, std::uint32_t partitions, std::uint64_t records,
                               std::uint32_t record_size)
    : partition_(partition),
      partitions_(partitions),
      records_(records),
      record_size_(record_size),
      data_(records * record_size) {
  if (partitions == 0 || partition >= partitions) throw ValidationError("bad partition index");
  if (record_size == 0) throw ValidationError("record size must be positive");
  load_initial();
}

std::size_t PartitionStore::offset(Key k) const {
  if (!owns(k)) {
    throw ValidationError("key " + std::to_string(k.id) + " not in partition " + std::to_string(partition_));
  }
  return static_cast<std::size_t>(k.id / partitions_) * record_size_;
}

std::span<const std::uint8_t> PartitionStore::read(Key k) const {
  return {data_.data() + offset(k), record_size_};
}

std::span<std::uint8_t> PartitionStore::mutable_record(Key k) {
  return {data_.data() + offset(k), record_size_};
}

void PartitionStore::write(Key k, std::span<const std::uint8_t> value) {
  if (value.size() != record_size_) throw ValidationError("value length differs from record size");
  std::copy(value.begin(), value.end(), data_.begin() + static_cast<std::ptrdiff_t>(offset(k)));
}

void PartitionStore::load_initial() {
  for (std::uint64_t i = 0; i < records_; ++i) {
    const Key k{i * partitions_ + partition_};
    const Bytes v = initial_value(k, record_size_);
    std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * record_size_));
  }
}

void PartitionStore::wipe() { std::fill(data_.begin(), data_.end(), std::uint8_t{0}); }

void PartitionStore::assign_raw(Bytes data) {
  if (data.size() != data_.size()) throw ValidationError("snapshot size mismatch");
  data_ = std::move(data);
}

}  // namespace qrstore
