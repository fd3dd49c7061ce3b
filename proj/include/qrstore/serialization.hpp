#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "qrstore/core.hpp"

namespace qrstore {

class DecodeError : public Error {
 public:
  using Error::Error;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::uint8_t> data) noexcept;
std::uint64_t fnv1a64(std::string_view text) noexcept;

/// Little-endian, fixed-width, length-prefixed encoder.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void bytes(std::span<const std::uint8_t> b) {
    u32(static_cast<std::uint32_t>(b.size()));
    raw(b);
  }
  void raw(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  void priority(const Priority& p) {
    u32(p.node_rank);
    u32(p.thread_rank);
  }
  void txn_id(const TxnId& id) {
    u64(id.batch);
    priority(id.priority);
    u64(id.sequence);
  }

  std::size_t size() const noexcept { return buf_.size(); }
  Bytes& buffer() noexcept { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  Bytes bytes() {
    const std::uint32_t n = u32();
    return raw(n);
  }
  Bytes raw(std::size_t n) {
    need(n);
    Bytes out(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
              data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  Priority priority() {
    Priority p;
    p.node_rank = u32();
    p.thread_rank = u32();
    return p;
  }
  TxnId txn_id() {
    TxnId id;
    id.batch = u64();
    id.priority = priority();
    id.sequence = u64();
    return id;
  }
  /// Bounds a decoded element count by the bytes that remain.
  std::uint32_t count(std::size_t min_element_size) {
    const std::uint32_t n = u32();
    if (min_element_size > 0 && static_cast<std::uint64_t>(n) * min_element_size > remaining()) {
      throw DecodeError("element count exceeds remaining input");
    }
    return n;
  }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }
  void expect_end() const {
    if (!at_end()) throw DecodeError("trailing bytes after message");
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw DecodeError("truncated input");
  }
  std::uint64_t get(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

void encode(ByteWriter& w, const Operation& op);
void encode(ByteWriter& w, const Fragment& f);
void encode(ByteWriter& w, const ExecutionQueue& q);
void encode(ByteWriter& w, const Transaction& t);

Operation decode_operation(ByteReader& r);
Fragment decode_fragment(ByteReader& r);
ExecutionQueue decode_eq(ByteReader& r);
Transaction decode_transaction(ByteReader& r);

}  // namespace qrstore
