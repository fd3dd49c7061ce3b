#include "qrstore/compression.hpp"

#include <zlib.h>

namespace qrstore {

namespace {
constexpr std::size_t kPrefix = 8;
// Refuse to allocate absurd output sizes from a corrupt prefix.
constexpr std::uint64_t kMaxRaw = 1ULL << 32;
}  // namespace

Bytes compress(std::span<const std::uint8_t> raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  Bytes out(kPrefix + bound);
  const std::uint64_t n = raw.size();
  for (std::size_t i = 0; i < kPrefix; ++i) out[i] = static_cast<std::uint8_t>(n >> (8 * i));
  const int rc = compress2(out.data() + kPrefix, &bound, raw.data(), static_cast<uLong>(raw.size()), Z_BEST_SPEED);
  if (rc != Z_OK) throw CompressionError("deflate failed: " + std::to_string(rc));
  out.resize(kPrefix + bound);
  return out;
}

Bytes decompress(std::span<const std::uint8_t> packed) {
  if (packed.size() < kPrefix) throw CompressionError("compressed body shorter than its prefix");
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < kPrefix; ++i) n |= static_cast<std::uint64_t>(packed[i]) << (8 * i);
  if (n > kMaxRaw) throw CompressionError("implausible raw length");
  Bytes out(n);
  uLongf len = static_cast<uLongf>(n);
  const int rc = uncompress(out.data(), &len, packed.data() + kPrefix, static_cast<uLong>(packed.size() - kPrefix));
  if (rc != Z_OK || len != n) throw CompressionError("inflate failed: " + std::to_string(rc));
  return out;
}

}  // namespace qrstore
