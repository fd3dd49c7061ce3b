#pragma once

#include <span>

#include "qrstore/core.hpp"

namespace qrstore {

class CompressionError : public Error {
 public:
  using Error::Error;
};

/// Lossless deflate with an 8-byte little-endian raw-length prefix.
Bytes compress(std::span<const std::uint8_t> raw);
Bytes decompress(std::span<const std::uint8_t> packed);

}  // namespace qrstore
