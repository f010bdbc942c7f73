#include "trace/checksum.hpp"

#include <zlib.h>

#include <limits>

namespace trace {

std::uint32_t crc32(std::span<const unsigned char> bytes, std::uint32_t previous) {
  uLong crc = previous;
  const unsigned char* data = bytes.data();
  std::size_t remaining = bytes.size();
  while (remaining > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(remaining, std::numeric_limits<uInt>::max()));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    remaining -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc32(std::string_view text, std::uint32_t previous) {
  return crc32(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()), previous);
}

}  // namespace trace
