#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace trace {

// CRC-32 (zlib polynomial), optionally continuing from a previous value.
std::uint32_t crc32(std::span<const unsigned char> bytes, std::uint32_t previous = 0);
std::uint32_t crc32(std::string_view text, std::uint32_t previous = 0);

}  // namespace trace
