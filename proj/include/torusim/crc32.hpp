#pragma once

#include <cstdint>
#include <span>

namespace torusim {

/// CRC-32 (ISO-HDLC): reflected polynomial 0x04C11DB7, init and final xor
/// 0xFFFFFFFF. crc32("123456789") == 0xCBF43926.
std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t crc = 0);

}  // namespace torusim
