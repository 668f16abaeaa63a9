#pragma once

#include <cstddef>
#include <cstdint>

namespace dtnet {

// CRC-32 (IEEE 802.3, reflected 0xEDB88320), as used for the checkpoint
// trailer.
std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);

}  // namespace dtnet
