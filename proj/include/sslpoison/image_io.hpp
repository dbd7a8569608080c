// 8-bit PNG read/write.
#pragma once

#include <filesystem>

#include "sslpoison/data_core.hpp"

namespace sslpoison {

/// Writes a 1- or 3-channel 8-bit PNG. Throws DataError on I/O failure.
void write_png(const std::filesystem::path& path, const ImageShape& shape,
               std::span<const std::uint8_t> pixels);

/// Reads an 8-bit gray/RGB PNG (palette and 16-bit inputs are converted,
/// alpha is stripped) into HWC pixels.
std::vector<std::uint8_t> read_png(const std::filesystem::path& path, ImageShape& shape);

}  // namespace sslpoison
