#pragma once

#include <filesystem>
#include <vector>

namespace lndet {

/// Minimal 8-bit grayscale PNG writer (zlib-compressed, filter type 0).
void write_gray8_png(const std::filesystem::path& path, int width, int height,
                     const std::vector<unsigned char>& pixels);

}  // namespace lndet
