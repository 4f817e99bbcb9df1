#include "lndet/png.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "lndet/error.hpp"

namespace lndet {

namespace {

void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

void append_chunk(std::vector<unsigned char>& out, const char type[4],
                  const std::vector<unsigned char>& payload) {
    put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_gray8_png(const std::filesystem::path& path, int width, int height,
                     const std::vector<unsigned char>& pixels) {
    if (width <= 0 || height <= 0 ||
        pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
        throw DataError("png: pixel buffer does not match dimensions");

    // Raw scanlines, each prefixed with filter byte 0.
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(height) * (width + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + static_cast<std::size_t>(y) * width,
                   pixels.begin() + static_cast<std::size_t>(y + 1) * width);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw DataError("png: zlib compression failed");
    compressed.resize(bound);

    std::vector<unsigned char> file{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<unsigned char> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(width));
    put_u32_be(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // color type: grayscale
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // interlace
    append_chunk(file, "IHDR", ihdr);
    append_chunk(file, "IDAT", compressed);
    append_chunk(file, "IEND", {});

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
    if (!out) throw DataError(path.string() + ": write failed");
}

}  // namespace lndet
