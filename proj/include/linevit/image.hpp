#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace linevit {

// 8-bit RGB canvas, row-major, channel-interleaved. Pixel (x, y) covers the
// unit square [x, x+1) x [y, y+1); its center is (x + 0.5, y + 0.5). All
// geometry in this project uses that convention.
struct ImageCanvas {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels; // size = width * height * 3

    ImageCanvas() = default;
    ImageCanvas(int w, int h, uint8_t r = 0, uint8_t g = 0, uint8_t b = 0);

    uint8_t& at(int x, int y, int c) {
        return pixels[static_cast<std::size_t>(3) * (static_cast<std::size_t>(y) * width + x) + c];
    }
    uint8_t at(int x, int y, int c) const {
        return pixels[static_cast<std::size_t>(3) * (static_cast<std::size_t>(y) * width + x) + c];
    }
    bool in_bounds(int x, int y) const {
        return x >= 0 && x < width && y >= 0 && y < height;
    }
};

// PNG I/O via zlib. The encoder emits a fixed layout (8-bit RGB, no alpha,
// non-interlaced, filter type 0, one IDAT, compression level 6) so identical
// canvases produce identical bytes. The decoder accepts exactly that layout
// plus per-scanline filters 0-4 and errors out on anything else; it exists
// to read this project's own files back, not arbitrary PNGs.
void write_png(const std::string& path, const ImageCanvas& img);
ImageCanvas read_png(const std::string& path);

std::vector<uint8_t> encode_png(const ImageCanvas& img);
ImageCanvas decode_png(const std::vector<uint8_t>& data);

} // namespace linevit
