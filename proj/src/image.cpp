#include "linevit/image.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace linevit {

ImageCanvas::ImageCanvas(int w, int h, uint8_t r, uint8_t g, uint8_t b)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3) {
    for (std::size_t i = 0; i < pixels.size(); i += 3) {
        pixels[i] = r;
        pixels[i + 1] = g;
        pixels[i + 2] = b;
    }
}

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t read_u32be(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& payload) {
    put_u32be(out, static_cast<uint32_t>(payload.size()));
    std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32be(out, static_cast<uint32_t>(crc));
}

constexpr uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

// Paeth predictor, needed only by the decoder's un-filtering.
uint8_t paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
    if (pb <= pc) return static_cast<uint8_t>(b);
    return static_cast<uint8_t>(c);
}

} // namespace

std::vector<uint8_t> encode_png(const ImageCanvas& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
        throw std::runtime_error("png: canvas dimensions do not match pixel buffer");
    }
    std::vector<uint8_t> out(kSignature, kSignature + 8);

    std::vector<uint8_t> ihdr;
    put_u32be(ihdr, static_cast<uint32_t>(img.width));
    put_u32be(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor RGB
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    append_chunk(out, "IHDR", ihdr);

    // Scanlines with filter byte 0 (None).
    const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
    std::vector<uint8_t> raw((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw[(stride + 1) * y] = 0;
        std::memcpy(&raw[(stride + 1) * y + 1], &img.pixels[stride * y], stride);
    }

    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()),
                  6) != Z_OK) {
        throw std::runtime_error("png: deflate failed");
    }
    comp.resize(comp_size);
    append_chunk(out, "IDAT", comp);
    append_chunk(out, "IEND", {});
    return out;
}

ImageCanvas decode_png(const std::vector<uint8_t>& data) {
    if (data.size() < 8 || std::memcmp(data.data(), kSignature, 8) != 0) {
        throw std::runtime_error("png: bad signature");
    }
    std::size_t pos = 8;
    int width = 0, height = 0;
    std::vector<uint8_t> idat;
    bool seen_ihdr = false, seen_iend = false;
    while (pos + 8 <= data.size() && !seen_iend) {
        uint32_t len = read_u32be(&data[pos]);
        if (pos + 12 + len > data.size()) throw std::runtime_error("png: truncated chunk");
        std::string type(reinterpret_cast<const char*>(&data[pos + 4]), 4);
        const uint8_t* payload = &data[pos + 8];
        if (type == "IHDR") {
            if (len != 13) throw std::runtime_error("png: bad IHDR");
            width = static_cast<int>(read_u32be(payload));
            height = static_cast<int>(read_u32be(payload + 4));
            if (payload[8] != 8 || payload[9] != 2 || payload[10] != 0 ||
                payload[11] != 0 || payload[12] != 0) {
                throw std::runtime_error(
                    "png: unsupported format (need 8-bit RGB, non-interlaced)");
            }
            seen_ihdr = true;
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            seen_iend = true;
        }
        // Ancillary chunks are skipped.
        pos += 12 + len;
    }
    if (!seen_ihdr || width <= 0 || height <= 0) throw std::runtime_error("png: missing IHDR");
    if (idat.empty()) throw std::runtime_error("png: missing IDAT");

    const std::size_t stride = static_cast<std::size_t>(width) * 3;
    std::vector<uint8_t> raw((stride + 1) * height);
    uLongf raw_size = static_cast<uLongf>(raw.size());
    int rc = uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size()));
    if (rc != Z_OK || raw_size != raw.size()) {
        throw std::runtime_error("png: inflate failed");
    }

    ImageCanvas img(width, height);
    std::vector<uint8_t> prev(stride, 0);
    for (int y = 0; y < height; ++y) {
        uint8_t filter = raw[(stride + 1) * y];
        const uint8_t* src = &raw[(stride + 1) * y + 1];
        uint8_t* dst = &img.pixels[stride * y];
        for (std::size_t i = 0; i < stride; ++i) {
            int a = i >= 3 ? dst[i - 3] : 0;          // left
            int b = prev[i];                           // up
            int c = i >= 3 ? prev[i - 3] : 0;          // upper-left
            switch (filter) {
                case 0: dst[i] = src[i]; break;
                case 1: dst[i] = static_cast<uint8_t>(src[i] + a); break;
                case 2: dst[i] = static_cast<uint8_t>(src[i] + b); break;
                case 3: dst[i] = static_cast<uint8_t>(src[i] + (a + b) / 2); break;
                case 4: dst[i] = static_cast<uint8_t>(src[i] + paeth(a, b, c)); break;
                default: throw std::runtime_error("png: unknown filter type");
            }
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return img;
}

void write_png(const std::string& path, const ImageCanvas& img) {
    auto bytes = encode_png(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("png: cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("png: write failed for " + path);
}

ImageCanvas read_png(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("png: cannot open " + path);
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    try {
        return decode_png(data);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string(e.what()) + " (" + path + ")");
    }
}

} // namespace linevit
