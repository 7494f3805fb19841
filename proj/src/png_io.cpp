#include "storydiff/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace storydiff {

namespace {

const uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data, size_t n) {
    put_u32(out, uint32_t(n));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (n) out.insert(out.end(), data, data + n);
    uint32_t crc = uint32_t(crc32(0, out.data() + start, uInt(4 + n)));
    put_u32(out, crc);
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

std::vector<uint8_t> encode_png_rgb8(const ImageU8& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.rgb.size() != size_t(img.width) * size_t(img.height) * 3)
        throw ValidationError("encode_png: bad image dimensions");

    std::vector<uint8_t> out(kSignature, kSignature + 8);

    uint8_t ihdr[13];
    ihdr[0] = uint8_t(uint32_t(img.width) >> 24);
    ihdr[1] = uint8_t(uint32_t(img.width) >> 16);
    ihdr[2] = uint8_t(uint32_t(img.width) >> 8);
    ihdr[3] = uint8_t(img.width);
    ihdr[4] = uint8_t(uint32_t(img.height) >> 24);
    ihdr[5] = uint8_t(uint32_t(img.height) >> 16);
    ihdr[6] = uint8_t(uint32_t(img.height) >> 8);
    ihdr[7] = uint8_t(img.height);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // color type: truecolor
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter method
    ihdr[12] = 0;  // no interlace
    put_chunk(out, "IHDR", ihdr, 13);

    // raw scanlines, filter byte 0 per row
    size_t stride = size_t(img.width) * 3;
    std::vector<uint8_t> raw((stride + 1) * size_t(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw[size_t(y) * (stride + 1)] = 0;
        std::memcpy(raw.data() + size_t(y) * (stride + 1) + 1, img.rgb.data() + size_t(y) * stride,
                    stride);
    }

    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw IoError("encode_png: deflate failed");
    put_chunk(out, "IDAT", compressed.data(), bound);
    put_chunk(out, "IEND", nullptr, 0);
    return out;
}

ImageU8 decode_png_rgb8(const uint8_t* data, size_t size) {
    if (size < 8 || std::memcmp(data, kSignature, 8) != 0)
        throw IoError("decode_png: not a PNG (bad signature)");

    size_t pos = 8;
    int width = 0, height = 0;
    bool have_ihdr = false, have_iend = false;
    std::vector<uint8_t> idat;

    while (pos < size) {
        if (pos + 8 > size) throw IoError("decode_png: truncated chunk header");
        uint32_t len = get_u32(data + pos);
        char type[5] = {0};
        std::memcpy(type, data + pos + 4, 4);
        if (pos + 12 + len > size) throw IoError("decode_png: truncated chunk data");
        uint32_t expect = uint32_t(crc32(0, data + pos + 4, uInt(4 + len)));
        uint32_t actual = get_u32(data + pos + 8 + len);
        if (expect != actual) throw IoError(std::string("decode_png: CRC mismatch in ") + type);
        const uint8_t* body = data + pos + 8;

        if (std::strcmp(type, "IHDR") == 0) {
            if (len != 13) throw IoError("decode_png: bad IHDR length");
            width = int(get_u32(body));
            height = int(get_u32(body + 4));
            if (body[8] != 8 || body[9] != 2)
                throw IoError("decode_png: only 8-bit RGB supported");
            if (body[12] != 0) throw IoError("decode_png: interlaced PNGs unsupported");
            have_ihdr = true;
        } else if (std::strcmp(type, "IDAT") == 0) {
            idat.insert(idat.end(), body, body + len);
        } else if (std::strcmp(type, "IEND") == 0) {
            have_iend = true;
            break;
        }
        pos += 12 + len;
    }
    if (!have_ihdr) throw IoError("decode_png: missing IHDR");
    if (!have_iend) throw IoError("decode_png: missing IEND (truncated file)");
    if (width <= 0 || height <= 0) throw IoError("decode_png: bad dimensions");

    size_t stride = size_t(width) * 3;
    std::vector<uint8_t> raw((stride + 1) * size_t(height));
    uLongf out_len = uLongf(raw.size());
    int zr = uncompress(raw.data(), &out_len, idat.data(), uLong(idat.size()));
    if (zr != Z_OK || out_len != raw.size()) throw IoError("decode_png: inflate failed");

    ImageU8 img;
    img.width = width;
    img.height = height;
    img.rgb.resize(stride * size_t(height));
    std::vector<uint8_t> prev(stride, 0);
    for (int y = 0; y < height; ++y) {
        const uint8_t* src = raw.data() + size_t(y) * (stride + 1);
        uint8_t filter = src[0];
        uint8_t* dst = img.rgb.data() + size_t(y) * stride;
        for (size_t i = 0; i < stride; ++i) {
            int x = src[1 + i];
            int a = i >= 3 ? dst[i - 3] : 0;       // left
            int b = prev[i];                        // up
            int c = i >= 3 ? prev[i - 3] : 0;       // up-left
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default: throw IoError("decode_png: unknown filter type");
            }
            dst[i] = uint8_t(x & 0xFF);
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return img;
}

void write_png_rgb8(const std::string& path, const ImageU8& img) {
    auto bytes = encode_png_rgb8(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

ImageU8 read_png_rgb8(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    try {
        return decode_png_rgb8(bytes.data(), bytes.size());
    } catch (const IoError& e) {
        throw IoError(std::string(e.what()) + " [" + path + "]");
    }
}

}  // namespace storydiff
