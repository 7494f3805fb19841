#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "storydiff/tensor.hpp"

namespace storydiff {

// 8-bit RGB image, rows top to bottom.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;  // width * height * 3

    bool operator==(const ImageU8& o) const {
        return width == o.width && height == o.height && rgb == o.rgb;
    }
};

// Minimal PNG round-trip for 8-bit RGB. Encoding is fully deterministic
// (fixed zlib level, filter 0, single IDAT); decoding handles the standard
// filter set and validates chunk CRCs, throwing IoError with a reason.
std::vector<uint8_t> encode_png_rgb8(const ImageU8& img);
ImageU8 decode_png_rgb8(const uint8_t* data, size_t size);

void write_png_rgb8(const std::string& path, const ImageU8& img);
ImageU8 read_png_rgb8(const std::string& path);

// Pixel-value conventions: clean images live in [-1, 1]; u8 <-> real mapping
// is v/255*2-1 and its exact inverse with round-to-nearest.
template <class S>
TensorT<S> image_to_tensor(const ImageU8& img) {
    TensorT<S> t({3, img.height, img.width});
    int64_t hw = int64_t(img.height) * img.width;
    for (int64_t i = 0; i < hw; ++i)
        for (int c = 0; c < 3; ++c)
            t.data()[c * hw + i] = S(img.rgb[size_t(i * 3 + c)] / 255.0 * 2.0 - 1.0);
    return t;
}

template <class S>
ImageU8 tensor_to_image(const TensorT<S>& t) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw ValidationError("tensor_to_image: want (3,H,W)");
    ImageU8 img;
    img.height = int(t.dim(1));
    img.width = int(t.dim(2));
    int64_t hw = int64_t(img.height) * img.width;
    img.rgb.resize(size_t(hw * 3));
    for (int64_t i = 0; i < hw; ++i)
        for (int c = 0; c < 3; ++c) {
            double v = (double(t.data()[c * hw + i]) + 1.0) / 2.0 * 255.0;
            v = std::min(255.0, std::max(0.0, v));
            img.rgb[size_t(i * 3 + c)] = uint8_t(std::lround(v));
        }
    return img;
}

}  // namespace storydiff
