#pragma once

// 8-bit grayscale PNG encode/decode on top of libpng's simplified API.

#include "medseg/errors.hpp"
#include "medseg/grid.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace medseg {

struct Gray8 {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;
};

inline Gray8 decode_png(const std::vector<std::uint8_t>& bytes) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw FormatError(std::string("PNG decode failed: ") + image.message);
    }
    image.format = PNG_FORMAT_GRAY;
    Gray8 out;
    out.height = static_cast<int>(image.height);
    out.width = static_cast<int>(image.width);
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&image);
        throw FormatError(std::string("PNG decode failed: ") + image.message);
    }
    return out;
}

inline std::vector<std::uint8_t> encode_png(const Gray8& img) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(image, size, 0, img.pixels.data(), 0, nullptr)) {
        throw FormatError(std::string("PNG encode failed: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
        throw FormatError(std::string("PNG encode failed: ") + image.message);
    }
    out.resize(size);
    return out;
}

inline std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline Gray8 to_gray8(const ImageGrid& img) {
    Gray8 g{img.height, img.width, std::vector<std::uint8_t>(img.size())};
    for (std::size_t i = 0; i < img.size(); ++i) g.pixels[i] = to_byte(img.values[i]);
    return g;
}

inline Gray8 to_gray8(const BinaryMask& mask) {
    Gray8 g{mask.height, mask.width, std::vector<std::uint8_t>(mask.size())};
    for (std::size_t i = 0; i < mask.size(); ++i) g.pixels[i] = mask.values[i] ? 255 : 0;
    return g;
}

inline ImageGrid image_from_gray8(const Gray8& g) {
    ImageGrid img(g.height, g.width);
    for (std::size_t i = 0; i < img.size(); ++i) img.values[i] = static_cast<float>(g.pixels[i]) / 255.0f;
    return img;
}

/// Pixels >= 128 are foreground.
inline BinaryMask mask_from_gray8(const Gray8& g) {
    BinaryMask m(g.height, g.width);
    for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = g.pixels[i] >= 128 ? 1 : 0;
    return m;
}

/// Rounds intensities to the 8-bit grid so in-memory images match their PNG.
inline void quantize_8bit(ImageGrid& img) {
    for (auto& v : img.values) v = static_cast<float>(to_byte(v)) / 255.0f;
}

} // namespace medseg
