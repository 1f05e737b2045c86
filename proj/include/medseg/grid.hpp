#pragma once

#include "medseg/errors.hpp"

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace medseg {

/// Dense row-major H x W grid.
template <class T>
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<T> values;

    Grid() = default;
    Grid(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {
        if (h <= 0 || w <= 0) {
            throw ShapeError("grid dimensions must be positive, got " + std::to_string(h) + "x" +
                             std::to_string(w));
        }
    }

    std::size_t size() const { return values.size(); }
    T& operator()(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
    const T& operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }

    bool same_shape(int h, int w) const { return height == h && width == w; }
    template <class U>
    bool same_shape(const Grid<U>& other) const {
        return height == other.height && width == other.width;
    }

    friend bool operator==(const Grid&, const Grid&) = default;
};

/// Grayscale image with intensities in [0, 1].
using ImageGrid = Grid<float>;
/// Ground-truth or thresholded mask; values are 0 or 1.
using BinaryMask = Grid<std::uint8_t>;
/// Real-valued decoder output before thresholding.
using LogitMask = Grid<float>;

inline std::size_t foreground_count(const BinaryMask& m) {
    return static_cast<std::size_t>(std::count_if(m.values.begin(), m.values.end(), [](auto v) { return v != 0; }));
}

inline bool is_binary(const BinaryMask& m) {
    return std::all_of(m.values.begin(), m.values.end(), [](auto v) { return v == 0 || v == 1; });
}

/// Threshold logits at zero.
inline BinaryMask binarize(const LogitMask& logits) {
    BinaryMask out(logits.height, logits.width);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out.values[i] = logits.values[i] > 0.0f ? 1 : 0;
    }
    return out;
}

template <class T, class U>
void require_same_shape(const Grid<T>& a, const Grid<U>& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
    }
}

} // namespace medseg
