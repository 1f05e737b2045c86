#pragma once

// Wire encodings: base64 and the run-length mask format
//   {"size": [H, W], "counts": [bg, fg, bg, ...]}
// (row-major, first run is background and may be 0).

#include "medseg/errors.hpp"
#include "medseg/grid.hpp"
#include "medseg/png_io.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace medseg {

inline std::string base64_encode(std::string_view in) {
    static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < in.size(); i += 3) {
        const std::uint32_t v = (std::uint32_t(std::uint8_t(in[i])) << 16) | (std::uint32_t(std::uint8_t(in[i + 1])) << 8) |
                                std::uint8_t(in[i + 2]);
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += tbl[v & 63];
    }
    if (i + 1 == in.size()) {
        const std::uint32_t v = std::uint32_t(std::uint8_t(in[i])) << 16;
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == in.size()) {
        const std::uint32_t v = (std::uint32_t(std::uint8_t(in[i])) << 16) | (std::uint32_t(std::uint8_t(in[i + 1])) << 8);
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

inline std::string base64_encode(const std::vector<std::uint8_t>& in) {
    return base64_encode(std::string_view(reinterpret_cast<const char*>(in.data()), in.size()));
}

/// Strict decoder: whitespace is skipped, anything else outside the
/// alphabet or misplaced padding throws FormatError.
inline std::vector<std::uint8_t> base64_decode(std::string_view in) {
    static const auto rev = [] {
        std::array<int, 256> r{};
        r.fill(-1);
        const std::string_view tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
        for (std::size_t i = 0; i < tbl.size(); ++i) r[static_cast<unsigned char>(tbl[i])] = static_cast<int>(i);
        return r;
    }();
    std::string clean;
    clean.reserve(in.size());
    for (char c : in) {
        if (c == ' ' || c == '\n' || c == '\r' || c == '\t') continue;
        clean.push_back(c);
    }
    if (clean.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(clean.size() / 4 * 3);
    for (std::size_t i = 0; i < clean.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = clean[i + static_cast<std::size_t>(k)];
            if (c == '=') {
                if (i + 4 != clean.size() || k < 2) throw FormatError("misplaced base64 padding");
                v[k] = 0;
                ++pad;
            } else {
                if (pad) throw FormatError("misplaced base64 padding");
                v[k] = rev[static_cast<unsigned char>(c)];
                if (v[k] < 0) throw FormatError("invalid base64 character");
            }
        }
        const std::uint32_t x = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) | (std::uint32_t(v[2]) << 6) | std::uint32_t(v[3]);
        out.push_back(static_cast<std::uint8_t>(x >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>((x >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(x & 0xff));
    }
    return out;
}

struct Rle {
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> counts;

    friend bool operator==(const Rle&, const Rle&) = default;
};

inline Rle rle_encode(const BinaryMask& m) {
    Rle r{m.height, m.width, {}};
    std::uint8_t current = 0;
    std::uint32_t run = 0;
    for (auto v : m.values) {
        const std::uint8_t b = v ? 1 : 0;
        if (b != current) {
            r.counts.push_back(run);
            run = 0;
            current = b;
        }
        ++run;
    }
    r.counts.push_back(run);
    return r;
}

inline BinaryMask rle_decode(const Rle& r) {
    if (r.height <= 0 || r.width <= 0) throw FormatError("RLE size must be positive");
    BinaryMask m(r.height, r.width);
    std::size_t at = 0;
    std::uint8_t v = 0;
    for (auto c : r.counts) {
        if (c > m.size() - at) throw FormatError("RLE runs exceed the mask size");
        std::fill_n(m.values.begin() + static_cast<std::ptrdiff_t>(at), c, v);
        at += c;
        v ^= 1;
    }
    if (at != m.size()) throw FormatError("RLE runs do not cover the mask");
    return m;
}

inline nlohmann::ordered_json rle_to_json(const Rle& r) { return {{"size", {r.height, r.width}}, {"counts", r.counts}}; }

inline Rle rle_from_json(const nlohmann::json& j) {
    try {
        const auto size = j.at("size");
        if (!size.is_array() || size.size() != 2) throw FormatError("RLE size must be [H, W]");
        return Rle{size[0].get<int>(), size[1].get<int>(), j.at("counts").get<std::vector<std::uint32_t>>()};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("RLE: ") + e.what());
    }
}

inline std::string mask_to_png_base64(const BinaryMask& m) { return base64_encode(encode_png(to_gray8(m))); }

inline BinaryMask mask_from_png_base64(std::string_view b64) { return mask_from_gray8(decode_png(base64_decode(b64))); }

} // namespace medseg
