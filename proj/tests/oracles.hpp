#pragma once

// Brute-force reference implementations used only by tests.

#include "medseg/grid.hpp"

#include <cmath>
#include <random>
#include <utility>
#include <vector>

namespace oracle {

inline double dsc_by_counting(const medseg::BinaryMask& p, const medseg::BinaryMask& g) {
    long inter = 0;
    long np = 0;
    long ng = 0;
    for (int r = 0; r < p.height; ++r) {
        for (int c = 0; c < p.width; ++c) {
            np += p(r, c);
            ng += g(r, c);
            inter += p(r, c) * g(r, c);
        }
    }
    return np + ng == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

inline std::vector<std::pair<int, int>> border_points(const medseg::BinaryMask& m) {
    std::vector<std::pair<int, int>> out;
    for (int r = 0; r < m.height; ++r) {
        for (int c = 0; c < m.width; ++c) {
            if (!m(r, c)) continue;
            const bool edge = r == 0 || c == 0 || r == m.height - 1 || c == m.width - 1 || !m(r - 1, c) ||
                              !m(r + 1, c) || !m(r, c - 1) || !m(r, c + 1);
            if (edge) out.emplace_back(r, c);
        }
    }
    return out;
}

inline double nsd_brute_force(const medseg::BinaryMask& p, const medseg::BinaryMask& g, double tau) {
    const auto bp = border_points(p);
    const auto bg = border_points(g);
    if (bp.empty() && bg.empty()) return 1.0;
    if (bp.empty() || bg.empty()) return 0.0;
    auto count_within = [tau](const auto& from, const auto& to) {
        long n = 0;
        for (auto [r, c] : from) {
            double best = 1e300;
            for (auto [rr, cc] : to) best = std::min(best, std::hypot(double(r - rr), double(c - cc)));
            if (best <= tau) ++n;
        }
        return n;
    };
    return static_cast<double>(count_within(bp, bg) + count_within(bg, bp)) /
           static_cast<double>(bp.size() + bg.size());
}

/// Random pair of masks up to `max_side` square, mixing blobs, noise and empties.
inline std::pair<medseg::BinaryMask, medseg::BinaryMask> random_mask_pair(std::mt19937& rng, int max_side) {
    const int h = 1 + static_cast<int>(rng() % static_cast<unsigned>(max_side));
    const int w = 1 + static_cast<int>(rng() % static_cast<unsigned>(max_side));
    auto make = [&] {
        medseg::BinaryMask m(h, w);
        const unsigned mode = rng() % 4;
        if (mode == 0) return m; // empty
        const double density = mode == 1 ? 0.15 : (mode == 2 ? 0.5 : 0.85);
        for (auto& v : m.values) v = (rng() % 1000) < density * 1000 ? 1 : 0;
        return m;
    };
    return {make(), make()};
}

} // namespace oracle
