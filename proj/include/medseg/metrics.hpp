#pragma once

// Segmentation (DSC, NSD) and VQA (closed accuracy, open recall) metrics.

#include "medseg/errors.hpp"
#include "medseg/grid.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace medseg::metrics {

/// 2|P∩G| / (|P|+|G|); 1 when both masks are empty.
inline double dsc(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "dsc");
    std::size_t inter = 0;
    std::size_t p = 0;
    std::size_t g = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred.values[i] != 0;
        const bool b = gt.values[i] != 0;
        inter += (a && b) ? 1 : 0;
        p += a ? 1 : 0;
        g += b ? 1 : 0;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the grid count as background.
inline BinaryMask border(const BinaryMask& m) {
    BinaryMask out(m.height, m.width);
    auto bg = [&](int r, int c) { return r < 0 || c < 0 || r >= m.height || c >= m.width || m(r, c) == 0; };
    for (int r = 0; r < m.height; ++r) {
        for (int c = 0; c < m.width; ++c) {
            if (m(r, c) && (bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1))) out(r, c) = 1;
        }
    }
    return out;
}

namespace detail {

// 1-D squared distance transform (Felzenszwalb & Huttenlocher) over integers.
inline void edt_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& d) {
    constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    const int n = static_cast<int>(f.size());
    std::vector<int> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n) + 1);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] >= inf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -std::numeric_limits<double>::infinity();
            z[1] = std::numeric_limits<double>::infinity();
            continue;
        }
        auto intersect = [&](int p) {
            return (static_cast<double>(f[q] + static_cast<std::int64_t>(q) * q) -
                    static_cast<double>(f[p] + static_cast<std::int64_t>(p) * p)) /
                   (2.0 * (q - p));
        };
        double s = intersect(v[k]);
        while (s <= z[k]) {
            --k; // z[0] is -inf, so k stays >= 0
            s = intersect(v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    d.assign(static_cast<std::size_t>(n), inf);
    if (k < 0) return;
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const std::int64_t dq = q - v[j];
        d[q] = dq * dq + f[v[j]];
    }
}

} // namespace detail

/// Exact squared Euclidean distance from every pixel centre to the nearest
/// set pixel of `sites`. Unreachable pixels hold a large sentinel.
inline std::vector<std::int64_t> squared_distance_map(const BinaryMask& sites) {
    constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    const int h = sites.height;
    const int w = sites.width;
    std::vector<std::int64_t> grid(sites.size(), inf);
    std::vector<std::int64_t> f;
    std::vector<std::int64_t> d;
    for (int c = 0; c < w; ++c) {
        f.assign(static_cast<std::size_t>(h), inf);
        for (int r = 0; r < h; ++r) f[r] = sites(r, c) ? 0 : inf;
        detail::edt_1d(f, d);
        for (int r = 0; r < h; ++r) grid[static_cast<std::size_t>(r) * w + c] = d[r];
    }
    for (int r = 0; r < h; ++r) {
        f.assign(grid.begin() + static_cast<std::ptrdiff_t>(r) * w, grid.begin() + static_cast<std::ptrdiff_t>(r + 1) * w);
        detail::edt_1d(f, d);
        std::copy(d.begin(), d.end(), grid.begin() + static_cast<std::ptrdiff_t>(r) * w);
    }
    return grid;
}

/// Normalized surface distance: fraction of border pixels of either mask
/// lying within `tau` pixels (Euclidean, centre to centre) of the other
/// mask's border. Both empty -> 1, exactly one empty -> 0.
inline double nsd(const BinaryMask& pred, const BinaryMask& gt, double tau) {
    require_same_shape(pred, gt, "nsd");
    if (!(tau > 0.0)) throw InvalidArgument("nsd tolerance must be positive");
    const auto bp = border(pred);
    const auto bg = border(gt);
    const std::size_t np = foreground_count(bp);
    const std::size_t ng = foreground_count(bg);
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;

    const double tau2 = tau * tau;
    auto within = [&](const BinaryMask& from, const std::vector<std::int64_t>& dist_to_other) {
        std::size_t n = 0;
        for (std::size_t i = 0; i < from.size(); ++i) {
            if (from.values[i] && static_cast<double>(dist_to_other[i]) <= tau2) ++n;
        }
        return n;
    };
    const std::size_t hits = within(bp, squared_distance_map(bg)) + within(bg, squared_distance_map(bp));
    return static_cast<double>(hits) / static_cast<double>(np + ng);
}

struct MeanStd {
    double mean = 0;
    double std = 0;
};

/// Population mean and standard deviation; zeros for an empty list.
inline MeanStd mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {};
    double sum = 0;
    for (double x : xs) sum += x;
    const double mean = sum / static_cast<double>(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

/// Per-slot scores, one entry per slot position in max(|pred|, |gt|).
struct SegReport {
    std::vector<double> dsc;
    std::vector<double> nsd;
    double tau = 1.0;

    MeanStd dsc_stats() const { return mean_std(dsc); }
    MeanStd nsd_stats() const { return mean_std(nsd); }
};

/// Pairs masks by slot order; a slot present on one side only scores 0.
inline void score_slots(const std::vector<BinaryMask>& pred, const std::vector<BinaryMask>& gt, SegReport& report) {
    const std::size_t n = std::max(pred.size(), gt.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (i < pred.size() && i < gt.size()) {
            report.dsc.push_back(dsc(pred[i], gt[i]));
            report.nsd.push_back(nsd(pred[i], gt[i], report.tau));
        } else {
            report.dsc.push_back(0.0);
            report.nsd.push_back(0.0);
        }
    }
}

/// Lowercase, punctuation removed, whitespace collapsed to single spaces.
inline std::string normalize_answer(std::string_view s) {
    std::string out;
    bool space = false;
    for (char ch : s) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::ispunct(c)) continue;
        if (std::isspace(c)) {
            space = !out.empty();
            continue;
        }
        if (space) out.push_back(' ');
        space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

inline double closed_accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& gts) {
    if (preds.size() != gts.size()) throw ShapeError("closed_accuracy: prediction/answer counts differ");
    if (gts.empty()) throw EmptyEvalSet("closed_accuracy on an empty list");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
        hits += normalize_answer(preds[i]) == normalize_answer(gts[i]) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(gts.size());
}

inline std::set<std::string> answer_tokens(std::string_view s) {
    std::set<std::string> out;
    std::istringstream in(normalize_answer(s));
    std::string w;
    while (in >> w) out.insert(w);
    return out;
}

/// Fraction of unique ground-truth tokens present in the prediction; 1 for
/// an empty ground truth.
inline double open_recall(std::string_view pred, std::string_view gt) {
    const auto g = answer_tokens(gt);
    if (g.empty()) return 1.0;
    const auto p = answer_tokens(pred);
    std::size_t hit = 0;
    for (const auto& t : g) hit += p.count(t);
    return static_cast<double>(hit) / static_cast<double>(g.size());
}

/// Closed questions are those whose reference answer normalizes to yes/no.
inline bool is_closed_answer(std::string_view gt) {
    const auto n = normalize_answer(gt);
    return n == "yes" || n == "no";
}

struct VqaReport {
    double closed_accuracy = 0;
    double open_recall = 0;
    std::size_t closed_count = 0;
    std::size_t open_count = 0;
};

} // namespace medseg::metrics
