#include "medseg/metrics.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace medseg;
using namespace medseg::metrics;

namespace {

BinaryMask from_points(int h, int w, std::initializer_list<std::pair<int, int>> pts) {
    BinaryMask m(h, w);
    for (auto [r, c] : pts) m(r, c) = 1;
    return m;
}

} // namespace

TEST_CASE("dsc", "[metrics]") {
    const auto a = from_points(4, 4, {{1, 1}, {1, 2}, {2, 2}});
    CHECK(dsc(a, a) == 1.0);
    CHECK(dsc(a, from_points(4, 4, {{3, 3}})) == 0.0);
    CHECK(dsc(from_points(2, 2, {{0, 0}, {0, 1}}), from_points(2, 2, {{0, 1}, {1, 1}})) == 0.5);
    CHECK(dsc(BinaryMask(3, 3), BinaryMask(3, 3)) == 1.0);
    CHECK_THROWS_AS(dsc(BinaryMask(3, 3), BinaryMask(4, 3)), ShapeError);
}

TEST_CASE("nsd analytic cases", "[metrics]") {
    const auto p = from_points(8, 8, {{3, 1}});
    const auto g = from_points(8, 8, {{3, 3}});
    CHECK(nsd(p, g, 1.0) == 0.0);
    CHECK(nsd(p, g, 2.0) == 1.0);
    const auto blob = from_points(8, 8, {{2, 2}, {2, 3}, {3, 2}, {3, 3}, {4, 4}});
    for (double tau : {0.5, 1.0, 3.0}) CHECK(nsd(blob, blob, tau) == 1.0);
    CHECK(nsd(BinaryMask(5, 5), BinaryMask(5, 5), 1.0) == 1.0);
    CHECK(nsd(blob, BinaryMask(8, 8), 1.0) == 0.0);
    CHECK_THROWS_AS(nsd(blob, blob, 0.0), InvalidArgument);
    CHECK_THROWS_AS(nsd(blob, blob, -1.0), InvalidArgument);
}

TEST_CASE("dsc and nsd agree with brute-force oracles", "[metrics][property]") {
    std::mt19937 rng(12345);
    for (int i = 0; i < 300; ++i) {
        const auto [p, g] = oracle::random_mask_pair(rng, 16);
        REQUIRE(dsc(p, g) == oracle::dsc_by_counting(p, g));
        REQUIRE(dsc(p, g) == dsc(g, p));
        double prev = -1;
        for (double tau : {0.5, 1.0, 1.5, 2.0, 3.0, 5.0}) {
            const double fast = nsd(p, g, tau);
            REQUIRE(std::abs(fast - oracle::nsd_brute_force(p, g, tau)) <= 1e-12);
            REQUIRE(fast == nsd(g, p, tau));
            REQUIRE(fast >= prev);
            REQUIRE(fast >= 0.0);
            REQUIRE(fast <= 1.0);
            prev = fast;
        }
    }
}

TEST_CASE("distance map matches pairwise distances on 64x64", "[metrics]") {
    std::mt19937 rng(99);
    BinaryMask sites(64, 64);
    for (int k = 0; k < 40; ++k) sites(static_cast<int>(rng() % 64), static_cast<int>(rng() % 64)) = 1;
    const auto d = squared_distance_map(sites);
    for (int r = 0; r < 64; r += 3) {
        for (int c = 0; c < 64; c += 5) {
            std::int64_t best = std::numeric_limits<std::int64_t>::max();
            for (int rr = 0; rr < 64; ++rr) {
                for (int cc = 0; cc < 64; ++cc) {
                    if (sites(rr, cc)) best = std::min<std::int64_t>(best, (r - rr) * (r - rr) + (c - cc) * (c - cc));
                }
            }
            REQUIRE(d[static_cast<std::size_t>(r) * 64 + c] == best);
        }
    }
}

TEST_CASE("closed accuracy and open recall", "[metrics]") {
    CHECK(closed_accuracy({"Yes.", "no", "no"}, {"yes", "no", "yes"}) == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(closed_accuracy({"a", "b"}, {"a", "b"}) == 1.0);
    CHECK_THROWS_AS(closed_accuracy({}, {}), EmptyEvalSet);

    CHECK(std::abs(open_recall("there is glass opacity", "ground glass opacity") - 2.0 / 3.0) <= 1e-15);
    CHECK(open_recall("ground glass opacity", "ground glass opacity") == 1.0);
    CHECK(open_recall("", "ground glass opacity") == 0.0);
    CHECK(open_recall("anything", "") == 1.0);
    // unique-token reading: repeated ground-truth words count once
    CHECK(open_recall("left", "left left lung") == 0.5);
}

TEST_CASE("score_slots pairs by order", "[metrics]") {
    const auto a = from_points(4, 4, {{1, 1}});
    SegReport r;
    score_slots({a}, {a, a}, r);
    REQUIRE(r.dsc.size() == 2);
    CHECK(r.dsc[0] == 1.0);
    CHECK(r.dsc[1] == 0.0);
    CHECK(r.nsd[1] == 0.0);
    const auto s = r.dsc_stats();
    CHECK(s.mean == 0.5);
    CHECK(s.std == 0.5);
}
