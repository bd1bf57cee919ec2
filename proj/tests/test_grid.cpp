#include <doctest.h>

#include <algorithm>

#include "arfs/grid.hpp"

using namespace arfs;

namespace {

// Independent oracle: score every future candidate by (squared distance,
// raster index) and keep the first k. Kept deliberately dumb.
std::vector<int> brute_force_2d(int n, int k, const GridShape& shape) {
    struct Cand {
        int d2, j;
    };
    std::vector<Cand> cands;
    const int ar = n / shape.width, ac = n % shape.width;
    for (int j = n; j < shape.tokens(); ++j) {
        const int dr = ar - j / shape.width, dc = ac - j % shape.width;
        cands.push_back({dr * dr + dc * dc, j});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        return a.d2 != b.d2 ? a.d2 < b.d2 : a.j < b.j;
    });
    std::vector<int> out;
    for (size_t i = 0; i < std::min<size_t>(size_t(k), cands.size()); ++i) out.push_back(cands[i].j);
    return out;
}

}  // namespace

TEST_CASE("raster/coord bijection and examples") {
    const GridShape s{4, 4};
    CHECK(raster_to_coord(0, s) == GridCoord{0, 0});
    CHECK(raster_to_coord(4, s) == GridCoord{1, 0});
    CHECK(raster_to_coord(7, s) == GridCoord{1, 3});

    for (int h = 1; h <= 7; ++h) {
        for (int w = 1; w <= 7; ++w) {
            const GridShape shape{h, w};
            for (int n = 0; n < shape.tokens(); ++n) {
                CHECK(coord_to_raster(raster_to_coord(n, shape), shape) == n);
            }
        }
    }
    CHECK_THROWS_AS(raster_to_coord(-1, s), std::invalid_argument);
    CHECK_THROWS_AS(raster_to_coord(16, s), std::invalid_argument);
}

TEST_CASE("1d neighborhoods clip at the sequence end") {
    CHECK(neighborhood_1d(5, 3, 16).targets == std::vector<int>{5, 6, 7});
    CHECK(neighborhood_1d(15, 3, 16).targets == std::vector<int>{15});
    CHECK(neighborhood_1d(14, 3, 16).targets == std::vector<int>{14, 15});
    CHECK_THROWS_AS(neighborhood_1d(16, 3, 16), std::invalid_argument);
    CHECK_THROWS_AS(neighborhood_1d(5, 0, 16), std::invalid_argument);
}

TEST_CASE("2d neighborhoods: self, right, below for interior anchors") {
    const GridShape s{4, 4};
    CHECK(neighborhood_2d(5, 3, s).targets == std::vector<int>{5, 6, 9});
    // right-edge anchor: the next raster index is far away in grid space
    CHECK(neighborhood_2d(7, 3, s).targets == std::vector<int>{7, 11, 10});
    CHECK(neighborhood_2d(15, 3, s).targets == std::vector<int>{15});
}

TEST_CASE("2d neighborhoods match the brute-force oracle up to 16x16") {
    for (int h = 1; h <= 16; ++h) {
        for (int w = 1; w <= 16; ++w) {
            const GridShape shape{h, w};
            for (const int k : {1, 3, 4, 9}) {
                for (int n = 0; n < shape.tokens(); ++n) {
                    CHECK(neighborhood_2d(n, k, shape).targets == brute_force_2d(n, k, shape));
                }
            }
        }
    }
}

TEST_CASE("layouts agree at k = 1 and stay future-restricted") {
    const GridShape shape{5, 7};
    for (int n = 0; n < shape.tokens(); ++n) {
        CHECK(neighborhood_1d(n, 1, shape.tokens()).targets == std::vector<int>{n});
        CHECK(neighborhood_2d(n, 1, shape).targets == std::vector<int>{n});
        for (const int k : {3, 9}) {
            for (int j : neighborhood_2d(n, k, shape).targets) CHECK(j >= n);
            for (int j : neighborhood_1d(n, k, shape.tokens()).targets) CHECK(j >= n);
        }
    }
}

TEST_CASE("block-causal masks") {
    const AttnMask full = block_causal_mask(4, 4);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) CHECK(full.at(i, j));
    }

    const AttnMask causal = block_causal_mask(4, 1);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) CHECK(causal.at(i, j) == (j <= i));
    }

    const AttnMask b2 = block_causal_mask(4, 2);
    for (int i : {0, 1}) {
        CHECK(mask_row_limits(b2)[size_t(i)] == 2);
    }
    for (int i : {2, 3}) {
        CHECK(mask_row_limits(b2)[size_t(i)] == 4);
    }

    CHECK_THROWS_AS(block_causal_mask(4, 0), std::invalid_argument);
    CHECK_THROWS_AS(block_causal_mask(4, 5), std::invalid_argument);
}

TEST_CASE("mask nesting: coarser blocks allow strictly more") {
    const int n = 12;
    const std::vector<int> blocks{1, 2, 3, 4, 6, 12};
    for (size_t a = 0; a + 1 < blocks.size(); ++a) {
        const AttnMask ma = block_causal_mask(n, blocks[a]);
        const AttnMask mb = block_causal_mask(n, blocks[a + 1]);
        // note: nesting holds along divisor chains (1 | 2 | 4 | 12 ...)
        if (blocks[a + 1] % blocks[a] != 0) continue;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (ma.at(i, j)) CHECK(mb.at(i, j));
            }
        }
    }
}
