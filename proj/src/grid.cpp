#include "arfs/grid.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace arfs {

GridCoord raster_to_coord(int n, const GridShape& shape) {
    if (n < 0 || n >= shape.tokens()) {
        throw std::invalid_argument("raster index " + std::to_string(n) + " out of range for " +
                                    std::to_string(shape.height) + "x" + std::to_string(shape.width));
    }
    return GridCoord{n / shape.width, n % shape.width};
}

int coord_to_raster(const GridCoord& c, const GridShape& shape) {
    if (c.row < 0 || c.row >= shape.height || c.col < 0 || c.col >= shape.width) {
        throw std::invalid_argument("grid coordinate out of range");
    }
    return c.row * shape.width + c.col;
}

Neighborhood neighborhood_1d(int n, int k, int seq_len) {
    if (n < 0 || n >= seq_len) throw std::invalid_argument("anchor out of range");
    if (k < 1) throw std::invalid_argument("k must be positive");
    Neighborhood nb{n, {}};
    const int end = std::min(seq_len, n + k);
    nb.targets.reserve(size_t(end - n));
    for (int j = n; j < end; ++j) nb.targets.push_back(j);
    return nb;
}

Neighborhood neighborhood_2d(int n, int k, const GridShape& shape) {
    const int total = shape.tokens();
    if (n < 0 || n >= total) throw std::invalid_argument("anchor out of range");
    if (k < 1) throw std::invalid_argument("k must be positive");

    const GridCoord a = raster_to_coord(n, shape);

    // (squared distance, raster index) over the future-restricted candidates;
    // positions near the end simply yield a short list.
    std::vector<std::pair<int, int>> scored;
    scored.reserve(size_t(total - n));
    for (int j = n; j < total; ++j) {
        const int dr = a.row - j / shape.width;
        const int dc = a.col - j % shape.width;
        scored.emplace_back(dr * dr + dc * dc, j);
    }
    const size_t keep = std::min<size_t>(size_t(k), scored.size());
    std::partial_sort(scored.begin(), scored.begin() + keep, scored.end());

    Neighborhood nb{n, {}};
    nb.targets.reserve(keep);
    for (size_t i = 0; i < keep; ++i) nb.targets.push_back(scored[i].second);
    return nb;
}

std::vector<Neighborhood> all_neighborhoods(FsLayout layout, int k, const GridShape& shape) {
    const int total = shape.tokens();
    std::vector<Neighborhood> out;
    out.reserve(size_t(total));
    for (int n = 0; n < total; ++n) {
        out.push_back(layout == FsLayout::raster_1d ? neighborhood_1d(n, k, total)
                                                    : neighborhood_2d(n, k, shape));
    }
    return out;
}

AttnMask block_causal_mask(int n, int block) {
    if (n < 1) throw std::invalid_argument("mask size must be positive");
    if (block < 1 || block > n) throw std::invalid_argument("block size must lie in [1, n]");
    AttnMask m;
    m.size = n;
    m.allowed.assign(size_t(n) * n, 0);
    for (int i = 0; i < n; ++i) {
        const int limit = std::min(n, (i / block + 1) * block);
        for (int j = 0; j < limit; ++j) m.allowed[size_t(i) * n + j] = 1;
    }
    return m;
}

std::vector<int> mask_row_limits(const AttnMask& mask) {
    std::vector<int> limits(size_t(mask.size));
    for (int i = 0; i < mask.size; ++i) {
        int limit = 0;
        while (limit < mask.size && mask.at(i, limit)) ++limit;
        for (int j = limit; j < mask.size; ++j) {
            if (mask.at(i, j)) throw std::invalid_argument("mask row is not prefix-shaped");
        }
        if (limit <= i) throw std::invalid_argument("mask must allow self-attention");
        limits[size_t(i)] = limit;
    }
    return limits;
}

}  // namespace arfs
