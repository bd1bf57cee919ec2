#pragma once

#include <cstdint>
#include <vector>

namespace arfs {

struct GridShape {
    int height = 0;
    int width = 0;

    int tokens() const { return height * width; }
    bool operator==(const GridShape&) const = default;
};

struct GridCoord {
    int row = 0;
    int col = 0;

    bool operator==(const GridCoord&) const = default;
};

// Ordered future positions attached to one anchor. Targets are sorted by
// (Euclidean distance, raster index) and never reach behind the anchor.
struct Neighborhood {
    int anchor = 0;
    std::vector<int> targets;
};

enum class FsLayout { raster_1d, grid_2d };

// Dense boolean attention mask; allowed[i*size + j] means query i may attend
// key j. Every mask produced here is prefix-shaped per row, which the
// attention kernels exploit.
struct AttnMask {
    int size = 0;
    std::vector<uint8_t> allowed;

    bool at(int i, int j) const { return allowed[size_t(i) * size + j] != 0; }
};

GridCoord raster_to_coord(int n, const GridShape& shape);
int coord_to_raster(const GridCoord& c, const GridShape& shape);

Neighborhood neighborhood_1d(int n, int k, int seq_len);
Neighborhood neighborhood_2d(int n, int k, const GridShape& shape);

// Per-anchor neighborhoods for all raster positions of the grid.
std::vector<Neighborhood> all_neighborhoods(FsLayout layout, int k, const GridShape& shape);

// allowed[i][j] = floor(j/block) <= floor(i/block). block = 1 is the causal
// mask, block = n is fully bidirectional.
AttnMask block_causal_mask(int n, int block);

inline AttnMask causal_mask(int n) { return block_causal_mask(n, 1); }

// Converts a prefix-shaped mask into per-row exclusive upper limits; throws if
// some row is not a contiguous prefix starting at column 0.
std::vector<int> mask_row_limits(const AttnMask& mask);

}  // namespace arfs
