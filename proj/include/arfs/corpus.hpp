#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "arfs/grid.hpp"
#include "arfs/rng.hpp"

namespace arfs {

// Class-conditioned quadrant corpus. Each class owns a disjoint palette of
// palette_size tokens; a sample fills its four quadrants with distinct palette
// slots chosen by a per-sample permutation, then flips tokens to uniform noise
// with probability noise_p. The permutation forces a raster decoder to carry
// the early quadrants' choices all the way to the last one.
struct CorpusConfig {
    int vocab_size = 64;
    GridShape shape{16, 16};
    int num_classes = 8;
    int palette_size = 4;
    double noise_p = 0.1;
    uint64_t seed = 1234;

    void validate() const;
    int palette_token(int cls, int slot) const { return cls * palette_size + slot; }
    // Owning class of a token, or -1 if the token is outside every palette.
    int palette_owner(int token) const {
        return token < num_classes * palette_size ? token / palette_size : -1;
    }
    // Quadrant id in {0..3}: top/bottom half by row, left/right half by column.
    int quadrant(int row, int col) const {
        return (row >= (shape.height + 1) / 2 ? 2 : 0) + (col >= (shape.width + 1) / 2 ? 1 : 0);
    }
};

struct TokenGrid {
    int class_label = 0;
    std::vector<uint16_t> tokens;

    bool operator==(const TokenGrid&) const = default;
};

struct CoherenceReport {
    double score = 0.0;
    std::array<int, 4> quadrant_majority{};  // majority token per quadrant
};

TokenGrid generate_sample(const CorpusConfig& cfg, int cls, Rng& rng);
CoherenceReport coherence_score(const TokenGrid& grid, const CorpusConfig& cfg);

// Deterministic lazily-generated sample stream; sample i is a pure function of
// (cfg, stream key, i), so streams can be consumed in any order or in parallel.
struct SampleStream {
    CorpusConfig cfg;
    uint64_t key = 0;
    int count = 0;

    TokenGrid get(int i) const;
};

struct Splits {
    SampleStream train;
    SampleStream val;
};

Splits make_splits(const CorpusConfig& cfg, int n_train, int n_val);

// Dump format: 16-byte header (magic "ARFSCORP", version u16, V u16, height
// u16, width u16), then per record class u16 + N token ids u16, little-endian.
void write_corpus(const std::string& path, const CorpusConfig& cfg,
                  const std::vector<TokenGrid>& samples);
std::vector<TokenGrid> read_corpus(const std::string& path, CorpusConfig* cfg_out);

}  // namespace arfs
