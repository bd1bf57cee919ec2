#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arfs/config.hpp"
#include "arfs/corpus.hpp"
#include "arfs/foresight.hpp"
#include "arfs/model.hpp"
#include "arfs/runner.hpp"
#include "arfs/sampler.hpp"
#include "arfs/trainer.hpp"

namespace arfs {

struct EvalReport {
    double val_ntp = 0.0;
    double coherence_rate = 0.0;
    double smoothness_gap = 0.0;
    int samples_used = 0;
};

// Mean next-token nats over a validation stream, evaluation mode.
double eval_validation(const ArState<float>& state, const SampleStream& val, int count);

// Mean coherence of grids sampled with the given parameters, classes cycled
// uniformly, one forked RNG stream per sample.
double eval_coherence(const ArState<float>& state, const CorpusConfig& corpus,
                      const SampleParams& params, int n_samples, uint64_t seed);

// Mean cosine similarity of align-layer states over 4-adjacent grid pairs
// minus the same over an equal count of random pairs; averaged over grids.
double smoothness_gap(const ArState<float>& state, const std::vector<TokenGrid>& grids,
                      uint64_t seed);
// Same metric over externally supplied state rows (n x d); lets tests feed
// synthetic fields.
double smoothness_gap_rows(const std::vector<std::vector<float>>& row_sets, GridShape shape, int d,
                           uint64_t seed);

EvalReport evaluate(const ArState<float>& state, const RunConfig& cfg);

// Per-position frequency baseline (order 0) for the learnability gate:
// Laplace-smoothed train frequencies scored on the validation stream.
double order0_val_nats(const CorpusConfig& corpus, const SampleStream& train, int train_count,
                       const SampleStream& val, int val_count);

// ---------------------------------------------------------------------------
// FLOPs accounting: dense matmuls only, backward costed at twice the forward.

struct FlopsEstimate {
    double backbone_forward = 0.0;  // per sample
    double backbone_train = 0.0;    // forward + backward
    double ema_forward = 0.0;       // explicit foresight target pass
    double heads_train = 0.0;       // projection / output heads, fwd + bwd
    double encoder_forward = 0.0;   // implicit targets; precomputable, excluded from total
    double total_train = 0.0;
    double overhead_pct = 0.0;      // (total - backbone) / backbone
    double sampler_step = 0.0;      // per decoded token, per stream; mode-independent
};

FlopsEstimate flops_estimate(const ModelConfig& cfg, const ForesightConfig& fs,
                             int encoder_layers = 0, int encoder_width = 0, int head_hidden = 0);

// ---------------------------------------------------------------------------
// sweeps and paired-seed comparisons

struct SweepRow {
    double x = 0.0;
    double val_ntp = 0.0;
    double coherence = 0.0;
};

struct SweepResult {
    std::string x_name;
    std::vector<SweepRow> rows;  // strictly increasing x
};

// Gradually widens the encoder's attention blocks, trains implicit-foresight
// runs under each, and reports median validation NTP and coherence per block
// size over the given seeds.
SweepResult block_sweep(const RunConfig& base, const std::vector<int>& block_sizes, int seeds);

// Constant-lambda sweep for the explicit variant.
SweepResult lambda_sweep(const RunConfig& base, const std::vector<double>& lambdas, int seeds);

struct ConvergenceCurve {
    std::string name;
    std::vector<std::pair<int, double>> coherence_by_step;
    int crossing_step = -1;  // first eval step with coherence >= threshold, -1 if never
};

struct ConvergenceResult {
    double threshold = 0.0;
    std::vector<ConvergenceCurve> curves;               // one per (config, seed)
    std::vector<std::pair<std::string, int>> median_crossing;  // per config name
};

// Trains each named config with shared per-seed data/init streams, evaluating
// coherence every eval_every steps, and reports the first threshold crossing.
ConvergenceResult convergence_compare(const std::vector<std::pair<std::string, RunConfig>>& configs,
                                      double threshold, int max_steps, int seeds,
                                      bool stop_at_crossing = true);

// ---------------------------------------------------------------------------
// artifact output

// Binary PGM (P5), pixel = floor(255 * token / (V - 1)).
void write_pgm(const std::string& path, const TokenGrid& grid, const GridShape& shape, int vocab);

struct SvgSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

// Self-contained SVG line chart with labeled axes.
void write_svg_chart(const std::string& path, const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<SvgSeries>& series);

void write_sweep_csv(const std::string& path, const SweepResult& sweep);

}  // namespace arfs
