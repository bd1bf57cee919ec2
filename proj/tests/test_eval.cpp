#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "arfs/eval.hpp"

using namespace arfs;

namespace {

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.corpus.vocab_size = 16;
    cfg.corpus.shape = GridShape{4, 4};
    cfg.corpus.num_classes = 2;
    cfg.corpus.palette_size = 4;
    cfg.corpus.noise_p = 0.1;
    cfg.corpus.seed = 3;
    cfg.n_train = 64;
    cfg.n_val = 16;
    cfg.model = micro_model_config();
    cfg.train.batch_size = 4;
    cfg.train.total_steps = 30;
    cfg.train.eval_every = 10;
    cfg.train.seed = 17;
    cfg.eval.n_samples = 8;
    cfg.eval.smoothness_grids = 4;
    return cfg;
}

}  // namespace

TEST_CASE("an untrained near-uniform model scores close to ln V on validation") {
    RunConfig cfg = tiny_run_config();
    const ModelConfig model = cfg.resolved_model();
    ArState<float> st = make_state<float>(model, ForesightConfig{}, Rng(1));
    // shrink every weight so the logits are almost flat
    for (float& p : st.theta) p *= 1e-3f;
    const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
    const double nats = eval_validation(st, splits.val, 8);
    CHECK(nats == doctest::Approx(std::log(16.0)).epsilon(0.01));
    // repeated evaluation has no dropout path, so it is exactly stable
    CHECK(eval_validation(st, splits.val, 8) == nats);
}

TEST_CASE("a short training run beats both ln V and the order-0 frequency model") {
    RunConfig cfg = tiny_run_config();
    cfg.train.lr = 3e-3;
    cfg.train.total_steps = 250;
    const TrainRunResult run = run_training(cfg, "", nullptr, std::nullopt, false);
    const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
    const double trained = eval_validation(run.state, splits.val, 16);
    CHECK(trained < std::log(double(cfg.corpus.vocab_size)));

    const double order0 = order0_val_nats(cfg.corpus, splits.train, cfg.n_train, splits.val, 16);
    // the AR model conditions on class and history; position frequencies cannot
    CHECK(trained < order0);
}

TEST_CASE("smoothness gap is zero for identical rows and positive for a smooth field") {
    const GridShape shape{6, 6};
    const int d = 8;

    std::vector<float> rows(size_t(shape.tokens()) * d, 0.5f);
    CHECK(smoothness_gap_rows({rows}, shape, d, 5) == doctest::Approx(0.0).epsilon(1e-9));

    // Lipschitz position embedding: neighbors nearly parallel, distant pairs not
    std::vector<float> smooth(size_t(shape.tokens()) * d);
    for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 6; ++c) {
            float* row = smooth.data() + size_t(r * 6 + c) * d;
            for (int j = 0; j < d; ++j) {
                const double phase = 0.35 * (r * 0.9 + c * 1.1) + 0.7 * j;
                row[size_t(j)] = float(std::cos(phase));
            }
        }
    }
    CHECK(smoothness_gap_rows({smooth}, shape, d, 5) > 0.05);
}

TEST_CASE("smoothness gap on isotropic noise sits at the Monte-Carlo null") {
    const GridShape shape{8, 8};
    const int d = 16;
    Rng rng(99);
    std::vector<double> gaps;
    const int grids = 200;  // ~2e4 pairs on each side in total
    for (int g = 0; g < grids; ++g) {
        std::vector<float> rows(size_t(shape.tokens()) * d);
        for (float& v : rows) v = float(rng.normal());
        gaps.push_back(smoothness_gap_rows({rows}, shape, d, 1000 + uint64_t(g)));
    }
    double mean = 0.0, var = 0.0;
    for (double v : gaps) mean += v;
    mean /= gaps.size();
    for (double v : gaps) var += (v - mean) * (v - mean);
    var /= gaps.size();
    const double se = std::sqrt(var / gaps.size());
    CHECK(std::abs(mean) < 3.0 * se + 1e-3);
}

TEST_CASE("smoothness gap is invariant under a global orthogonal transform") {
    const GridShape shape{4, 4};
    const int d = 4;
    Rng rng(7);
    std::vector<float> rows(size_t(shape.tokens()) * d);
    for (float& v : rows) v = float(rng.normal());

    // Householder reflection H = I - 2uu^T
    std::vector<double> u(static_cast<size_t>(d));
    double norm = 0.0;
    for (auto& v : u) {
        v = rng.normal();
        norm += v * v;
    }
    for (auto& v : u) v /= std::sqrt(norm);
    std::vector<float> rotated(rows.size());
    for (int i = 0; i < shape.tokens(); ++i) {
        for (int a = 0; a < d; ++a) {
            double acc = rows[size_t(i) * d + a];
            double dotu = 0.0;
            for (int b = 0; b < d; ++b) dotu += u[size_t(b)] * rows[size_t(i) * d + b];
            acc -= 2.0 * u[size_t(a)] * dotu;
            rotated[size_t(i) * d + a] = float(acc);
        }
    }
    const double g1 = smoothness_gap_rows({rows}, shape, d, 44);
    const double g2 = smoothness_gap_rows({rotated}, shape, d, 44);
    CHECK(g1 == doctest::Approx(g2).epsilon(1e-5));
}

TEST_CASE("flops accounting reproduces the reference-scale table") {
    ModelConfig big;
    big.layers = 12;
    big.d_model = 768;
    big.n_heads = 12;
    big.vocab = 16384;
    big.shape = GridShape{16, 16};
    big.num_classes = 1000;
    big.align_layer = 8;

    ForesightConfig none;
    const FlopsEstimate base = flops_estimate(big, none);
    CHECK(base.total_train == doctest::Approx(1.70e11).epsilon(0.15));

    ForesightConfig imp = default_implicit_config();
    const FlopsEstimate fi = flops_estimate(big, imp, 12, 768, 2048);
    CHECK(std::abs(fi.overhead_pct - 6.6) < 3.0);

    ForesightConfig exp = default_explicit_config();
    const FlopsEstimate fe = flops_estimate(big, exp, 0, 0, 2048);
    CHECK(std::abs(fe.overhead_pct - 38.2) < 6.0);

    // the sampler's per-token cost never depends on the training mode
    CHECK(base.sampler_step == fi.sampler_step);
    CHECK(base.sampler_step == fe.sampler_step);
}

TEST_CASE("flops estimate is monotone in every size knob") {
    ModelConfig cfg;
    cfg.layers = 6;
    cfg.d_model = 96;
    cfg.n_heads = 4;
    cfg.vocab = 64;
    cfg.shape = GridShape{8, 8};
    cfg.align_layer = 4;
    ForesightConfig none;
    const double base = flops_estimate(cfg, none).total_train;

    ModelConfig more = cfg;
    more.layers += 2;
    CHECK(flops_estimate(more, none).total_train > base);
    more = cfg;
    more.d_model += 32;
    CHECK(flops_estimate(more, none).total_train > base);
    more = cfg;
    more.shape = GridShape{12, 12};
    CHECK(flops_estimate(more, none).total_train > base);
    more = cfg;
    more.vocab *= 2;
    CHECK(flops_estimate(more, none).total_train > base);

    for (const ForesightConfig& fs :
         {default_explicit_config(), default_implicit_config()}) {
        CHECK(flops_estimate(cfg, fs, 2, 64, 64).total_train > base);
    }
    ForesightConfig mtp;
    mtp.mode = ForesightMode::output_mtp;
    mtp.k = 3;
    CHECK(flops_estimate(cfg, mtp).total_train > base);
}

TEST_CASE("coherence evaluation is seed-stable") {
    RunConfig cfg = tiny_run_config();
    const ModelConfig model = cfg.resolved_model();
    const ArState<float> st = make_state<float>(model, ForesightConfig{}, Rng(2));
    const double a = eval_coherence(st, cfg.corpus, cfg.sample, 6, 42);
    const double b = eval_coherence(st, cfg.corpus, cfg.sample, 6, 42);
    CHECK(a == b);
}

TEST_CASE("svg chart and sweep csv are written with labels") {
    SweepResult sweep;
    sweep.x_name = "block_size";
    sweep.rows = {{1, 2.5, 0.4}, {4, 2.2, 0.6}, {16, 2.0, 0.8}};
    write_sweep_csv("sweep_test.csv", sweep);
    write_svg_chart("sweep_test.svg", "demo", "block size", "metric",
                    {{"coherence", {{1, 0.4}, {4, 0.6}, {16, 0.8}}}});

    std::ifstream csv("sweep_test.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "block_size,val_ntp,coherence");

    std::ifstream svg("sweep_test.svg");
    std::string all((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
    CHECK(all.find("<svg") != std::string::npos);
    CHECK(all.find("block size") != std::string::npos);
    CHECK(all.find("metric") != std::string::npos);
    CHECK(all.find("polyline") != std::string::npos);
    std::filesystem::remove("sweep_test.csv");
    std::filesystem::remove("sweep_test.svg");
}
