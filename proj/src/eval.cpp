#include "arfs/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace arfs {

double eval_validation(const ArState<float>& state, const SampleStream& val, int count) {
    if (count < 1) throw std::invalid_argument("validation needs at least one sample");
    const ModelConfig& cfg = state.cfg;
    const std::vector<int> row_limits = mask_row_limits(causal_mask(cfg.seq_len()));
    BackboneActs<float> acts;
    double sum = 0.0;
    for (int i = 0; i < count; ++i) {
        const TokenGrid g = val.get(i % val.count);
        backbone_forward(cfg, state.off, state.theta.data(), g.tokens.data(), g.class_label,
                         row_limits, false, (Rng*)nullptr, acts);
        sum += double(ntp_loss<float>(acts.logits.data(), g.tokens.data(), cfg.shape.tokens(),
                                      cfg.vocab, nullptr));
    }
    return sum / double(count);
}

double eval_coherence(const ArState<float>& state, const CorpusConfig& corpus,
                      const SampleParams& params, int n_samples, uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("need at least one sample");
    DecodeCache<float> cond, uncond;
    double sum = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        const int cls = i % state.cfg.num_classes;
        Rng rng = Rng(seed).fork(0x5a3e).fork(uint64_t(i));
        const TokenGrid g =
            sample_grid(state.cfg, state.off, state.theta.data(), cls, params, rng, cond, uncond);
        sum += coherence_score(g, corpus).score;
    }
    return sum / double(n_samples);
}

namespace {

double cosine_rows(const float* a, const float* b, int d) {
    const double num = double(nn::dot(a, b, d));
    const double na = std::sqrt(double(nn::dot(a, a, d)));
    const double nb = std::sqrt(double(nn::dot(b, b, d)));
    return num / (std::max(na, 1e-8) * std::max(nb, 1e-8));
}

double smoothness_gap_one(const float* rows, GridShape shape, int d, Rng& rng) {
    const int h = shape.height, w = shape.width;
    const int n = h * w;
    double adj_sum = 0.0;
    int adj_count = 0;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const int i = r * w + c;
            if (c + 1 < w) {
                adj_sum += cosine_rows(rows + size_t(i) * d, rows + size_t(i + 1) * d, d);
                ++adj_count;
            }
            if (r + 1 < h) {
                adj_sum += cosine_rows(rows + size_t(i) * d, rows + size_t(i + w) * d, d);
                ++adj_count;
            }
        }
    }
    double rand_sum = 0.0;
    for (int p = 0; p < adj_count; ++p) {
        const int a = int(rng.next_below(uint64_t(n)));
        int b = int(rng.next_below(uint64_t(n - 1)));
        if (b >= a) ++b;
        rand_sum += cosine_rows(rows + size_t(a) * d, rows + size_t(b) * d, d);
    }
    return (adj_sum - rand_sum) / double(adj_count);
}

}  // namespace

double smoothness_gap(const ArState<float>& state, const std::vector<TokenGrid>& grids,
                      uint64_t seed) {
    if (grids.empty()) throw std::invalid_argument("need at least one grid");
    const ModelConfig& cfg = state.cfg;
    const std::vector<int> row_limits = mask_row_limits(causal_mask(cfg.seq_len()));
    BackboneActs<float> acts;
    double sum = 0.0;
    for (size_t g = 0; g < grids.size(); ++g) {
        backbone_forward(cfg, state.off, state.theta.data(), grids[g].tokens.data(),
                         grids[g].class_label, row_limits, false, (Rng*)nullptr, acts);
        Rng rng = Rng(seed).fork(0x560).fork(g);
        sum += smoothness_gap_one(acts.stream(cfg.align_layer), cfg.shape, cfg.d_model, rng);
    }
    return sum / double(grids.size());
}

double smoothness_gap_rows(const std::vector<std::vector<float>>& row_sets, GridShape shape, int d,
                           uint64_t seed) {
    if (row_sets.empty()) throw std::invalid_argument("need at least one grid");
    double sum = 0.0;
    for (size_t g = 0; g < row_sets.size(); ++g) {
        Rng rng = Rng(seed).fork(0x560).fork(g);
        sum += smoothness_gap_one(row_sets[g].data(), shape, d, rng);
    }
    return sum / double(row_sets.size());
}

EvalReport evaluate(const ArState<float>& state, const RunConfig& cfg) {
    const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
    EvalReport rep;
    rep.val_ntp = eval_validation(state, splits.val, std::min(cfg.n_val, 128));
    rep.coherence_rate =
        eval_coherence(state, cfg.corpus, cfg.sample, cfg.eval.n_samples, cfg.eval.seed);
    std::vector<TokenGrid> grids;
    for (int i = 0; i < cfg.eval.smoothness_grids; ++i) grids.push_back(splits.val.get(i % cfg.n_val));
    rep.smoothness_gap = smoothness_gap(state, grids, cfg.eval.seed);
    rep.samples_used = cfg.eval.n_samples;
    return rep;
}

double order0_val_nats(const CorpusConfig& corpus, const SampleStream& train, int train_count,
                       const SampleStream& val, int val_count) {
    const int n = corpus.shape.tokens();
    const int v = corpus.vocab_size;
    std::vector<double> counts(size_t(n) * v, 1.0);  // Laplace smoothing
    for (int i = 0; i < train_count; ++i) {
        const TokenGrid g = train.get(i % train.count);
        for (int p = 0; p < n; ++p) counts[size_t(p) * v + g.tokens[size_t(p)]] += 1.0;
    }
    std::vector<double> log_probs(size_t(n) * v);
    for (int p = 0; p < n; ++p) {
        double total = 0.0;
        for (int t = 0; t < v; ++t) total += counts[size_t(p) * v + t];
        for (int t = 0; t < v; ++t) {
            log_probs[size_t(p) * v + t] = std::log(counts[size_t(p) * v + t] / total);
        }
    }
    double sum = 0.0;
    for (int i = 0; i < val_count; ++i) {
        const TokenGrid g = val.get(i % val.count);
        double nll = 0.0;
        for (int p = 0; p < n; ++p) nll -= log_probs[size_t(p) * v + g.tokens[size_t(p)]];
        sum += nll / double(n);
    }
    return sum / double(val_count);
}

// ---------------------------------------------------------------------------
// FLOPs

FlopsEstimate flops_estimate(const ModelConfig& cfg, const ForesightConfig& fs, int encoder_layers,
                             int encoder_width, int head_hidden) {
    const double s = double(cfg.seq_len());
    const double n = double(cfg.shape.tokens());
    const double d = double(cfg.d_model);
    const double v = double(cfg.vocab);
    const double hidden = double(head_hidden > 0 ? head_hidden : fs.head_hidden);

    // per layer: qkv (3), output proj (1), ffn (2 mats, 4x) and the two
    // attention matmuls; multiply-add counted as two operations
    const double per_layer = 24.0 * s * d * d + 4.0 * s * s * d;
    FlopsEstimate est;
    est.backbone_forward = double(cfg.layers) * per_layer + 2.0 * n * d * v;
    est.backbone_train = 3.0 * est.backbone_forward;

    const auto mlp_head_train = [&](double c) {
        return 3.0 * n * 2.0 * (d * hidden + hidden * hidden + hidden * c);
    };
    switch (fs.mode) {
        case ForesightMode::none:
            break;
        case ForesightMode::explicit_ema:
            est.ema_forward = double(cfg.align_layer) * per_layer;
            est.heads_train = double(fs.k) * mlp_head_train(d);
            break;
        case ForesightMode::implicit_encoder: {
            const double c = double(encoder_width > 0 ? encoder_width : d);
            est.heads_train = mlp_head_train(c);
            if (encoder_layers > 0) {
                const double es = n;  // no condition slot
                est.encoder_forward =
                    double(encoder_layers) * (24.0 * es * c * c + 4.0 * es * es * c);
            }
            break;
        }
        case ForesightMode::output_mtp:
            est.heads_train = double(fs.k) * 3.0 * n * 2.0 * d * v;
            break;
    }
    // the frozen encoder's features are a fixed precompute, amortized across
    // the run, so they stay out of the per-sample total
    est.total_train = est.backbone_train + est.ema_forward + est.heads_train;
    est.overhead_pct = 100.0 * (est.total_train - est.backbone_train) / est.backbone_train;
    est.sampler_step = est.backbone_forward / n;
    return est;
}

// ---------------------------------------------------------------------------
// sweeps

namespace {

double median(std::vector<double> xs) {
    if (xs.empty()) throw std::invalid_argument("median of nothing");
    std::sort(xs.begin(), xs.end());
    const size_t m = xs.size() / 2;
    return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

}  // namespace

SweepResult block_sweep(const RunConfig& base, const std::vector<int>& block_sizes, int seeds) {
    const int n = base.corpus.shape.tokens();
    std::vector<int> blocks = block_sizes;
    std::sort(blocks.begin(), blocks.end());
    blocks.erase(std::unique(blocks.begin(), blocks.end()), blocks.end());

    SweepResult result;
    result.x_name = "block_size";
    for (const int b : blocks) {
        if (b < 1 || b > n) throw std::invalid_argument("block size outside [1, N]");
        std::vector<double> ntps, cohs;
        for (int s = 0; s < seeds; ++s) {
            RunConfig cfg = base;
            cfg.train.foresight = default_implicit_config();
            cfg.train.foresight.head_hidden = base.train.foresight.head_hidden;
            cfg.encoder.mask_block = b;
            cfg.encoder.seed = base.encoder.seed + uint64_t(s);
            cfg.train.seed = base.train.seed + uint64_t(s);
            cfg.train.total_steps = base.eval.sweep_steps;

            const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
            const BidirEncoder<float> enc =
                pretrain_bidir_encoder(cfg.corpus, splits.train, cfg.encoder);
            const TrainRunResult run = run_training(cfg, "", &enc, std::nullopt, false);
            ntps.push_back(eval_validation(run.state, splits.val, std::min(cfg.n_val, 64)));
            cohs.push_back(eval_coherence(run.state, cfg.corpus, cfg.sample, cfg.eval.n_samples,
                                          cfg.eval.seed));
        }
        result.rows.push_back(SweepRow{double(b), median(ntps), median(cohs)});
    }
    return result;
}

SweepResult lambda_sweep(const RunConfig& base, const std::vector<double>& lambdas, int seeds) {
    std::vector<double> xs = lambdas;
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());

    SweepResult result;
    result.x_name = "lambda";
    for (const double lam : xs) {
        std::vector<double> ntps, cohs;
        for (int s = 0; s < seeds; ++s) {
            RunConfig cfg = base;
            cfg.train.foresight = default_explicit_config();
            cfg.train.foresight.head_hidden = base.train.foresight.head_hidden;
            cfg.train.foresight.lambda_schedule = {ScheduleSpec::Kind::constant, lam, lam, 0.5};
            cfg.train.seed = base.train.seed + uint64_t(s);
            cfg.train.total_steps = base.eval.sweep_steps;

            const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
            const TrainRunResult run = run_training(cfg, "", nullptr, std::nullopt, false);
            ntps.push_back(eval_validation(run.state, splits.val, std::min(cfg.n_val, 64)));
            cohs.push_back(eval_coherence(run.state, cfg.corpus, cfg.sample, cfg.eval.n_samples,
                                          cfg.eval.seed));
        }
        result.rows.push_back(SweepRow{lam, median(ntps), median(cohs)});
    }
    return result;
}

ConvergenceResult convergence_compare(const std::vector<std::pair<std::string, RunConfig>>& configs,
                                      double threshold, int max_steps, int seeds,
                                      bool stop_at_crossing) {
    if (threshold <= 0.0 || threshold >= 1.0) throw std::invalid_argument("threshold in (0,1)");
    ConvergenceResult result;
    result.threshold = threshold;

    std::map<std::string, std::vector<double>> crossings;
    for (const auto& [name, base] : configs) {
        for (int s = 0; s < seeds; ++s) {
            RunConfig cfg = base;
            cfg.train.seed = base.train.seed + uint64_t(s);
            cfg.encoder.seed = base.encoder.seed + uint64_t(s);
            cfg.train.total_steps = max_steps;

            std::optional<BidirEncoder<float>> enc = prepare_encoder(cfg);
            const ModelConfig model = cfg.resolved_model();
            ArState<float> state = make_state<float>(
                model, cfg.train.foresight, Rng(cfg.train.seed).fork(0x1417),
                enc ? enc->feature_width() : 0);
            const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
            const std::vector<int> row_limits = mask_row_limits(causal_mask(model.seq_len()));
            const std::vector<Neighborhood> nbhd = all_neighborhoods(
                cfg.train.foresight.layout, std::max(1, cfg.train.foresight.k), model.shape);

            ConvergenceCurve curve;
            curve.name = name + "/seed" + std::to_string(s);
            TrainWork<float> work;
            std::vector<TokenGrid> batch(size_t(cfg.train.batch_size));
            std::vector<int> perm;
            int64_t perm_epoch = -1;
            for (int64_t step = 0; step < max_steps; ++step) {
                for (int b = 0; b < cfg.train.batch_size; ++b) {
                    const int64_t g = step * cfg.train.batch_size + b;
                    const int64_t epoch = g / splits.train.count;
                    if (epoch != perm_epoch) {
                        perm.resize(size_t(splits.train.count));
                        for (int i = 0; i < splits.train.count; ++i) perm[size_t(i)] = i;
                        Rng perm_rng = Rng(cfg.train.seed).fork(0x9e2b).fork(uint64_t(epoch));
                        for (int i = splits.train.count - 1; i > 0; --i) {
                            const int j = int(perm_rng.next_below(uint64_t(i + 1)));
                            std::swap(perm[size_t(i)], perm[size_t(j)]);
                        }
                        perm_epoch = epoch;
                    }
                    batch[size_t(b)] = splits.train.get(perm[size_t(g % splits.train.count)]);
                }
                train_step(state, batch, cfg.train, step, row_limits, nbhd,
                           enc ? &*enc : nullptr, work);

                if ((step + 1) % cfg.train.eval_every == 0) {
                    const double coh = eval_coherence(state, cfg.corpus, cfg.sample,
                                                      cfg.eval.n_samples, cfg.eval.seed);
                    curve.coherence_by_step.emplace_back(int(step + 1), coh);
                    if (coh >= threshold && curve.crossing_step < 0) {
                        curve.crossing_step = int(step + 1);
                        if (stop_at_crossing) break;
                    }
                }
            }
            crossings[name].push_back(curve.crossing_step < 0 ? double(max_steps + 1)
                                                              : double(curve.crossing_step));
            result.curves.push_back(std::move(curve));
        }
    }
    for (const auto& [name, base] : configs) {
        result.median_crossing.emplace_back(name, int(median(crossings[name])));
    }
    return result;
}

// ---------------------------------------------------------------------------
// artifact output

void write_pgm(const std::string& path, const TokenGrid& grid, const GridShape& shape, int vocab) {
    if (int(grid.tokens.size()) != shape.tokens()) throw std::invalid_argument("grid/shape mismatch");
    std::string buf = "P5\n" + std::to_string(shape.width) + " " + std::to_string(shape.height) +
                      "\n255\n";
    for (uint16_t t : grid.tokens) {
        buf.push_back(char(uint8_t(vocab > 1 ? (255 * int(t)) / (vocab - 1) : 0)));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

void write_svg_chart(const std::string& path, const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<SvgSeries>& series) {
    const double width = 720, height = 480;
    const double ml = 70, mr = 30, mt = 50, mb = 60;

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;

    const auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
    const auto py = [&](double y) {
        return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb);
    };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) +
                      "\" height=\"" + fmt(height) + "\" viewBox=\"0 0 " + fmt(width) + " " +
                      fmt(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + fmt(width / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" +
           title + "</text>\n";
    // axes
    svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(height - mb) + "\" x2=\"" + fmt(width - mr) +
           "\" y2=\"" + fmt(height - mb) + "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(mt) + "\" x2=\"" + fmt(ml) + "\" y2=\"" +
           fmt(height - mb) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 4.0;
        const double yv = ymin + (ymax - ymin) * i / 4.0;
        svg += "<text x=\"" + fmt(px(xv)) + "\" y=\"" + fmt(height - mb + 18) +
               "\" text-anchor=\"middle\" font-size=\"11\">" + fmt(xv) + "</text>\n";
        svg += "<text x=\"" + fmt(ml - 8) + "\" y=\"" + fmt(py(yv) + 4) +
               "\" text-anchor=\"end\" font-size=\"11\">" + fmt(yv) + "</text>\n";
    }
    svg += "<text x=\"" + fmt(width / 2) + "\" y=\"" + fmt(height - 16) +
           "\" text-anchor=\"middle\" font-size=\"13\">" + x_label + "</text>\n";
    svg += "<text x=\"18\" y=\"" + fmt(height / 2) + "\" text-anchor=\"middle\" font-size=\"13\" " +
           "transform=\"rotate(-90 18 " + fmt(height / 2) + ")\">" + y_label + "</text>\n";

    for (size_t s = 0; s < series.size(); ++s) {
        const char* color = colors[s % 6];
        std::string pts;
        for (const auto& [x, y] : series[s].points) {
            pts += fmt(px(x)) + "," + fmt(py(y)) + " ";
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        svg += "<text x=\"" + fmt(width - mr - 150) + "\" y=\"" + fmt(mt + 18 * double(s)) +
               "\" font-size=\"12\" fill=\"" + color + "\">" + series[s].label + "</text>\n";
    }
    svg += "</svg>\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << svg;
}

void write_sweep_csv(const std::string& path, const SweepResult& sweep) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << sweep.x_name << ",val_ntp,coherence\n";
    for (const SweepRow& r : sweep.rows) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", r.x, r.val_ntp, r.coherence);
        out << buf;
    }
}

}  // namespace arfs
