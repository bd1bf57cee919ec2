#include "arfs/runner.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace arfs {

namespace {

NamedTensor slice_tensor(const TensorSpec& spec, const std::vector<float>& data,
                         const std::string& prefix) {
    NamedTensor t;
    t.name = prefix + spec.name;
    t.dims = spec.dims;
    t.data.assign(data.begin() + long(spec.offset), data.begin() + long(spec.offset + spec.size));
    return t;
}

void fill_from(const CheckpointData& ckpt, const ParamLayout& layout, std::vector<float>& dst,
               const std::string& prefix) {
    dst.assign(layout.total, 0.0f);
    for (const TensorSpec& spec : layout.tensors) {
        const NamedTensor* t = ckpt.find(prefix + spec.name);
        if (!t) throw std::runtime_error("checkpoint missing tensor " + prefix + spec.name);
        if (t->data.size() != spec.size) {
            throw std::runtime_error("checkpoint tensor shape mismatch: " + t->name);
        }
        std::copy(t->data.begin(), t->data.end(), dst.begin() + long(spec.offset));
    }
}

}  // namespace

CheckpointData state_to_checkpoint(const ArState<float>& state, const std::string& config_text) {
    CheckpointData ckpt;
    ckpt.tag = "ar";
    ckpt.config_text = config_text;
    ckpt.step = state.step;
    ckpt.rng_key = 0;
    ckpt.rng_counter = state.step;
    for (const TensorSpec& spec : state.layout.tensors) {
        ckpt.tensors.push_back(slice_tensor(spec, state.theta, ""));
    }
    for (const TensorSpec& spec : state.layout.tensors) {
        ckpt.tensors.push_back(slice_tensor(spec, state.adam_m, "adam_m."));
    }
    for (const TensorSpec& spec : state.layout.tensors) {
        ckpt.tensors.push_back(slice_tensor(spec, state.adam_v, "adam_v."));
    }
    if (state.has_ema()) {
        for (const TensorSpec& spec : state.layout.tensors) {
            ckpt.tensors.push_back(slice_tensor(spec, state.ema, "ema."));
        }
    }
    return ckpt;
}

ArState<float> state_from_checkpoint(const CheckpointData& ckpt, int encoder_width) {
    if (ckpt.tag != "ar") throw std::runtime_error("expected an \"ar\" checkpoint");
    const RunConfig cfg = parse_run_config(ckpt.config_text);
    ArState<float> state =
        make_state<float>(cfg.resolved_model(), cfg.train.foresight, Rng(0),
                          encoder_width > 0 ? encoder_width : cfg.encoder.width);
    fill_from(ckpt, state.layout, state.theta, "");
    fill_from(ckpt, state.layout, state.adam_m, "adam_m.");
    fill_from(ckpt, state.layout, state.adam_v, "adam_v.");
    if (state.has_ema()) fill_from(ckpt, state.layout, state.ema, "ema.");
    state.step = ckpt.step;
    return state;
}

CheckpointData encoder_to_checkpoint(const BidirEncoder<float>& enc,
                                     const std::string& config_text) {
    CheckpointData ckpt;
    ckpt.tag = "bidir";
    ckpt.config_text = config_text;
    for (const TensorSpec& spec : enc.layout.tensors) {
        ckpt.tensors.push_back(slice_tensor(spec, enc.params, ""));
    }
    return ckpt;
}

BidirEncoder<float> encoder_from_checkpoint(const CheckpointData& ckpt) {
    if (ckpt.tag != "bidir") throw std::runtime_error("expected a \"bidir\" checkpoint");
    const RunConfig cfg = parse_run_config(ckpt.config_text);
    const int n = cfg.corpus.shape.tokens();
    const int block = cfg.encoder.mask_block == 0 ? n : cfg.encoder.mask_block;
    BidirEncoder<float> enc =
        make_encoder<float>(cfg.corpus.vocab_size, cfg.corpus.shape, cfg.encoder.layers,
                            cfg.encoder.width, cfg.encoder.heads, block_causal_mask(n, block));
    fill_from(ckpt, enc.layout, enc.params, "");
    return enc;
}

BidirEncoder<float> pretrain_bidir_encoder(const CorpusConfig& corpus, const SampleStream& train,
                                           const EncoderSettings& settings) {
    if (settings.mask_ratio <= 0.0 || settings.mask_ratio > 1.0) {
        throw std::invalid_argument("mask_ratio must lie in (0,1]: unmasked pretraining has no loss");
    }
    const int n = corpus.shape.tokens();
    const int block = settings.mask_block == 0 ? n : settings.mask_block;
    BidirEncoder<float> enc =
        make_encoder<float>(corpus.vocab_size, corpus.shape, settings.layers, settings.width,
                            settings.heads, block_causal_mask(n, block));
    Rng init_rng = Rng(settings.seed).fork(0xe2c);
    init_backbone_params(enc.layout, enc.params, init_rng);

    std::vector<float> grad(enc.layout.total, 0.0f);
    std::vector<float> m(enc.layout.total, 0.0f), v(enc.layout.total, 0.0f);
    const std::vector<uint8_t> decay = build_decay_mask(enc.layout);
    const AdamConfig ac{settings.lr, 0.9, 0.95, 1e-8, 0.05};

    BackboneActs<float> acts;
    BackboneGradWork<float> gw;
    std::vector<uint16_t> masked(static_cast<size_t>(n));
    std::vector<float> d_logits(size_t(n) * enc.cfg.vocab, 0.0f);
    struct MaskedSample {
        TokenGrid grid;
        std::vector<uint8_t> is_masked;
        int masked_count = 0;
    };
    std::vector<MaskedSample> batch(size_t(settings.batch));

    for (int step = 0; step < settings.steps; ++step) {
        int total_masked = 0;
        for (int b = 0; b < settings.batch; ++b) {
            auto& s = batch[size_t(b)];
            s.grid = train.get((step * settings.batch + b) % train.count);
            s.is_masked.assign(size_t(n), 0);
            s.masked_count = 0;
            Rng mask_rng = Rng(settings.seed).fork(0x3a5c).fork(uint64_t(step)).fork(uint64_t(b));
            for (int i = 0; i < n; ++i) {
                if (mask_rng.bernoulli(settings.mask_ratio)) {
                    s.is_masked[size_t(i)] = 1;
                    ++s.masked_count;
                }
            }
            total_masked += s.masked_count;
        }
        if (total_masked == 0) continue;

        std::fill(grad.begin(), grad.end(), 0.0f);
        const float scale = 1.0f / float(total_masked);
        for (int b = 0; b < settings.batch; ++b) {
            const auto& s = batch[size_t(b)];
            if (s.masked_count == 0) continue;
            for (int i = 0; i < n; ++i) {
                masked[size_t(i)] =
                    s.is_masked[size_t(i)] ? uint16_t(enc.mask_token()) : s.grid.tokens[size_t(i)];
            }
            backbone_forward(enc.cfg, enc.off, enc.params.data(), masked.data(), 0,
                             enc.row_limits, false, (Rng*)nullptr, acts);
            std::fill(d_logits.begin(), d_logits.end(), 0.0f);
            for (int i = 0; i < n; ++i) {
                if (!s.is_masked[size_t(i)]) continue;
                const float* row = acts.logits.data() + size_t(i) * enc.cfg.vocab;
                nn::cross_entropy_backward_row(row, enc.cfg.vocab, int(s.grid.tokens[size_t(i)]),
                                               scale, d_logits.data() + size_t(i) * enc.cfg.vocab);
            }
            backbone_backward(enc.cfg, enc.off, enc.params.data(), acts, enc.row_limits,
                              d_logits.data(), (const float*)nullptr, (const float*)nullptr,
                              grad.data(), gw);
        }
        clip_gradients(grad, 1.0);
        adamw_step(enc.params, grad, m, v, decay, step + 1, ac);
    }
    return enc;
}

double masked_token_accuracy(const BidirEncoder<float>& enc, const SampleStream& stream,
                             int n_samples, double mask_ratio, uint64_t seed) {
    const int n = enc.cfg.shape.tokens();
    BackboneActs<float> acts;
    std::vector<uint16_t> masked(static_cast<size_t>(n));
    int64_t correct = 0, total = 0;
    for (int s = 0; s < n_samples; ++s) {
        const TokenGrid grid = stream.get(s % stream.count);
        Rng mask_rng = Rng(seed).fork(0xacc).fork(uint64_t(s));
        std::vector<uint8_t> is_masked(size_t(n), 0);
        for (int i = 0; i < n; ++i) {
            is_masked[size_t(i)] = mask_rng.bernoulli(mask_ratio) ? 1 : 0;
            masked[size_t(i)] = is_masked[size_t(i)] ? uint16_t(enc.mask_token()) : grid.tokens[size_t(i)];
        }
        backbone_forward(enc.cfg, enc.off, enc.params.data(), masked.data(), 0, enc.row_limits,
                         false, (Rng*)nullptr, acts);
        for (int i = 0; i < n; ++i) {
            if (!is_masked[size_t(i)]) continue;
            const float* row = acts.logits.data() + size_t(i) * enc.cfg.vocab;
            int best = 0;
            for (int j = 1; j < enc.cfg.vocab; ++j) {
                if (row[j] > row[best]) best = j;
            }
            correct += best == int(grid.tokens[size_t(i)]) ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : double(correct) / double(total);
}

std::string metrics_csv_header() { return "step,ntp,foresight,lambda,total,grad_norm,wall_ms"; }

std::string metrics_csv_row(const StepMetrics& m) {
    char buf[256];
    if (m.foresight_active) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f",
                      static_cast<long long>(m.step), m.ntp, m.foresight, m.lambda, m.total,
                      m.grad_norm_preclip, m.wall_ms);
    } else {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g,,,%.9g,%.9g,%.3f",
                      static_cast<long long>(m.step), m.ntp, m.total, m.grad_norm_preclip,
                      m.wall_ms);
    }
    return buf;
}

std::optional<BidirEncoder<float>> prepare_encoder(const RunConfig& cfg) {
    if (cfg.train.foresight.mode != ForesightMode::implicit_encoder) return std::nullopt;
    if (!cfg.encoder.checkpoint.empty()) {
        return encoder_from_checkpoint(read_checkpoint(cfg.encoder.checkpoint));
    }
    const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
    return pretrain_bidir_encoder(cfg.corpus, splits.train, cfg.encoder);
}

TrainRunResult run_training(const RunConfig& cfg, const std::string& out_dir,
                            const BidirEncoder<float>* encoder,
                            const std::optional<std::string>& resume_from, bool write_files) {
    cfg.corpus.validate();
    cfg.train.validate();
    const ModelConfig model = cfg.resolved_model();
    model.validate();
    if (cfg.train.foresight.mode == ForesightMode::implicit_encoder && !encoder) {
        throw std::invalid_argument("implicit foresight needs a pretrained encoder");
    }

    const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
    const std::string config_text = serialize_run_config(cfg);

    ArState<float> state;
    if (resume_from) {
        state = state_from_checkpoint(read_checkpoint(*resume_from),
                                      encoder ? encoder->feature_width() : 0);
    } else {
        state = make_state<float>(model, cfg.train.foresight, Rng(cfg.train.seed).fork(0x1417),
                                  encoder ? encoder->feature_width() : 0);
        if (cfg.train.foresight.mode == ForesightMode::explicit_ema &&
            cfg.train.foresight.ema_source == EmaSource::pretrained_frozen) {
            if (cfg.encoder.checkpoint.empty()) {
                throw std::invalid_argument(
                    "pretrained_frozen EMA needs foresight.encoder_checkpoint to name a prior run");
            }
            const CheckpointData prior = read_checkpoint(cfg.encoder.checkpoint);
            ArState<float> donor = state_from_checkpoint(prior, encoder ? encoder->feature_width() : 0);
            // adopt the donor's weights as the frozen foresight source
            for (const TensorSpec& spec : state.layout.tensors) {
                if (!donor.layout.has(spec.name)) continue;
                const TensorSpec& src = donor.layout.find(spec.name);
                if (src.size != spec.size) continue;
                std::copy(donor.theta.begin() + long(src.offset),
                          donor.theta.begin() + long(src.offset + src.size),
                          state.ema.begin() + long(spec.offset));
            }
        }
    }

    const std::vector<int> row_limits = mask_row_limits(causal_mask(model.seq_len()));
    const std::vector<Neighborhood> nbhd =
        all_neighborhoods(cfg.train.foresight.layout, std::max(1, cfg.train.foresight.k),
                          model.shape);

    namespace fs = std::filesystem;
    std::ofstream metrics;
    std::string metrics_path;
    if (write_files) {
        fs::create_directories(out_dir);
        metrics_path = out_dir + "/metrics.csv";
        const bool append = resume_from.has_value() && fs::exists(metrics_path);
        metrics.open(metrics_path, append ? std::ios::app : std::ios::trunc);
        if (!metrics) throw std::runtime_error("cannot open " + metrics_path);
        if (!append) metrics << metrics_csv_header() << "\n";
    }

    TrainWork<float> work;
    std::vector<TokenGrid> batch(size_t(cfg.train.batch_size));
    std::vector<int> perm;
    int64_t perm_epoch = -1;
    std::string last_ckpt;

    const auto checkpoint_path = [&](int64_t step) {
        return out_dir + "/ckpt_" + std::to_string(step) + ".ckpt";
    };

    for (int64_t step = int64_t(state.step); step < cfg.train.total_steps; ++step) {
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

        const auto t0 = std::chrono::steady_clock::now();
        StepMetrics sm;
        try {
            sm = train_step(state, batch, cfg.train, step, row_limits, nbhd, encoder, work);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) +
                               (last_ckpt.empty() ? " (no checkpoint written yet)"
                                                  : " (last good checkpoint: " + last_ckpt + ")"));
        }
        sm.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                         .count();
        if (write_files) metrics << metrics_csv_row(sm) << "\n";

        if (write_files && (step + 1) % cfg.train.eval_every == 0) {
            last_ckpt = checkpoint_path(step + 1);
            write_checkpoint(last_ckpt, state_to_checkpoint(state, config_text));
        }
    }

    TrainRunResult result;
    result.metrics_path = metrics_path;
    if (write_files) {
        result.final_checkpoint = out_dir + "/final.ckpt";
        write_checkpoint(result.final_checkpoint, state_to_checkpoint(state, config_text));
    }
    result.state = std::move(state);
    return result;
}

}  // namespace arfs
