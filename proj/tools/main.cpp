// Command-line surface: launches experiments and writes artifacts (checkpoints,
// metrics/report CSVs, SVG charts, PGM renders) into an output directory owned
// by this process. Exit codes: 0 success, 2 config error, 3 numeric failure.

#include <sys/stat.h>
#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include "arfs/checkpoint.hpp"
#include "arfs/config.hpp"
#include "arfs/eval.hpp"
#include "arfs/runner.hpp"
#include "arfs/sampler.hpp"

namespace fs = std::filesystem;
using namespace arfs;

namespace {

// One process per output directory; a stale lock means another run owns it.
class DirLock {
public:
    explicit DirLock(const std::string& dir) : path_(dir + "/.arfs.lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw std::runtime_error("output directory is locked by another run: " + path_);
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd_, pid.data(), pid.size());
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::optional<uint64_t> seed;
    std::string resume;
    std::optional<int> steps;
    int device_threads = 1;
    std::string input;
};

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args.config_path);
    if (args.seed) {
        cfg.train.seed = *args.seed;
        cfg.sample.seed = *args.seed;
        cfg.eval.seed = *args.seed;
    }
    if (args.steps) cfg.train.total_steps = *args.steps;
    cfg.corpus.validate();
    cfg.resolved_model().validate();
    cfg.train.validate();
    cfg.sample.validate();
    return cfg;
}

int cmd_train(const CommonArgs& args) {
    const RunConfig cfg = load_config(args);
    DirLock lock(args.out_dir);
    std::optional<BidirEncoder<float>> enc = prepare_encoder(cfg);
    if (enc && cfg.encoder.checkpoint.empty()) {
        write_checkpoint(args.out_dir + "/encoder.ckpt",
                         encoder_to_checkpoint(*enc, serialize_run_config(cfg)));
    }
    const std::optional<std::string> resume =
        args.resume.empty() ? std::nullopt : std::make_optional(args.resume);
    const TrainRunResult result = run_training(cfg, args.out_dir, enc ? &*enc : nullptr, resume);
    std::cout << "trained " << cfg.train.total_steps << " steps -> " << result.final_checkpoint
              << "\n";
    return 0;
}

int cmd_pretrain_encoder(const CommonArgs& args) {
    const RunConfig cfg = load_config(args);
    DirLock lock(args.out_dir);
    const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
    const BidirEncoder<float> enc = pretrain_bidir_encoder(cfg.corpus, splits.train, cfg.encoder);
    const std::string path = args.out_dir + "/encoder.ckpt";
    write_checkpoint(path, encoder_to_checkpoint(enc, serialize_run_config(cfg)));
    const double acc =
        masked_token_accuracy(enc, splits.val, 32, cfg.encoder.mask_ratio, cfg.eval.seed);
    std::cout << "encoder pretrained (" << cfg.encoder.steps << " steps), masked accuracy " << acc
              << " -> " << path << "\n";
    return 0;
}

ArState<float> load_state(const CommonArgs& args) {
    if (args.resume.empty()) {
        throw std::runtime_error("this command needs --resume CKPT to name a trained model");
    }
    return state_from_checkpoint(read_checkpoint(args.resume));
}

int cmd_sample(const CommonArgs& args) {
    const RunConfig cfg = load_config(args);
    DirLock lock(args.out_dir);
    const ArState<float> state = load_state(args);

    const int count = cfg.sample_count;
    std::vector<TokenGrid> grids(static_cast<size_t>(count));
    // independent jobs; each owns its RNG stream, so any thread layout yields
    // the same grids
    const int threads = std::max(1, std::min(args.device_threads, count));
    const auto worker = [&](int begin, int end) {
        DecodeCache<float> cond, uncond;
        for (int i = begin; i < end; ++i) {
            const int cls = i % state.cfg.num_classes;
            Rng rng = Rng(cfg.sample.seed).fork(0x5a3e).fork(uint64_t(i));
            grids[size_t(i)] = sample_grid(state.cfg, state.off, state.theta.data(), cls,
                                           cfg.sample, rng, cond, uncond);
        }
    };
    if (threads == 1) {
        worker(0, count);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (count + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back(worker, t * chunk, std::min(count, (t + 1) * chunk));
        }
        for (auto& th : pool) th.join();
    }

    write_corpus(args.out_dir + "/samples.arfs", cfg.corpus, grids);
    for (int i = 0; i < count; ++i) {
        write_pgm(args.out_dir + "/sample_" + std::to_string(i) + ".pgm", grids[size_t(i)],
                  state.cfg.shape, state.cfg.vocab);
    }
    double coh = 0.0;
    for (const auto& g : grids) coh += coherence_score(g, cfg.corpus).score;
    std::cout << "sampled " << count << " grids, mean coherence " << coh / count << " -> "
              << args.out_dir << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    const RunConfig cfg = load_config(args);
    DirLock lock(args.out_dir);
    const ArState<float> state = load_state(args);
    const EvalReport rep = evaluate(state, cfg);

    std::ofstream out(args.out_dir + "/report.csv", std::ios::trunc);
    out << "val_ntp,coherence_rate,smoothness_gap,samples_used\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%d\n", rep.val_ntp, rep.coherence_rate,
                  rep.smoothness_gap, rep.samples_used);
    out << buf;
    std::cout << "val_ntp " << rep.val_ntp << "  coherence " << rep.coherence_rate
              << "  smoothness_gap " << rep.smoothness_gap << "\n";
    return 0;
}

int cmd_sweep_block(const CommonArgs& args) {
    const RunConfig cfg = load_config(args);
    DirLock lock(args.out_dir);
    const SweepResult sweep =
        block_sweep(cfg, parse_int_list(cfg.eval.block_sizes), cfg.eval.sweep_seeds);
    write_sweep_csv(args.out_dir + "/report.csv", sweep);
    SvgSeries ntp{"val_ntp", {}}, coh{"coherence", {}};
    for (const SweepRow& r : sweep.rows) {
        ntp.points.emplace_back(r.x, r.val_ntp);
        coh.points.emplace_back(r.x, r.coherence);
    }
    write_svg_chart(args.out_dir + "/sweep_block.svg", "encoder attention block sweep",
                    "block size", "metric", {ntp, coh});
    std::cout << "block sweep rows: " << sweep.rows.size() << " -> " << args.out_dir << "\n";
    return 0;
}

int cmd_sweep_lambda(const CommonArgs& args) {
    const RunConfig cfg = load_config(args);
    DirLock lock(args.out_dir);
    const SweepResult sweep =
        lambda_sweep(cfg, parse_double_list(cfg.eval.lambda_values), cfg.eval.sweep_seeds);
    write_sweep_csv(args.out_dir + "/report.csv", sweep);
    SvgSeries ntp{"val_ntp", {}}, coh{"coherence", {}};
    for (const SweepRow& r : sweep.rows) {
        ntp.points.emplace_back(r.x, r.val_ntp);
        coh.points.emplace_back(r.x, r.coherence);
    }
    write_svg_chart(args.out_dir + "/sweep_lambda.svg", "alignment coefficient sweep", "lambda",
                    "metric", {ntp, coh});
    std::cout << "lambda sweep rows: " << sweep.rows.size() << " -> " << args.out_dir << "\n";
    return 0;
}

int cmd_compare(const CommonArgs& args) {
    const RunConfig cfg = load_config(args);
    DirLock lock(args.out_dir);

    RunConfig baseline = cfg;
    baseline.train.foresight = ForesightConfig{};
    RunConfig implicit_cfg = cfg;
    implicit_cfg.train.foresight = default_implicit_config();
    implicit_cfg.train.foresight.head_hidden = cfg.train.foresight.head_hidden;
    RunConfig explicit_cfg = cfg;
    explicit_cfg.train.foresight = default_explicit_config();
    explicit_cfg.train.foresight.head_hidden = cfg.train.foresight.head_hidden;

    const ConvergenceResult result = convergence_compare(
        {{"baseline", baseline}, {"implicit", implicit_cfg}, {"explicit", explicit_cfg}},
        cfg.eval.compare_threshold, cfg.eval.compare_max_steps, cfg.eval.sweep_seeds);

    std::ofstream out(args.out_dir + "/report.csv", std::ios::trunc);
    out << "config,median_steps_to_threshold\n";
    for (const auto& [name, steps] : result.median_crossing) {
        out << name << "," << steps << "\n";
        std::cout << name << ": median steps to coherence >= " << result.threshold << ": " << steps
                  << "\n";
    }
    std::vector<SvgSeries> series;
    for (const auto& curve : result.curves) {
        SvgSeries s{curve.name, {}};
        for (const auto& [step, coh] : curve.coherence_by_step) s.points.emplace_back(step, coh);
        series.push_back(std::move(s));
    }
    write_svg_chart(args.out_dir + "/convergence.svg", "coherence vs training step", "step",
                    "coherence", series);
    return 0;
}

int cmd_render(const CommonArgs& args) {
    const RunConfig cfg = load_config(args);
    DirLock lock(args.out_dir);
    std::vector<TokenGrid> grids;
    CorpusConfig render_cfg = cfg.corpus;
    if (!args.input.empty()) {
        grids = read_corpus(args.input, &render_cfg);
    } else {
        const Splits splits = make_splits(cfg.corpus, cfg.n_train, cfg.n_val);
        for (int i = 0; i < cfg.sample_count; ++i) grids.push_back(splits.train.get(i));
        write_corpus(args.out_dir + "/corpus.arfs", render_cfg, grids);
    }
    for (size_t i = 0; i < grids.size(); ++i) {
        write_pgm(args.out_dir + "/grid_" + std::to_string(i) + ".pgm", grids[i], render_cfg.shape,
                  render_cfg.vocab_size);
    }
    std::cout << "rendered " << grids.size() << " grids -> " << args.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"autoregressive grid generation lab"};
    app.require_subcommand(1);

    CommonArgs args;
    const auto add_common = [&](CLI::App* sub, bool needs_input = false) {
        sub->add_option("--config", args.config_path, "run configuration file")->required();
        sub->add_option("--out", args.out_dir, "output directory")->required();
        sub->add_option("--seed", args.seed, "override the config seeds");
        sub->add_option("--resume", args.resume, "checkpoint to load/resume from");
        sub->add_option("--steps", args.steps, "override train.total_steps");
        sub->add_option("--device-threads", args.device_threads,
                        "worker threads for independent sampling jobs")
            ->check(CLI::PositiveNumber);
        if (needs_input) sub->add_option("--input", args.input, "corpus dump to render");
    };

    add_common(app.add_subcommand("train", "train a model"));
    add_common(app.add_subcommand("sample", "sample grids from a checkpoint"));
    add_common(app.add_subcommand("eval", "evaluate a checkpoint"));
    add_common(app.add_subcommand("sweep-block", "encoder block-causal sweep"));
    add_common(app.add_subcommand("sweep-lambda", "alignment coefficient sweep"));
    add_common(app.add_subcommand("compare", "convergence comparison across modes"));
    add_common(app.add_subcommand("pretrain-encoder", "pretrain the bidirectional encoder"));
    add_common(app.add_subcommand("render", "render grids to PGM"), true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const std::string sub = app.get_subcommands().front()->get_name();
        if (sub == "train") return cmd_train(args);
        if (sub == "sample") return cmd_sample(args);
        if (sub == "eval") return cmd_eval(args);
        if (sub == "sweep-block") return cmd_sweep_block(args);
        if (sub == "sweep-lambda") return cmd_sweep_lambda(args);
        if (sub == "compare") return cmd_compare(args);
        if (sub == "pretrain-encoder") return cmd_pretrain_encoder(args);
        if (sub == "render") return cmd_render(args);
        std::cerr << "unknown subcommand\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
