#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "arfs/checkpoint.hpp"
#include "arfs/config.hpp"
#include "arfs/eval.hpp"
#include "arfs/runner.hpp"

using namespace arfs;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("config serialize/parse round trip is exact") {
    RunConfig cfg;
    cfg.corpus.noise_p = 0.12345678901234567;
    cfg.train.lr = 3.0000000000000004e-4;
    cfg.train.foresight = default_explicit_config();
    cfg.train.foresight.lambda_schedule = {ScheduleSpec::Kind::step, 2.0, 1.0, 0.5};
    cfg.encoder.checkpoint = "runs/enc.ckpt";
    cfg.eval.block_sizes = "1,4,16";

    const std::string text = serialize_run_config(cfg);
    const RunConfig back = parse_run_config(text);
    CHECK(serialize_run_config(back) == text);
    CHECK(back.corpus.noise_p == cfg.corpus.noise_p);
    CHECK(back.train.lr == cfg.train.lr);
    CHECK(back.train.foresight.mode == ForesightMode::explicit_ema);
    CHECK(back.train.foresight.lambda_schedule == cfg.train.foresight.lambda_schedule);
    CHECK(back.encoder.checkpoint == "runs/enc.ckpt");
}

TEST_CASE("unknown keys are rejected with their location") {
    const std::string text = "corpus.vocab_size = 64\n  modle.layers = 6\n";
    try {
        parse_run_config(text);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(e.line == 2);
        CHECK(e.col == 3);
        CHECK(std::string(e.what()).find("modle.layers") != std::string::npos);
    }

    CHECK_THROWS_AS(parse_run_config("train.lr = fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("no equals sign here\n"), ConfigError);
    // comments and blank lines pass
    CHECK_NOTHROW(parse_run_config("# comment only\n\ntrain.lr = 0.001  # trailing\n"));
}

TEST_CASE("checkpoints round-trip bit-exactly and reject corruption") {
    TempDir dir("arfs_ckpt_test");
    CheckpointData ckpt;
    ckpt.tag = "ar";
    ckpt.config_text = "train.lr = 0.0001\n";
    ckpt.tensors.push_back(NamedTensor{"w", {2, 3}, {1.0f, -2.5f, 0.0f, 1e-20f, 3.14f, -0.0f}});
    ckpt.tensors.push_back(NamedTensor{"b", {3}, {0.5f, 0.25f, 0.125f}});
    ckpt.rng_key = 0xdeadbeef;
    ckpt.rng_counter = 7;
    ckpt.step = 42;

    const std::string p1 = dir.str() + "/a.ckpt";
    const std::string p2 = dir.str() + "/b.ckpt";
    write_checkpoint(p1, ckpt);
    const CheckpointData loaded = read_checkpoint(p1);
    CHECK(loaded.tag == "ar");
    CHECK(loaded.step == 42);
    CHECK(loaded.config_text == ckpt.config_text);
    REQUIRE(loaded.tensors.size() == 2);
    CHECK(loaded.tensors[0].data == ckpt.tensors[0].data);
    write_checkpoint(p2, loaded);
    CHECK(slurp(p1) == slurp(p2));  // save -> load -> save is byte-identical

    // flip one payload byte: the CRC must catch it
    std::string bytes = slurp(p1);
    bytes[bytes.size() / 2] = char(bytes[bytes.size() / 2] ^ 0x40);
    std::ofstream(p1, std::ios::binary | std::ios::trunc).write(bytes.data(), long(bytes.size()));
    CHECK_THROWS_WITH_AS(read_checkpoint(p1), doctest::Contains("CRC"), std::runtime_error);

    CheckpointData bad = ckpt;
    bad.tag = "??";
    CHECK_THROWS_AS(write_checkpoint(p2, bad), std::invalid_argument);
}

TEST_CASE("crc32 matches the reference value for 'check'-style input") {
    // "123456789" -> 0xCBF43926 is the standard IEEE test vector
    const char* s = "123456789";
    CHECK(crc32_ieee(reinterpret_cast<const uint8_t*>(s), 9) == 0xCBF43926u);
}

TEST_CASE("state checkpoints restore training exactly") {
    RunConfig cfg;
    cfg.corpus.vocab_size = 16;
    cfg.corpus.shape = GridShape{4, 4};
    cfg.corpus.num_classes = 2;
    cfg.corpus.palette_size = 4;
    cfg.corpus.seed = 12;
    cfg.n_train = 32;
    cfg.n_val = 8;
    cfg.model = micro_model_config();
    cfg.train.batch_size = 2;
    cfg.train.total_steps = 8;
    cfg.train.eval_every = 4;
    cfg.train.seed = 9;
    cfg.train.lr = 1e-3;

    TempDir full_dir("arfs_run_full"), half_dir("arfs_run_half");
    const TrainRunResult full = run_training(cfg, full_dir.str(), nullptr);

    RunConfig half_cfg = cfg;
    half_cfg.train.total_steps = 4;
    run_training(half_cfg, half_dir.str(), nullptr);
    // resume from the midpoint and finish; the final files must match bitwise
    const TrainRunResult resumed = run_training(
        cfg, half_dir.str() + "_resumed", nullptr,
        std::make_optional(half_dir.str() + "/final.ckpt"));

    CHECK(slurp(full.final_checkpoint) == slurp(resumed.final_checkpoint));
    fs::remove_all(half_dir.str() + "_resumed");
}

TEST_CASE("two identical runs leave byte-identical checkpoints") {
    RunConfig cfg;
    cfg.corpus.vocab_size = 16;
    cfg.corpus.shape = GridShape{4, 4};
    cfg.corpus.num_classes = 2;
    cfg.corpus.palette_size = 4;
    cfg.corpus.seed = 5;
    cfg.n_train = 32;
    cfg.n_val = 8;
    cfg.model = micro_model_config();
    cfg.train.batch_size = 2;
    cfg.train.total_steps = 6;
    cfg.train.eval_every = 3;
    cfg.train.seed = 31;

    TempDir d1("arfs_det_1"), d2("arfs_det_2");
    const TrainRunResult r1 = run_training(cfg, d1.str(), nullptr);
    const TrainRunResult r2 = run_training(cfg, d2.str(), nullptr);
    CHECK(slurp(r1.final_checkpoint) == slurp(r2.final_checkpoint));
}

TEST_CASE("pgm renders are byte-exact") {
    TempDir dir("arfs_pgm_test");
    const GridShape shape{2, 2};

    TokenGrid black{0, {0, 0, 0, 0}};
    write_pgm(dir.str() + "/black.pgm", black, shape, 16);
    CHECK(slurp(dir.str() + "/black.pgm") == std::string("P5\n2 2\n255\n") +
                                                 std::string("\x00\x00\x00\x00", 4));

    TokenGrid white{0, {15, 15, 15, 15}};
    write_pgm(dir.str() + "/white.pgm", white, shape, 16);
    CHECK(slurp(dir.str() + "/white.pgm") == std::string("P5\n2 2\n255\n") + "\xff\xff\xff\xff");

    // ramp: pixel = floor(255 * t / (V - 1))
    TokenGrid ramp{0, {0, 5, 10, 15}};
    write_pgm(dir.str() + "/ramp.pgm", ramp, shape, 16);
    std::string expect = "P5\n2 2\n255\n";
    for (int t : {0, 5, 10, 15}) expect.push_back(char(uint8_t(255 * t / 15)));
    CHECK(slurp(dir.str() + "/ramp.pgm") == expect);
}

#ifdef ARFS_BIN
TEST_CASE("cli exit codes: success, config error, strict keys") {
    TempDir dir("arfs_cli_test");
    const std::string bin = ARFS_BIN;

    std::ofstream good(dir.str() + "/good.cfg");
    good << "corpus.vocab_size = 16\ncorpus.height = 4\ncorpus.width = 4\n"
            "corpus.num_classes = 2\ncorpus.palette_size = 4\ncorpus.n_train = 16\n"
            "corpus.n_val = 4\nmodel.layers = 2\nmodel.d_model = 8\nmodel.n_heads = 2\n"
            "model.align_layer = 1\nsample.n_samples = 2\n";
    good.close();
    std::ofstream bad(dir.str() + "/bad.cfg");
    bad << "modle.layers = 6\n";
    bad.close();

    const auto run = [&](const std::string& args) {
        const int raw = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(raw);
    };
    CHECK(run("render --config " + dir.str() + "/good.cfg --out " + dir.str() + "/render") == 0);
    CHECK(fs::exists(dir.str() + "/render/grid_0.pgm"));
    CHECK(run("render --config " + dir.str() + "/bad.cfg --out " + dir.str() + "/bad") == 2);
    CHECK(run("train --config " + dir.str() + "/missing.cfg --out " + dir.str() + "/x") != 0);
}
#endif
