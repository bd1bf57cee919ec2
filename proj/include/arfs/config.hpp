#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "arfs/corpus.hpp"
#include "arfs/foresight.hpp"
#include "arfs/model.hpp"
#include "arfs/sampler.hpp"
#include "arfs/trainer.hpp"

namespace arfs {

// Parse failure with the offending location; the CLI turns this into exit
// code 2 and a line:column diagnostic.
struct ConfigError : std::runtime_error {
    int line;
    int col;
    ConfigError(int line_, int col_, const std::string& msg)
        : std::runtime_error("line " + std::to_string(line_) + ", column " + std::to_string(col_) +
                             ": " + msg),
          line(line_),
          col(col_) {}
};

struct EncoderSettings {
    int layers = 2;
    int width = 64;
    int heads = 4;
    int mask_block = 0;  // 0 means fully bidirectional
    double mask_ratio = 0.5;
    int steps = 1500;
    int batch = 16;
    double lr = 1e-3;
    uint64_t seed = 7;
    std::string checkpoint;  // load instead of pretraining when set
};

struct EvalSettings {
    int n_samples = 64;
    uint64_t seed = 99;
    int smoothness_grids = 16;
    std::string block_sizes = "1,16,256";
    std::string lambda_values = "0.5,1,2";
    double compare_threshold = 0.9;
    int compare_max_steps = 20000;
    int sweep_seeds = 3;
    int sweep_steps = 1500;
};

// Everything a run needs, grouped by the dotted config sections. The data
//-dependent architecture fields (vocab, shape, classes) live in corpus.* and
// are copied into the model config by resolve().
struct RunConfig {
    CorpusConfig corpus;
    int n_train = 4096;
    int n_val = 256;
    ModelConfig model;
    TrainConfig train;
    EncoderSettings encoder;
    SampleParams sample;
    int sample_count = 16;
    EvalSettings eval;

    ModelConfig resolved_model() const {
        ModelConfig m = model;
        m.vocab = corpus.vocab_size;
        m.shape = corpus.shape;
        m.num_classes = corpus.num_classes;
        return m;
    }
};

// Strict key = value grammar with '#' comments; unknown keys are rejected
// with their location. parse(serialize(cfg)) == cfg, bit-exact for floats.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);

std::vector<int> parse_int_list(const std::string& s);
std::vector<double> parse_double_list(const std::string& s);

}  // namespace arfs
