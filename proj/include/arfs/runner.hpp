#pragma once

#include <optional>
#include <string>
#include <vector>

#include "arfs/checkpoint.hpp"
#include "arfs/config.hpp"
#include "arfs/corpus.hpp"
#include "arfs/foresight.hpp"
#include "arfs/trainer.hpp"

namespace arfs {

// ---------------------------------------------------------------------------
// state <-> checkpoint

CheckpointData state_to_checkpoint(const ArState<float>& state, const std::string& config_text);
// Rebuilds the state from the checkpoint's embedded config; encoder_width must
// match for implicit-mode checkpoints.
ArState<float> state_from_checkpoint(const CheckpointData& ckpt, int encoder_width = 0);

CheckpointData encoder_to_checkpoint(const BidirEncoder<float>& enc, const std::string& config_text);
BidirEncoder<float> encoder_from_checkpoint(const CheckpointData& ckpt);

// ---------------------------------------------------------------------------
// bidirectional encoder pretraining (masked-token prediction)

// Trains a small full-attention transformer to fill masked tokens, then
// freezes it. mask_block 0 means fully bidirectional; otherwise the attention
// is block-causal with that block size. Deterministic given the settings.
BidirEncoder<float> pretrain_bidir_encoder(const CorpusConfig& corpus, const SampleStream& train,
                                           const EncoderSettings& settings);

// Held-out masked-token accuracy of a frozen encoder (diagnostic).
double masked_token_accuracy(const BidirEncoder<float>& enc, const SampleStream& stream,
                             int n_samples, double mask_ratio, uint64_t seed);

// ---------------------------------------------------------------------------
// full training run with artifacts

struct TrainRunResult {
    ArState<float> state;
    std::string final_checkpoint;
    std::string metrics_path;
};

// Executes cfg.train.total_steps steps over the corpus train split, appending
// one metrics row per step and checkpointing every eval_every steps. Fully
// deterministic given the config. `resume_from` continues a previous run.
TrainRunResult run_training(const RunConfig& cfg, const std::string& out_dir,
                            const BidirEncoder<float>* encoder,
                            const std::optional<std::string>& resume_from = std::nullopt,
                            bool write_files = true);

// Loads the encoder named by the config (foresight.encoder_checkpoint) or
// pretrains one when the path is empty. Returns nothing for modes that do not
// use an encoder.
std::optional<BidirEncoder<float>> prepare_encoder(const RunConfig& cfg);

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

}  // namespace arfs
