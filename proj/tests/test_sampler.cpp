#include <doctest.h>

#include <cmath>
#include <cstring>

#include "arfs/sampler.hpp"
#include "arfs/trainer.hpp"

using namespace arfs;

TEST_CASE("cfg combine algebra") {
    const std::vector<double> cond{2.0, 0.0}, uncond{1.0, 1.0};
    std::vector<double> out(2);

    cfg_combine(cond.data(), uncond.data(), 1.0, out.data(), 2);
    CHECK(out == cond);
    cfg_combine(cond.data(), uncond.data(), 0.0, out.data(), 2);
    CHECK(out == uncond);
    cfg_combine(cond.data(), uncond.data(), 2.0, out.data(), 2);
    CHECK(out[0] == 3.0);
    CHECK(out[1] == -1.0);
}

TEST_CASE("top-k / top-p filtering") {
    const double inf = std::numeric_limits<double>::infinity();

    SUBCASE("disabled filters are the identity") {
        std::vector<double> row{0.3, -1.0, 2.0};
        const std::vector<double> orig = row;
        filter_top_k_top_p(row.data(), 3, 0, 1.0);
        CHECK(row == orig);
    }
    SUBCASE("top-k 1 keeps only the argmax") {
        std::vector<double> row{0.3, -1.0, 2.0};
        filter_top_k_top_p(row.data(), 3, 1, 1.0);
        CHECK(row[0] == -inf);
        CHECK(row[1] == -inf);
        CHECK(row[2] == 2.0);
    }
    SUBCASE("nucleus keeps the smallest prefix reaching the mass") {
        // softmax of {ln 5, ln 3, ln 2} = {0.5, 0.3, 0.2}; 0.5 < 0.7 <= 0.8
        std::vector<double> row{std::log(5.0), std::log(3.0), std::log(2.0)};
        filter_top_k_top_p(row.data(), 3, 0, 0.7);
        CHECK(row[0] == std::log(5.0));
        CHECK(row[1] == std::log(3.0));
        CHECK(row[2] == -inf);
    }
    SUBCASE("the argmax always survives a tiny top-p") {
        std::vector<double> row{1.0, 0.0, -1.0};
        filter_top_k_top_p(row.data(), 3, 0, 1e-9);
        CHECK(row[0] == 1.0);
        CHECK(row[1] == -inf);
        CHECK(row[2] == -inf);
    }
    SUBCASE("bad top_p is a domain error") {
        std::vector<double> row{1.0};
        CHECK_THROWS_AS(filter_top_k_top_p(row.data(), 1, 0, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(filter_top_k_top_p(row.data(), 1, 0, 1.5), std::invalid_argument);
    }
}

TEST_CASE("filtered entries are never sampled and uniform rows stay uniform") {
    std::vector<double> row{0.0, 0.0, 0.0, 0.0};
    filter_top_k_top_p(row.data(), 4, 2, 1.0);  // ties resolve to ids 0,1

    Rng rng(8);
    std::vector<int> counts(4, 0);
    for (int i = 0; i < 20000; ++i) ++counts[size_t(sample_categorical(row.data(), 4, rng))];
    CHECK(counts[2] == 0);
    CHECK(counts[3] == 0);

    // unfiltered uniform logits: frequencies within 4 standard errors
    const std::vector<double> uniform{0.5, 0.5, 0.5, 0.5};
    std::vector<int> freq(4, 0);
    const int draws = 100000;
    Rng rng2(9);
    for (int i = 0; i < draws; ++i) ++freq[size_t(sample_categorical(uniform.data(), 4, rng2))];
    const double expect = draws / 4.0;
    const double se = std::sqrt(draws * 0.25 * 0.75);
    for (int c : freq) CHECK(std::abs(c - expect) < 4.0 * se);
}

namespace {

ArState<float> tiny_trained_state(ForesightMode mode, uint64_t seed = 3) {
    ModelConfig cfg = micro_model_config();
    cfg.vocab = 16;
    cfg.num_classes = 2;
    ForesightConfig fs;
    if (mode == ForesightMode::explicit_ema) {
        fs = default_explicit_config();
        fs.head_hidden = 8;
        fs.warmup_fraction = 0.0;
    }
    ArState<float> st = make_state<float>(cfg, fs, Rng(seed));
    return st;
}

}  // namespace

TEST_CASE("incremental decoding matches the full forward bit for bit") {
    const ArState<float> st = tiny_trained_state(ForesightMode::none);
    const ModelConfig& cfg = st.cfg;
    const std::vector<int> row_limits = mask_row_limits(causal_mask(cfg.seq_len()));

    std::vector<uint16_t> toks(size_t(cfg.shape.tokens()));
    for (size_t i = 0; i < toks.size(); ++i) toks[i] = uint16_t((3 * i + 1) % cfg.vocab);

    BackboneActs<float> acts;
    backbone_forward(cfg, st.off, st.theta.data(), toks.data(), 1, row_limits, false,
                     (Rng*)nullptr, acts);

    DecodeCache<float> cache;
    cache.reset(cfg);
    decode_step(cfg, st.off, st.theta.data(), cache, 1, true);
    for (int i = 0; i < cfg.shape.tokens(); ++i) {
        CHECK(std::memcmp(cache.logits.data(), acts.logits.data() + size_t(i) * cfg.vocab,
                          sizeof(float) * size_t(cfg.vocab)) == 0);
        if (i + 1 < cfg.shape.tokens()) {
            decode_step(cfg, st.off, st.theta.data(), cache, toks[size_t(i)], false);
        }
    }
}

TEST_CASE("sampling is deterministic and respects the greedy limit") {
    const ArState<float> st = tiny_trained_state(ForesightMode::none);
    SampleParams sp;
    sp.cfg_scale = 2.0;
    sp.seed = 41;

    DecodeCache<float> c1, c2;
    Rng r1(41), r2(41);
    const TokenGrid a = sample_grid(st.cfg, st.off, st.theta.data(), 1, sp, r1, c1, c2);
    Rng r3(41);
    const TokenGrid b = sample_grid(st.cfg, st.off, st.theta.data(), 1, sp, r3, c1, c2);
    CHECK(a == b);

    // temperature zero is argmax decoding: rng-independent
    sp.temperature = 0.0;
    Rng r4(1), r5(999);
    const TokenGrid g1 = sample_grid(st.cfg, st.off, st.theta.data(), 1, sp, r4, c1, c2);
    const TokenGrid g2 = sample_grid(st.cfg, st.off, st.theta.data(), 1, sp, r5, c1, c2);
    CHECK(g1 == g2);
}

TEST_CASE("a foresight checkpoint samples identically once the heads are discarded") {
    const ArState<float> fs_state = tiny_trained_state(ForesightMode::explicit_ema);

    // same decoder weights moved into a foresight-free state
    ArState<float> bare = tiny_trained_state(ForesightMode::none, 999);
    for (const TensorSpec& t : bare.layout.tensors) {
        const TensorSpec& src = fs_state.layout.find(t.name);
        std::copy(fs_state.theta.begin() + long(src.offset),
                  fs_state.theta.begin() + long(src.offset + src.size),
                  bare.theta.begin() + long(t.offset));
    }

    SampleParams sp;
    sp.seed = 11;
    DecodeCache<float> c1, c2;
    for (int cls = 0; cls < 2; ++cls) {
        Rng ra(uint64_t(100 + cls)), rb(uint64_t(100 + cls));
        const TokenGrid with_heads =
            sample_grid(fs_state.cfg, fs_state.off, fs_state.theta.data(), cls, sp, ra, c1, c2);
        const TokenGrid without =
            sample_grid(bare.cfg, bare.off, bare.theta.data(), cls, sp, rb, c1, c2);
        CHECK(with_heads == without);
    }
}

TEST_CASE("unconditional class id collapses guidance to a single stream") {
    const ArState<float> st = tiny_trained_state(ForesightMode::none);
    SampleParams sp;
    sp.cfg_scale = 2.0;
    sp.seed = 21;
    DecodeCache<float> c1, c2;
    Rng r1(21);
    const TokenGrid g =
        sample_grid(st.cfg, st.off, st.theta.data(), st.cfg.null_class(), sp, r1, c1, c2);
    CHECK(int(g.tokens.size()) == st.cfg.shape.tokens());
    CHECK_THROWS_AS(
        [&] {
            Rng r(1);
            sample_grid(st.cfg, st.off, st.theta.data(), st.cfg.num_classes + 1, sp, r, c1, c2);
        }(),
        std::invalid_argument);
}
