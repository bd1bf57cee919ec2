#include "arfs/corpus.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace arfs {

void CorpusConfig::validate() const {
    if (vocab_size < 1) throw std::invalid_argument("vocab_size must be positive");
    if (shape.height < 2 || shape.width < 2) {
        throw std::invalid_argument("corpus grids need at least 2x2 for quadrants");
    }
    if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
    if (palette_size < 4) throw std::invalid_argument("palette_size must cover 4 quadrant slots");
    if (num_classes * palette_size > vocab_size) {
        throw std::invalid_argument("class palettes must fit the vocabulary disjointly");
    }
    if (noise_p < 0.0 || noise_p > 1.0) throw std::invalid_argument("noise_p must lie in [0,1]");
}

TokenGrid generate_sample(const CorpusConfig& cfg, int cls, Rng& rng) {
    cfg.validate();
    if (cls < 0 || cls >= cfg.num_classes) throw std::invalid_argument("class label out of range");

    // Distinct palette slot per quadrant: partial Fisher-Yates over the slots.
    std::vector<int> slots(size_t(cfg.palette_size));
    for (int i = 0; i < cfg.palette_size; ++i) slots[size_t(i)] = i;
    for (int i = 0; i < 4; ++i) {
        const int j = i + int(rng.next_below(uint64_t(cfg.palette_size - i)));
        std::swap(slots[size_t(i)], slots[size_t(j)]);
    }

    TokenGrid grid;
    grid.class_label = cls;
    grid.tokens.resize(size_t(cfg.shape.tokens()));
    for (int r = 0; r < cfg.shape.height; ++r) {
        for (int c = 0; c < cfg.shape.width; ++c) {
            const int q = cfg.quadrant(r, c);
            int tok = cfg.palette_token(cls, slots[size_t(q)]);
            if (cfg.noise_p > 0.0 && rng.bernoulli(cfg.noise_p)) {
                tok = int(rng.next_below(uint64_t(cfg.vocab_size)));
            }
            grid.tokens[size_t(r * cfg.shape.width + c)] = uint16_t(tok);
        }
    }
    return grid;
}

CoherenceReport coherence_score(const TokenGrid& grid, const CorpusConfig& cfg) {
    if (int(grid.tokens.size()) != cfg.shape.tokens()) {
        throw std::invalid_argument("grid size does not match corpus shape");
    }

    CoherenceReport rep;
    std::array<int, 4> owners{};
    for (int q = 0; q < 4; ++q) {
        // Majority token of the quadrant; ties resolve to the smallest id.
        std::map<int, int> counts;
        for (int r = 0; r < cfg.shape.height; ++r) {
            for (int c = 0; c < cfg.shape.width; ++c) {
                if (cfg.quadrant(r, c) == q) ++counts[grid.tokens[size_t(r * cfg.shape.width + c)]];
            }
        }
        int best_tok = -1, best_cnt = -1;
        for (const auto& [tok, cnt] : counts) {
            if (cnt > best_cnt) {
                best_tok = tok;
                best_cnt = cnt;
            }
        }
        rep.quadrant_majority[size_t(q)] = best_tok;
        owners[size_t(q)] = cfg.palette_owner(best_tok);
    }

    // Plurality owner over the quadrants, ignoring quadrants with no owner;
    // ties resolve to the smaller class id.
    int best_owner = -1, best_votes = 0;
    for (int cls = 0; cls < cfg.num_classes; ++cls) {
        int votes = 0;
        for (int q = 0; q < 4; ++q) votes += owners[size_t(q)] == cls ? 1 : 0;
        if (votes > best_votes) {
            best_votes = votes;
            best_owner = cls;
        }
    }
    rep.score = best_owner < 0 ? 0.0 : double(best_votes) / 4.0;
    return rep;
}

TokenGrid SampleStream::get(int i) const {
    if (i < 0 || i >= count) throw std::invalid_argument("stream index out of range");
    Rng rng(mix64(key ^ mix64(uint64_t(i) + 0x51ed2701ull)));
    const int cls = int(rng.next_below(uint64_t(cfg.num_classes)));
    return generate_sample(cfg, cls, rng);
}

Splits make_splits(const CorpusConfig& cfg, int n_train, int n_val) {
    cfg.validate();
    if (n_train < 1 || n_val < 1) throw std::invalid_argument("split sizes must be positive");
    const Rng root(cfg.seed);
    Splits s;
    s.train = SampleStream{cfg, root.fork(0xa11ce).state(), n_train};
    s.val = SampleStream{cfg, root.fork(0xb0b).state(), n_val};
    return s;
}

namespace {

void put_u16(std::string& out, uint16_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char(v >> 8));
}

uint16_t get_u16(const std::string& in, size_t& pos) {
    if (pos + 2 > in.size()) throw std::runtime_error("corpus file truncated");
    const uint16_t v = uint16_t(uint8_t(in[pos])) | uint16_t(uint16_t(uint8_t(in[pos + 1])) << 8);
    pos += 2;
    return v;
}

constexpr char kCorpusMagic[9] = "ARFSCORP";

}  // namespace

void write_corpus(const std::string& path, const CorpusConfig& cfg,
                  const std::vector<TokenGrid>& samples) {
    std::string buf;
    buf.append(kCorpusMagic, 8);
    put_u16(buf, 1);  // version
    put_u16(buf, uint16_t(cfg.vocab_size));
    put_u16(buf, uint16_t(cfg.shape.height));
    put_u16(buf, uint16_t(cfg.shape.width));
    for (const TokenGrid& g : samples) {
        put_u16(buf, uint16_t(g.class_label));
        for (uint16_t t : g.tokens) put_u16(buf, t);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<TokenGrid> read_corpus(const std::string& path, CorpusConfig* cfg_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 16 || std::memcmp(buf.data(), kCorpusMagic, 8) != 0) {
        throw std::runtime_error("not a corpus dump: " + path);
    }
    size_t pos = 8;
    const uint16_t version = get_u16(buf, pos);
    if (version != 1) throw std::runtime_error("unsupported corpus version");
    CorpusConfig cfg;
    cfg.vocab_size = get_u16(buf, pos);
    cfg.shape.height = get_u16(buf, pos);
    cfg.shape.width = get_u16(buf, pos);

    const size_t record = 2 + 2 * size_t(cfg.shape.tokens());
    if ((buf.size() - 16) % record != 0) throw std::runtime_error("corpus file truncated");

    std::vector<TokenGrid> samples;
    samples.reserve((buf.size() - 16) / record);
    while (pos < buf.size()) {
        TokenGrid g;
        g.class_label = get_u16(buf, pos);
        g.tokens.resize(size_t(cfg.shape.tokens()));
        for (auto& t : g.tokens) t = get_u16(buf, pos);
        samples.push_back(std::move(g));
    }
    if (cfg_out) *cfg_out = cfg;
    return samples;
}

}  // namespace arfs
