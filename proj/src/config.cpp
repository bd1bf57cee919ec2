#include "arfs/config.hpp"

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace arfs {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Field {
    std::function<void(RunConfig&, const std::string&, int, int)> set;
    std::function<std::string(const RunConfig&)> get;
};

int parse_int_value(const std::string& v, int line, int col) {
    int out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError(line, col, "expected integer, got \"" + v + "\"");
    }
    return out;
}

uint64_t parse_u64_value(const std::string& v, int line, int col) {
    uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError(line, col, "expected unsigned integer, got \"" + v + "\"");
    }
    return out;
}

double parse_double_value(const std::string& v, int line, int col) {
    try {
        size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(line, col, "expected number, got \"" + v + "\"");
    }
}

bool parse_bool_value(const std::string& v, int line, int col) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(line, col, "expected true/false, got \"" + v + "\"");
}

ForesightMode parse_mode(const std::string& v, int line, int col) {
    if (v == "none") return ForesightMode::none;
    if (v == "explicit_ema") return ForesightMode::explicit_ema;
    if (v == "implicit_encoder") return ForesightMode::implicit_encoder;
    if (v == "output_mtp") return ForesightMode::output_mtp;
    throw ConfigError(line, col, "bad foresight mode \"" + v + "\"");
}

std::string mode_name(ForesightMode m) {
    switch (m) {
        case ForesightMode::none: return "none";
        case ForesightMode::explicit_ema: return "explicit_ema";
        case ForesightMode::implicit_encoder: return "implicit_encoder";
        case ForesightMode::output_mtp: return "output_mtp";
    }
    return "none";
}

std::map<std::string, Field> build_fields() {
    std::map<std::string, Field> f;

#define INT_FIELD(key, expr)                                                              \
    f[key] = Field{[](RunConfig& c, const std::string& v, int ln, int col) {              \
                       c.expr = parse_int_value(v, ln, col);                              \
                   },                                                                     \
                   [](const RunConfig& c) { return std::to_string(c.expr); }}
#define U64_FIELD(key, expr)                                                              \
    f[key] = Field{[](RunConfig& c, const std::string& v, int ln, int col) {              \
                       c.expr = parse_u64_value(v, ln, col);                              \
                   },                                                                     \
                   [](const RunConfig& c) { return std::to_string(c.expr); }}
#define DBL_FIELD(key, expr)                                                              \
    f[key] = Field{[](RunConfig& c, const std::string& v, int ln, int col) {              \
                       c.expr = parse_double_value(v, ln, col);                           \
                   },                                                                     \
                   [](const RunConfig& c) { return fmt_double(c.expr); }}
#define BOOL_FIELD(key, expr)                                                             \
    f[key] = Field{[](RunConfig& c, const std::string& v, int ln, int col) {              \
                       c.expr = parse_bool_value(v, ln, col);                             \
                   },                                                                     \
                   [](const RunConfig& c) { return c.expr ? "true" : "false"; }}
#define STR_FIELD(key, expr)                                                              \
    f[key] = Field{[](RunConfig& c, const std::string& v, int, int) { c.expr = v; },      \
                   [](const RunConfig& c) { return c.expr; }}

    INT_FIELD("corpus.vocab_size", corpus.vocab_size);
    INT_FIELD("corpus.height", corpus.shape.height);
    INT_FIELD("corpus.width", corpus.shape.width);
    INT_FIELD("corpus.num_classes", corpus.num_classes);
    INT_FIELD("corpus.palette_size", corpus.palette_size);
    DBL_FIELD("corpus.noise_p", corpus.noise_p);
    U64_FIELD("corpus.seed", corpus.seed);
    INT_FIELD("corpus.n_train", n_train);
    INT_FIELD("corpus.n_val", n_val);

    INT_FIELD("model.layers", model.layers);
    INT_FIELD("model.d_model", model.d_model);
    INT_FIELD("model.n_heads", model.n_heads);
    INT_FIELD("model.align_layer", model.align_layer);
    DBL_FIELD("model.dropout_token", model.dropout_token);
    DBL_FIELD("model.dropout_attn", model.dropout_attn);
    DBL_FIELD("model.dropout_ffn", model.dropout_ffn);
    DBL_FIELD("model.dropout_cond", model.dropout_cond);

    DBL_FIELD("train.lr", train.lr);
    DBL_FIELD("train.beta1", train.beta1);
    DBL_FIELD("train.beta2", train.beta2);
    DBL_FIELD("train.weight_decay", train.weight_decay);
    DBL_FIELD("train.clip_norm", train.clip_norm);
    BOOL_FIELD("train.cosine_lr", train.cosine_lr);
    INT_FIELD("train.batch_size", train.batch_size);
    INT_FIELD("train.total_steps", train.total_steps);
    INT_FIELD("train.eval_every", train.eval_every);
    U64_FIELD("train.seed", train.seed);

    f["foresight.mode"] =
        Field{[](RunConfig& c, const std::string& v, int ln, int col) {
                  c.train.foresight.mode = parse_mode(v, ln, col);
              },
              [](const RunConfig& c) { return mode_name(c.train.foresight.mode); }};
    f["foresight.layout"] =
        Field{[](RunConfig& c, const std::string& v, int ln, int col) {
                  if (v == "1d") c.train.foresight.layout = FsLayout::raster_1d;
                  else if (v == "2d") c.train.foresight.layout = FsLayout::grid_2d;
                  else throw ConfigError(ln, col, "bad layout \"" + v + "\" (want 1d or 2d)");
              },
              [](const RunConfig& c) {
                  return c.train.foresight.layout == FsLayout::raster_1d ? "1d" : "2d";
              }};
    INT_FIELD("foresight.k", train.foresight.k);
    DBL_FIELD("foresight.tau", train.foresight.tau);
    DBL_FIELD("foresight.warmup_fraction", train.foresight.warmup_fraction);
    f["foresight.lambda_kind"] =
        Field{[](RunConfig& c, const std::string& v, int ln, int col) {
                  if (v == "const") c.train.foresight.lambda_schedule.kind = ScheduleSpec::Kind::constant;
                  else if (v == "step") c.train.foresight.lambda_schedule.kind = ScheduleSpec::Kind::step;
                  else if (v == "cosine") c.train.foresight.lambda_schedule.kind = ScheduleSpec::Kind::cosine;
                  else throw ConfigError(ln, col, "bad schedule \"" + v + "\"");
              },
              [](const RunConfig& c) {
                  switch (c.train.foresight.lambda_schedule.kind) {
                      case ScheduleSpec::Kind::constant: return std::string("const");
                      case ScheduleSpec::Kind::step: return std::string("step");
                      case ScheduleSpec::Kind::cosine: return std::string("cosine");
                  }
                  return std::string("const");
              }};
    DBL_FIELD("foresight.lambda_start", train.foresight.lambda_schedule.start);
    DBL_FIELD("foresight.lambda_end", train.foresight.lambda_schedule.end);
    DBL_FIELD("foresight.lambda_switch", train.foresight.lambda_schedule.switch_fraction);
    f["foresight.ema_source"] =
        Field{[](RunConfig& c, const std::string& v, int ln, int col) {
                  if (v == "online") c.train.foresight.ema_source = EmaSource::online;
                  else if (v == "pretrained_frozen") c.train.foresight.ema_source = EmaSource::pretrained_frozen;
                  else throw ConfigError(ln, col, "bad ema source \"" + v + "\"");
              },
              [](const RunConfig& c) {
                  return c.train.foresight.ema_source == EmaSource::online ? "online"
                                                                           : "pretrained_frozen";
              }};
    f["foresight.head_kind"] =
        Field{[](RunConfig& c, const std::string& v, int ln, int col) {
                  if (v == "mlp") c.train.foresight.head_kind = HeadKind::mlp;
                  else if (v == "transformer") c.train.foresight.head_kind = HeadKind::transformer_block;
                  else throw ConfigError(ln, col, "bad head kind \"" + v + "\"");
              },
              [](const RunConfig& c) {
                  return c.train.foresight.head_kind == HeadKind::mlp ? "mlp" : "transformer";
              }};
    INT_FIELD("foresight.head_hidden", train.foresight.head_hidden);
    INT_FIELD("foresight.encoder_layers", encoder.layers);
    INT_FIELD("foresight.encoder_width", encoder.width);
    INT_FIELD("foresight.encoder_heads", encoder.heads);
    INT_FIELD("foresight.encoder_mask_block", encoder.mask_block);
    DBL_FIELD("foresight.encoder_mask_ratio", encoder.mask_ratio);
    INT_FIELD("foresight.encoder_steps", encoder.steps);
    INT_FIELD("foresight.encoder_batch", encoder.batch);
    DBL_FIELD("foresight.encoder_lr", encoder.lr);
    U64_FIELD("foresight.encoder_seed", encoder.seed);
    STR_FIELD("foresight.encoder_checkpoint", encoder.checkpoint);

    DBL_FIELD("sample.cfg_scale", sample.cfg_scale);
    DBL_FIELD("sample.temperature", sample.temperature);
    INT_FIELD("sample.top_k", sample.top_k);
    DBL_FIELD("sample.top_p", sample.top_p);
    U64_FIELD("sample.seed", sample.seed);
    INT_FIELD("sample.n_samples", sample_count);

    INT_FIELD("eval.n_samples", eval.n_samples);
    U64_FIELD("eval.seed", eval.seed);
    INT_FIELD("eval.smoothness_grids", eval.smoothness_grids);
    STR_FIELD("eval.block_sizes", eval.block_sizes);
    STR_FIELD("eval.lambda_values", eval.lambda_values);
    DBL_FIELD("eval.compare_threshold", eval.compare_threshold);
    INT_FIELD("eval.compare_max_steps", eval.compare_max_steps);
    INT_FIELD("eval.sweep_seeds", eval.sweep_seeds);
    INT_FIELD("eval.sweep_steps", eval.sweep_steps);

#undef INT_FIELD
#undef U64_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD
#undef STR_FIELD
    return f;
}

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> f = build_fields();
    return f;
}

// serialization order: stable, grouped by section
const std::vector<std::string>& field_order() {
    static const std::vector<std::string> order = [] {
        std::vector<std::string> keys;
        for (const auto& [k, v] : fields()) keys.push_back(k);
        return keys;
    }();
    return order;
}

std::string trim(const std::string& s, size_t begin, size_t end, size_t* first = nullptr) {
    while (begin < end && (s[begin] == ' ' || s[begin] == '\t')) ++begin;
    while (end > begin && (s[end - 1] == ' ' || s[end - 1] == '\t')) --end;
    if (first) *first = begin;
    return s.substr(begin, end - begin);
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        const size_t comment = raw.find('#');
        const size_t end = comment == std::string::npos ? raw.size() : comment;
        size_t key_start = 0;
        const std::string stripped = trim(raw, 0, end, &key_start);
        if (stripped.empty()) continue;

        const size_t eq = raw.find('=');
        if (eq == std::string::npos || eq >= end) {
            throw ConfigError(line_no, int(key_start) + 1, "expected key = value");
        }
        size_t kpos = 0, vpos = 0;
        const std::string key = trim(raw, 0, eq, &kpos);
        const std::string value = trim(raw, eq + 1, end, &vpos);
        if (key.empty()) throw ConfigError(line_no, int(eq) + 1, "missing key before '='");

        const auto it = fields().find(key);
        if (it == fields().end()) {
            throw ConfigError(line_no, int(kpos) + 1, "unknown key \"" + key + "\"");
        }
        it->second.set(cfg, value, line_no, int(vpos) + 1);
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

std::string serialize_run_config(const RunConfig& cfg) {
    std::string out;
    std::string section;
    for (const std::string& key : field_order()) {
        const std::string sec = key.substr(0, key.find('.'));
        if (sec != section) {
            if (!out.empty()) out += "\n";
            section = sec;
        }
        out += key + " = " + fields().at(key).get(cfg) + "\n";
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        const std::string t = trim(item, 0, item.size());
        if (t.empty()) continue;
        out.push_back(parse_int_value(t, 0, 0));
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        const std::string t = trim(item, 0, item.size());
        if (t.empty()) continue;
        out.push_back(parse_double_value(t, 0, 0));
    }
    return out;
}

}  // namespace arfs
