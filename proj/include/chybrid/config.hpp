#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "chybrid/error.hpp"

namespace chybrid {

// ─── Corpus ─────────────────────────────────────────────────────────────────

struct CorpusSpec {
    std::size_t num_utterances = 200;
    std::size_t num_dev_utterances = 20;
    std::size_t min_length = 100;
    std::size_t max_length = 400;
    std::size_t feature_dim = 40;
    std::size_t num_labels = 9001;
    double mean_scale = 1.0;          // stddev of per-label mean entries
    double noise = 1.0;               // stddev of per-frame noise
    double mean_segment_length = 5.0; // geometric state dwell
    std::uint64_t seed = 7;
};

// ─── Front-end ──────────────────────────────────────────────────────────────

enum class FrontendVariant { vgg, blstm_maxpool };
enum class DownsampleLayer { layer2, layer4 };

struct FrontendConfig {
    std::vector<std::size_t> conv_filters{32, 64, 64, 32};
    std::size_t kernel = 3;
    std::size_t downsample_factor = 3;
    DownsampleLayer downsample_layer = DownsampleLayer::layer4;
    FrontendVariant variant = FrontendVariant::vgg;
    std::size_t feature_pool_stride = 2;
    std::size_t blstm_units = 512;
};

// ─── Conformer stack ────────────────────────────────────────────────────────

struct BlockConfig {
    std::size_t model_dim = 512;
    std::size_t heads = 8;
    std::size_t ffn_dim = 2048;
    std::size_t depthwise_kernel = 8;
    std::size_t num_blocks = 12;
    double dropout = 0.1;
    double attention_dropout = 0.1;
    double embedding_dropout = 0.1;
    bool long_skip = true;
    std::size_t rel_pos_clamp = 64;
    double layer_norm_eps = 1e-5;
};

// ─── Output heads and losses ────────────────────────────────────────────────

struct HeadConfig {
    /// 1-based block indices carrying an intermediate loss. Empty means
    /// "auto": {L/3, 2L/3}, which is {4, 8} for L = 12.
    std::vector<std::size_t> intermediate_positions;
    std::size_t mlp_dim = 512;
    bool intermediate_loss = true;
    bool share_transposed_conv = true;
    bool share_mlp = false;
    bool focal_loss = true;
    double focal_gamma = 2.0;
    double intermediate_loss_scale = 0.3;
};

struct SpecAugmentConfig {
    bool enabled = true;
    std::size_t num_time_masks = 2;
    std::size_t max_time_mask_width = 15;
    std::size_t num_freq_masks = 2;
    std::size_t max_freq_mask_width = 8;
    double mask_value = 0.0;
};

struct OptimConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double warmup_start_lr = 0.0002;
    double warmup_peak_lr = 0.018;
    double warmup_epochs = 1.6;
    double newbob_decay = 0.9;
    double newbob_threshold = 1e-5;
    double weight_decay = 0.01;
    std::size_t epochs = 27;
    std::size_t frame_budget = 10000;
};

/// Every knob of a run. Defaults reproduce the baseline recipe.
struct RunConfig {
    CorpusSpec corpus;
    FrontendConfig frontend;
    BlockConfig blocks;
    HeadConfig heads;
    SpecAugmentConfig augment;
    OptimConfig optim;
    std::string corpus_path;
    std::string dev_corpus_path;  // empty: evaluate on the training corpus
    std::string out_dir = "run";
    std::uint64_t seed = 1;
    bool record_wall_time = true;

    std::size_t upsample_factor() const { return frontend.downsample_factor; }

    std::vector<std::size_t> resolved_intermediate_positions() const {
        if (!heads.intermediate_loss) return {};
        if (!heads.intermediate_positions.empty()) return heads.intermediate_positions;
        std::vector<std::size_t> out;
        const std::size_t L = blocks.num_blocks;
        for (std::size_t p : {L / 3, 2 * L / 3})
            if (p >= 1 && p < L && std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
        return out;
    }

    double effective_focal_gamma() const { return heads.focal_loss ? heads.focal_gamma : 0.0; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (corpus.min_length < 1 || corpus.min_length > corpus.max_length) fail("min_length must be in [1, max_length]");
        if (corpus.num_labels < 2) fail("num_labels must be >= 2");
        if (corpus.feature_dim < 1) fail("feature_dim must be >= 1");
        if (corpus.mean_segment_length < 1.0) fail("mean_segment_length must be >= 1");
        if (frontend.downsample_factor < 1) fail("downsample_factor must be >= 1");
        if (frontend.conv_filters.size() != 4) fail("conv_filters needs exactly 4 entries");
        for (auto f : frontend.conv_filters)
            if (f == 0) fail("conv_filters must be positive");
        if (frontend.kernel < 1) fail("frontend kernel must be >= 1");
        if (frontend.feature_pool_stride < 1) fail("feature_pool_stride must be >= 1");
        if (frontend.blstm_units < 1) fail("blstm_units must be >= 1");
        if (blocks.model_dim < 1 || blocks.heads < 1 || blocks.model_dim % blocks.heads != 0)
            fail("model_dim must be a positive multiple of heads");
        if (blocks.depthwise_kernel < 1) fail("depthwise_kernel must be >= 1");
        if (blocks.num_blocks < 1) fail("num_blocks must be >= 1");
        if (blocks.ffn_dim < 1) fail("ffn_dim must be >= 1");
        for (double p : {blocks.dropout, blocks.attention_dropout, blocks.embedding_dropout})
            if (p < 0.0 || p >= 1.0) fail("dropout rates must be in [0, 1)");
        for (auto p : heads.intermediate_positions)
            if (p < 1 || p >= blocks.num_blocks)
                fail("intermediate position " + std::to_string(p) + " must be in [1, num_blocks)");
        if (heads.mlp_dim < 1) fail("mlp_dim must be >= 1");
        if (heads.focal_gamma < 0.0) fail("focal_gamma must be >= 0");
        if (heads.intermediate_loss_scale < 0.0) fail("intermediate_loss_scale must be >= 0");
        if (!(optim.newbob_decay > 0.0 && optim.newbob_decay < 1.0)) fail("newbob_decay must be in (0, 1)");
        if (!(optim.warmup_start_lr < optim.warmup_peak_lr) && optim.warmup_epochs > 0.0)
            fail("warmup_start_lr must be below warmup_peak_lr");
        if (optim.warmup_epochs < 0.0) fail("warmup_epochs must be >= 0");
        if (optim.weight_decay < 0.0) fail("weight_decay must be >= 0");
        if (optim.frame_budget < 1) fail("frame_budget must be >= 1");
    }
};

// ─── key = value text format ────────────────────────────────────────────────

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        const auto x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
    return out;
}

inline std::string format_double(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

inline std::string format_list(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

struct ConfigKey {
    std::string section;
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define CHYBRID_SIZE_KEY(sec, name, field)                                                         \
    ConfigKey{sec, name, [](const RunConfig& c) { return std::to_string(c.field); },              \
              [](RunConfig& c, const std::string& v) { c.field = parse_size(name, v); }}
#define CHYBRID_DOUBLE_KEY(sec, name, field)                                                       \
    ConfigKey{sec, name, [](const RunConfig& c) { return format_double(c.field); },               \
              [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); }}
#define CHYBRID_BOOL_KEY(sec, name, field)                                                         \
    ConfigKey{sec, name, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, \
              [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }}
#define CHYBRID_STRING_KEY(sec, name, field)                                                       \
    ConfigKey{sec, name, [](const RunConfig& c) { return c.field; },                               \
              [](RunConfig& c, const std::string& v) { c.field = v; }}

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        CHYBRID_SIZE_KEY("corpus", "num_utterances", corpus.num_utterances),
        CHYBRID_SIZE_KEY("corpus", "num_dev_utterances", corpus.num_dev_utterances),
        CHYBRID_SIZE_KEY("corpus", "min_length", corpus.min_length),
        CHYBRID_SIZE_KEY("corpus", "max_length", corpus.max_length),
        CHYBRID_SIZE_KEY("corpus", "feature_dim", corpus.feature_dim),
        CHYBRID_SIZE_KEY("corpus", "num_labels", corpus.num_labels),
        CHYBRID_DOUBLE_KEY("corpus", "mean_scale", corpus.mean_scale),
        CHYBRID_DOUBLE_KEY("corpus", "noise", corpus.noise),
        CHYBRID_DOUBLE_KEY("corpus", "mean_segment_length", corpus.mean_segment_length),
        CHYBRID_SIZE_KEY("corpus", "corpus_seed", corpus.seed),
        ConfigKey{"frontend", "conv_filters", [](const RunConfig& c) { return format_list(c.frontend.conv_filters); },
                  [](RunConfig& c, const std::string& v) { c.frontend.conv_filters = parse_list("conv_filters", v); }},
        CHYBRID_SIZE_KEY("frontend", "conv_kernel", frontend.kernel),
        CHYBRID_SIZE_KEY("frontend", "downsample_factor", frontend.downsample_factor),
        ConfigKey{"frontend", "downsample_layer",
                  [](const RunConfig& c) {
                      return std::string(c.frontend.downsample_layer == DownsampleLayer::layer2 ? "layer2" : "layer4");
                  },
                  [](RunConfig& c, const std::string& v) {
                      if (v == "layer2") c.frontend.downsample_layer = DownsampleLayer::layer2;
                      else if (v == "layer4") c.frontend.downsample_layer = DownsampleLayer::layer4;
                      else throw ConfigError("downsample_layer must be layer2 or layer4, got '" + v + "'");
                  }},
        ConfigKey{"frontend", "frontend_variant",
                  [](const RunConfig& c) {
                      return std::string(c.frontend.variant == FrontendVariant::vgg ? "vgg" : "blstm_maxpool");
                  },
                  [](RunConfig& c, const std::string& v) {
                      if (v == "vgg") c.frontend.variant = FrontendVariant::vgg;
                      else if (v == "blstm_maxpool") c.frontend.variant = FrontendVariant::blstm_maxpool;
                      else throw ConfigError("frontend_variant must be vgg or blstm_maxpool, got '" + v + "'");
                  }},
        CHYBRID_SIZE_KEY("frontend", "feature_pool_stride", frontend.feature_pool_stride),
        CHYBRID_SIZE_KEY("frontend", "blstm_units", frontend.blstm_units),
        CHYBRID_SIZE_KEY("blocks", "model_dim", blocks.model_dim),
        CHYBRID_SIZE_KEY("blocks", "heads", blocks.heads),
        CHYBRID_SIZE_KEY("blocks", "ffn_dim", blocks.ffn_dim),
        CHYBRID_SIZE_KEY("blocks", "depthwise_kernel", blocks.depthwise_kernel),
        CHYBRID_SIZE_KEY("blocks", "num_blocks", blocks.num_blocks),
        CHYBRID_DOUBLE_KEY("blocks", "dropout", blocks.dropout),
        CHYBRID_DOUBLE_KEY("blocks", "attention_dropout", blocks.attention_dropout),
        CHYBRID_DOUBLE_KEY("blocks", "embedding_dropout", blocks.embedding_dropout),
        CHYBRID_BOOL_KEY("blocks", "long_skip", blocks.long_skip),
        CHYBRID_SIZE_KEY("blocks", "rel_pos_clamp", blocks.rel_pos_clamp),
        CHYBRID_DOUBLE_KEY("blocks", "layer_norm_eps", blocks.layer_norm_eps),
        ConfigKey{"heads", "intermediate_positions",
                  [](const RunConfig& c) {
                      return c.heads.intermediate_positions.empty() ? std::string("auto")
                                                                    : format_list(c.heads.intermediate_positions);
                  },
                  [](RunConfig& c, const std::string& v) {
                      c.heads.intermediate_positions =
                          v == "auto" ? std::vector<std::size_t>{} : parse_list("intermediate_positions", v);
                  }},
        CHYBRID_SIZE_KEY("heads", "mlp_dim", heads.mlp_dim),
        CHYBRID_BOOL_KEY("heads", "intermediate_loss", heads.intermediate_loss),
        CHYBRID_BOOL_KEY("heads", "share_transposed_conv", heads.share_transposed_conv),
        CHYBRID_BOOL_KEY("heads", "share_mlp", heads.share_mlp),
        CHYBRID_BOOL_KEY("heads", "focal_loss", heads.focal_loss),
        CHYBRID_DOUBLE_KEY("heads", "focal_gamma", heads.focal_gamma),
        CHYBRID_DOUBLE_KEY("heads", "intermediate_loss_scale", heads.intermediate_loss_scale),
        CHYBRID_BOOL_KEY("augment", "specaugment", augment.enabled),
        CHYBRID_SIZE_KEY("augment", "num_time_masks", augment.num_time_masks),
        CHYBRID_SIZE_KEY("augment", "max_time_mask_width", augment.max_time_mask_width),
        CHYBRID_SIZE_KEY("augment", "num_freq_masks", augment.num_freq_masks),
        CHYBRID_SIZE_KEY("augment", "max_freq_mask_width", augment.max_freq_mask_width),
        CHYBRID_DOUBLE_KEY("augment", "mask_value", augment.mask_value),
        CHYBRID_DOUBLE_KEY("optim", "beta1", optim.beta1),
        CHYBRID_DOUBLE_KEY("optim", "beta2", optim.beta2),
        CHYBRID_DOUBLE_KEY("optim", "epsilon", optim.epsilon),
        CHYBRID_DOUBLE_KEY("optim", "warmup_start_lr", optim.warmup_start_lr),
        CHYBRID_DOUBLE_KEY("optim", "warmup_peak_lr", optim.warmup_peak_lr),
        CHYBRID_DOUBLE_KEY("optim", "warmup_epochs", optim.warmup_epochs),
        CHYBRID_DOUBLE_KEY("optim", "newbob_decay", optim.newbob_decay),
        CHYBRID_DOUBLE_KEY("optim", "newbob_threshold", optim.newbob_threshold),
        CHYBRID_DOUBLE_KEY("optim", "weight_decay", optim.weight_decay),
        CHYBRID_SIZE_KEY("optim", "epochs", optim.epochs),
        CHYBRID_SIZE_KEY("optim", "frame_budget", optim.frame_budget),
        CHYBRID_STRING_KEY("run", "corpus_path", corpus_path),
        CHYBRID_STRING_KEY("run", "dev_corpus_path", dev_corpus_path),
        CHYBRID_STRING_KEY("run", "out_dir", out_dir),
        CHYBRID_SIZE_KEY("run", "seed", seed),
        CHYBRID_BOOL_KEY("run", "record_wall_time", record_wall_time),
    };
    return keys;
}

#undef CHYBRID_SIZE_KEY
#undef CHYBRID_DOUBLE_KEY
#undef CHYBRID_BOOL_KEY
#undef CHYBRID_STRING_KEY

inline const ConfigKey& find_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (k.name == name) return k;
    throw ConfigError("unknown config key '" + name + "'");
}

}  // namespace detail

/// Applies one `key=value` (or `section.key=value`) override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    std::string key = detail::trim(assignment.substr(0, eq));
    const std::string value = detail::trim(assignment.substr(eq + 1));
    if (const auto dot = key.find('.'); dot != std::string::npos) {
        const std::string section = key.substr(0, dot);
        key = key.substr(dot + 1);
        if (detail::find_key(key).section != section)
            throw ConfigError("key '" + key + "' does not belong to section [" + section + "]");
    }
    detail::find_key(key).set(cfg, value);
}

/// Parses the sectioned key=value format. Keys must appear under their own
/// section (or before any section header); unknown keys are errors.
inline RunConfig parse_config(const std::string& text, RunConfig cfg = {}) {
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const auto& k = detail::find_key(key);
        if (!section.empty() && k.section != section)
            throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' belongs to [" + k.section +
                              "], not [" + section + "]");
        k.set(cfg, detail::trim(line.substr(eq + 1)));
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// Fully resolved config in the same format; parse_config(to_text(c)) == c.
inline std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream os;
    std::string section;
    for (const auto& k : detail::config_keys()) {
        if (k.section != section) {
            if (!section.empty()) os << "\n";
            section = k.section;
            os << "[" << section << "]\n";
        }
        os << k.name << " = " << k.get(cfg) << "\n";
    }
    return os.str();
}

}  // namespace chybrid
