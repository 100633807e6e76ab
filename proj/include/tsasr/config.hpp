#pragma once

// Flat key=value config with [section] headers. Every key is declared in the
// registry below with its default; unknown sections or keys are rejected with
// the offending name. CLI flag overrides are applied through the same setter
// path, so flags win over file values.

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tsasr/decoding.hpp"
#include "tsasr/model.hpp"
#include "tsasr/synthdata.hpp"
#include "tsasr/training.hpp"

namespace tsasr {

struct MetricsOptions {
    double collar = 5.0;
    bool normalize = false;
    bool utterance_groups = false;  // documented stub, rejected when enabled
};

struct RunConfig {
    ModelConfig model = default_model_config();
    TrainConfig train;
    SynthConfig data;
    BeamSearchConfig decode;
    MetricsOptions metrics;
    std::string train_phases = "full";  // comma-separated run list for the train command
    uint64_t seed = 1;
    int threads = 1;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

template <typename T>
T parse_num(const std::string& v, const std::string& key) {
    std::istringstream is(v);
    T out;
    is >> out;
    if (is.fail() || !is.eof()) throw ConfigError("config: key '" + key + "' has invalid value '" + v + "'");
    return out;
}

}  // namespace detail

class ConfigRegistry {
  public:
    using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

    explicit ConfigRegistry() { install(); }

    void apply(RunConfig& cfg, const std::string& dotted_key, const std::string& value) const {
        auto it = setters_.find(dotted_key);
        if (it == setters_.end()) throw ConfigError("config: unknown key '" + dotted_key + "'");
        it->second(cfg, dotted_key, value);
    }

    std::vector<std::string> keys() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : setters_) out.push_back(k);
        return out;
    }

  private:
    void add_int(const std::string& key, std::function<int&(RunConfig&)> field) {
        setters_[key] = [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = detail::parse_num<int>(v, k);
        };
    }
    void add_double(const std::string& key, std::function<double&(RunConfig&)> field) {
        setters_[key] = [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = detail::parse_num<double>(v, k);
        };
    }
    void add_bool(const std::string& key, std::function<bool&(RunConfig&)> field) {
        setters_[key] = [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = detail::parse_bool(v, k);
        };
    }
    void add_string(const std::string& key, std::function<std::string&(RunConfig&)> field) {
        setters_[key] = [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = v; };
    }
    void add_u64(const std::string& key, std::function<uint64_t&(RunConfig&)> field) {
        setters_[key] = [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = detail::parse_num<uint64_t>(v, k);
        };
    }

    void install() {
        add_int("model.d_m", [](RunConfig& c) -> int& { return c.model.d_m; });
        add_int("model.enc_layers", [](RunConfig& c) -> int& { return c.model.enc_layers; });
        add_int("model.dec_layers", [](RunConfig& c) -> int& { return c.model.dec_layers; });
        add_int("model.heads", [](RunConfig& c) -> int& { return c.model.heads; });
        add_int("model.feat_dim", [](RunConfig& c) -> int& { return c.model.feat_dim; });
        add_int("model.mlp_mult", [](RunConfig& c) -> int& { return c.model.mlp_mult; });
        add_double("model.feature_fps", [](RunConfig& c) -> double& { return c.model.feature_fps; });
        add_double("model.window_seconds", [](RunConfig& c) -> double& { return c.model.window_seconds; });
        add_int("model.max_decode_len", [](RunConfig& c) -> int& { return c.model.max_decode_len; });

        add_string("conditioning.conditioning", [](RunConfig& c) -> std::string& { return c.model.conditioning; });
        add_bool("conditioning.co_attention", [](RunConfig& c) -> bool& { return c.model.co_attention; });
        add_double("conditioning.qkb_c", [](RunConfig& c) -> double& { return c.model.qkb.c; });
        add_bool("conditioning.qkb_encoder_self",
                 [](RunConfig& c) -> bool& { return c.model.qkb.apply_in_encoder_self_attention; });
        add_bool("conditioning.qkb_decoder_cross",
                 [](RunConfig& c) -> bool& { return c.model.qkb.apply_in_decoder_cross_attention; });
        add_bool("conditioning.qkb_shift_positions",
                 [](RunConfig& c) -> bool& { return c.model.qkb.shift_positions; });

        add_int("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
        add_int("train.max_steps", [](RunConfig& c) -> int& { return c.train.max_steps; });
        add_int("train.warmup_steps", [](RunConfig& c) -> int& { return c.train.warmup_steps; });
        add_double("train.peak_lr", [](RunConfig& c) -> double& { return c.train.peak_lr; });
        add_double("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
        add_double("train.ctc_weight", [](RunConfig& c) -> double& { return c.train.ctc_weight; });
        add_double("train.fddt_lr_multiplier", [](RunConfig& c) -> double& { return c.train.fddt_lr_multiplier; });
        add_double("train.grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
        add_int("train.eval_every", [](RunConfig& c) -> int& { return c.train.eval_every; });
        add_int("train.patience", [](RunConfig& c) -> int& { return c.train.patience; });
        add_string("train.phases", [](RunConfig& c) -> std::string& { return c.train_phases; });
        add_double("train.empty_target_fraction",
                   [](RunConfig& c) -> double& { return c.train.empty_target_fraction; });
        add_string("train.mask_mode", [](RunConfig& c) -> std::string& { return c.train.mask_mode; });
        add_int("train.dev_decode_cap", [](RunConfig& c) -> int& { return c.train.dev_decode_cap; });
        add_double("train.dev_collar", [](RunConfig& c) -> double& { return c.train.dev_collar; });

        add_double("decode.lambda", [](RunConfig& c) -> double& { return c.decode.lambda; });
        add_int("decode.beam", [](RunConfig& c) -> int& { return c.decode.beam; });
        add_int("decode.candidate_n", [](RunConfig& c) -> int& { return c.decode.candidate_n; });
        add_int("decode.max_len", [](RunConfig& c) -> int& { return c.decode.max_len; });

        add_int("data.num_recordings", [](RunConfig& c) -> int& { return c.data.num_recordings; });
        add_int("data.speakers_min", [](RunConfig& c) -> int& { return c.data.speakers_min; });
        add_int("data.speakers_max", [](RunConfig& c) -> int& { return c.data.speakers_max; });
        add_double("data.overlap_target", [](RunConfig& c) -> double& { return c.data.overlap_target; });
        add_int("data.feat_dim", [](RunConfig& c) -> int& { return c.data.feat_dim; });
        add_double("data.frame_rate", [](RunConfig& c) -> double& { return c.data.frame_rate; });
        add_int("data.frames_per_char", [](RunConfig& c) -> int& { return c.data.frames_per_char; });
        add_int("data.voice_pool", [](RunConfig& c) -> int& { return c.data.voice_pool; });
        add_int("data.words_min", [](RunConfig& c) -> int& { return c.data.words_min; });
        add_int("data.words_max", [](RunConfig& c) -> int& { return c.data.words_max; });
        add_int("data.word_len_min", [](RunConfig& c) -> int& { return c.data.word_len_min; });
        add_int("data.word_len_max", [](RunConfig& c) -> int& { return c.data.word_len_max; });
        add_int("data.utt_per_speaker_min", [](RunConfig& c) -> int& { return c.data.utt_per_speaker_min; });
        add_int("data.utt_per_speaker_max", [](RunConfig& c) -> int& { return c.data.utt_per_speaker_max; });
        add_double("data.train_fraction", [](RunConfig& c) -> double& { return c.data.train_fraction; });
        add_double("data.dev_fraction", [](RunConfig& c) -> double& { return c.data.dev_fraction; });
        add_bool("data.case_simulation", [](RunConfig& c) -> bool& { return c.data.case_simulation; });

        add_double("metrics.collar", [](RunConfig& c) -> double& { return c.metrics.collar; });
        add_bool("metrics.normalize", [](RunConfig& c) -> bool& { return c.metrics.normalize; });
        add_bool("metrics.utterance_groups", [](RunConfig& c) -> bool& { return c.metrics.utterance_groups; });

        add_u64("global.seed", [](RunConfig& c) -> uint64_t& { return c.seed; });
        add_int("global.threads", [](RunConfig& c) -> int& { return c.threads; });
    }

    std::map<std::string, Setter> setters_;
};

inline void apply_config_text(RunConfig& cfg, const std::string& text, const ConfigRegistry& registry) {
    std::istringstream is(text);
    std::string line, section = "global";
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const size_t comment = line.find_first_of("#;");
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config: malformed section at line " + std::to_string(line_no));
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key=value at line " + std::to_string(line_no));
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        registry.apply(cfg, section + "." + key, value);
    }
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    ConfigRegistry registry;
    RunConfig cfg;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is.good()) throw ConfigError("config: cannot open " + path);
        std::stringstream buf;
        buf << is.rdbuf();
        apply_config_text(cfg, buf.str(), registry);
    }
    for (const std::string& ov : overrides) {
        const size_t eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError("config: override '" + ov + "' is not key=value");
        registry.apply(cfg, detail::trim(ov.substr(0, eq)), detail::trim(ov.substr(eq + 1)));
    }
    return cfg;
}

// seed fan-out: one user-facing seed drives corpus and training
inline void propagate_seed(RunConfig& cfg) {
    cfg.data.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    cfg.train.threads = cfg.threads;
}

}  // namespace tsasr
