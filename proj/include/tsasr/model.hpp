#pragma once

// Toy attention encoder-decoder with a CTC head and the conditioning hooks:
// input masking ahead of the convolutional front end, FDDT before every
// encoder layer input, and query-key biasing inside encoder self-attention
// and decoder cross-attention (with optionally shifted positional
// embeddings).

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsasr/autodiff.hpp"
#include "tsasr/checkpoint.hpp"
#include "tsasr/conditioning.hpp"
#include "tsasr/diarization.hpp"
#include "tsasr/vocab.hpp"

namespace tsasr {

struct ModelConfig {
    int d_m = 64;
    int enc_layers = 2;
    int dec_layers = 2;
    int heads = 4;
    int feat_dim = 16;
    int mlp_mult = 2;
    double feature_fps = 50.0;
    double window_seconds = 30.0;
    int max_decode_len = 96;
    std::string conditioning = "fddt";  // none | input_mask | qkb | fddt
    bool co_attention = false;
    QkbConfig qkb;

    // vocabulary facts; timestamps occupy one contiguous id range
    int vocab_size = 0;
    int ts_begin = 0;
    int ts_count = 0;

    double encoder_fps() const { return feature_fps / 2.0; }
    int max_feature_frames() const { return static_cast<int>(window_seconds * feature_fps); }

    void validate() const {
        require(d_m > 0 && heads > 0 && d_m % heads == 0, "ModelConfig: heads must divide d_m");
        require(enc_layers >= 1 && dec_layers >= 1, "ModelConfig: need at least one layer each");
        require(vocab_size >= 4, "ModelConfig: vocabulary too small");
        require(ts_begin > 0 && ts_count > 0 && ts_begin + ts_count == vocab_size,
                "ModelConfig: timestamp tokens must form the trailing contiguous range");
        require(conditioning == "none" || conditioning == "input_mask" || conditioning == "qkb" ||
                    conditioning == "fddt",
                "ModelConfig: unknown conditioning mode '" + conditioning + "'");
        if (co_attention) require(d_m % 4 == 0 && (d_m / 2) % heads == 0 && (d_m / 4) % heads == 0,
                                  "ModelConfig: co-attention dims must be divisible by heads");
        qkb.validate();
    }

    bool use_fddt() const { return conditioning == "fddt"; }
    bool use_qkb() const { return conditioning == "qkb"; }
    bool use_input_mask() const { return conditioning == "input_mask"; }
    bool qkb_encoder() const { return use_qkb() && qkb.apply_in_encoder_self_attention; }
    bool qkb_cross() const { return use_qkb() && qkb.apply_in_decoder_cross_attention; }

    nlohmann::json to_json() const {
        return {{"d_m", d_m},
                {"enc_layers", enc_layers},
                {"dec_layers", dec_layers},
                {"heads", heads},
                {"feat_dim", feat_dim},
                {"mlp_mult", mlp_mult},
                {"feature_fps", feature_fps},
                {"window_seconds", window_seconds},
                {"max_decode_len", max_decode_len},
                {"conditioning", conditioning},
                {"co_attention", co_attention},
                {"qkb_c", qkb.c},
                {"qkb_encoder_self", qkb.apply_in_encoder_self_attention},
                {"qkb_decoder_cross", qkb.apply_in_decoder_cross_attention},
                {"qkb_shift_positions", qkb.shift_positions},
                {"vocab_size", vocab_size},
                {"ts_begin", ts_begin},
                {"ts_count", ts_count}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.d_m = j.at("d_m");
        c.enc_layers = j.at("enc_layers");
        c.dec_layers = j.at("dec_layers");
        c.heads = j.at("heads");
        c.feat_dim = j.at("feat_dim");
        c.mlp_mult = j.at("mlp_mult");
        c.feature_fps = j.at("feature_fps");
        c.window_seconds = j.at("window_seconds");
        c.max_decode_len = j.at("max_decode_len");
        c.conditioning = j.at("conditioning");
        c.co_attention = j.at("co_attention");
        c.qkb.c = j.at("qkb_c");
        c.qkb.apply_in_encoder_self_attention = j.at("qkb_encoder_self");
        c.qkb.apply_in_decoder_cross_attention = j.at("qkb_decoder_cross");
        c.qkb.shift_positions = j.at("qkb_shift_positions");
        c.vocab_size = j.at("vocab_size");
        c.ts_begin = j.at("ts_begin");
        c.ts_count = j.at("ts_count");
        return c;
    }
};

inline ModelConfig default_model_config(const Vocab& vocab = Vocab{}) {
    ModelConfig c;
    c.vocab_size = vocab.size();
    c.ts_begin = vocab.ts_begin();
    c.ts_count = vocab.ts_count();
    return c;
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

inline bool is_ctc_param(const std::string& name) { return name.rfind("ctc.", 0) == 0; }
inline bool is_fddt_param(const std::string& name) { return name.rfind("fddt.", 0) == 0; }

namespace detail {

// Xavier-style scale for a [rows x cols] projection.
inline double glorot_std(int rows, int cols) { return std::sqrt(2.0 / (rows + cols)); }

inline Tensor glorot(std::mt19937_64& rng, int rows, int cols) {
    return Tensor::randn({rows, cols}, rng, glorot_std(rows, cols));
}

inline void init_attn(ParamStore& p, std::mt19937_64& rng, const std::string& prefix, int d_m, bool extend) {
    Tensor wq = glorot(rng, d_m, d_m);
    Tensor bq = Tensor::zeros({d_m});
    Tensor wk = glorot(rng, d_m, d_m);
    Tensor wv = glorot(rng, d_m, d_m);
    Tensor wo = glorot(rng, d_m, d_m);
    if (extend) {
        wq = extend_projection(wq);
        wk = extend_projection(wk);
        bq = extend_bias(bq);
    }
    p.add(prefix + ".wq", std::move(wq));
    p.add(prefix + ".bq", std::move(bq));
    p.add(prefix + ".wk", std::move(wk));
    p.add(prefix + ".wv", std::move(wv));
    p.add(prefix + ".bv", Tensor::zeros({d_m}));
    p.add(prefix + ".wo", std::move(wo));
    p.add(prefix + ".bo", Tensor::zeros({d_m}));
}

inline void init_ln(ParamStore& p, const std::string& prefix, int d) {
    p.add(prefix + ".g", Tensor::full({d}, 1.0));
    p.add(prefix + ".b", Tensor::zeros({d}));
}

inline void init_mlp(ParamStore& p, std::mt19937_64& rng, const std::string& prefix, int d_m, int mult) {
    p.add(prefix + ".w1", glorot(rng, mult * d_m, d_m));
    p.add(prefix + ".b1", Tensor::zeros({mult * d_m}));
    p.add(prefix + ".w2", glorot(rng, d_m, mult * d_m));
    p.add(prefix + ".b2", Tensor::zeros({d_m}));
}

}  // namespace detail

// Base weights are drawn in a fixed order independent of the conditioning
// mode, so two configs sharing a seed share every unextended weight.
inline ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    ParamStore p;
    const int d = cfg.d_m, V = cfg.vocab_size;

    // encoder
    p.add("enc.conv.w", detail::glorot(rng, d, 3 * cfg.feat_dim));
    p.add("enc.conv.b", Tensor::zeros({d}));
    for (int l = 0; l < cfg.enc_layers; ++l) {
        const std::string base = "enc.l" + std::to_string(l);
        detail::init_ln(p, base + ".ln1", d);
        detail::init_attn(p, rng, base + ".attn", d, cfg.qkb_encoder());
        detail::init_ln(p, base + ".ln2", d);
        detail::init_mlp(p, rng, base + ".mlp", d, cfg.mlp_mult);
    }
    detail::init_ln(p, "enc.ln_post", d);

    // decoder
    p.add("dec.embed", detail::glorot(rng, V, d));
    for (int l = 0; l < cfg.dec_layers; ++l) {
        const std::string base = "dec.l" + std::to_string(l);
        detail::init_ln(p, base + ".ln1", d);
        detail::init_attn(p, rng, base + ".self", d, false);
        detail::init_ln(p, base + ".lnx", d);
        detail::init_attn(p, rng, base + ".cross", d, cfg.qkb_cross());
        detail::init_ln(p, base + ".ln2", d);
        detail::init_mlp(p, rng, base + ".mlp", d, cfg.mlp_mult);
    }
    detail::init_ln(p, "dec.ln_post", d);
    p.add("dec.out.w", detail::glorot(rng, V, d));
    p.add("dec.out.b", Tensor::zeros({V}));

    // ctc head: one attention layer, two stride-2 convs, linear to V
    detail::init_ln(p, "ctc.ln1", d);
    detail::init_attn(p, rng, "ctc.attn", d, false);
    detail::init_ln(p, "ctc.ln2", d);
    detail::init_mlp(p, rng, "ctc.mlp", d, cfg.mlp_mult);
    p.add("ctc.conv1.w", detail::glorot(rng, d, 3 * d));
    p.add("ctc.conv1.b", Tensor::zeros({d}));
    p.add("ctc.conv2.w", detail::glorot(rng, d, 3 * d));
    p.add("ctc.conv2.b", Tensor::zeros({d}));
    p.add("ctc.out.w", detail::glorot(rng, V, d));
    p.add("ctc.out.b", Tensor::zeros({V}));

    // co-attention (summary dim d/4, per-speaker dim d/2, zero-init fusion)
    if (cfg.co_attention) {
        const int dp = d / 2, dh = d / 4, hh = cfg.heads;
        p.add("coatt.wa", detail::glorot(rng, dh, d));
        detail::init_ln(p, "coatt.ln_a", dh);
        p.add("coatt.wm", detail::glorot(rng, dp, d));
        detail::init_ln(p, "coatt.ln_m", dp);
        for (int h = 0; h < hh; ++h) {
            p.add("coatt.qk.q.h" + std::to_string(h), detail::glorot(rng, dp / hh, dp));
            p.add("coatt.qk.k.h" + std::to_string(h), detail::glorot(rng, dp / hh, dp));
        }
        for (int h = 0; h < hh; ++h) p.add("coatt.th.v.h" + std::to_string(h), detail::glorot(rng, dp / hh, dp));
        p.add("coatt.th.wo", detail::glorot(rng, dp, dp));
        for (int h = 0; h < hh; ++h) p.add("coatt.xi.v.h" + std::to_string(h), detail::glorot(rng, dh / hh, dh));
        p.add("coatt.xi.wo", detail::glorot(rng, dh, dh));
        for (int h = 0; h < hh; ++h) {
            p.add("coatt.om.q.h" + std::to_string(h), detail::glorot(rng, dh / hh, dh));
            p.add("coatt.om.k.h" + std::to_string(h), detail::glorot(rng, dh / hh, dh));
            p.add("coatt.om.v.h" + std::to_string(h), detail::glorot(rng, dh / hh, dh));
        }
        p.add("coatt.om.wo", detail::glorot(rng, dh, dh));
        detail::init_ln(p, "coatt.ln_ms", dp);
        detail::init_ln(p, "coatt.ln_ap", dh);
        detail::init_ln(p, "coatt.ln_abar", dh);
        p.add("coatt.wf", Tensor::zeros({d, dp + dh}));
    }

    // fddt transforms, suppressive by default
    if (cfg.use_fddt()) {
        FddtParams fddt = fddt_init(cfg.enc_layers, d, FddtInitMode::kSuppressive);
        for (int l = 0; l < cfg.enc_layers; ++l)
            for (int k = 0; k < 4; ++k) {
                const std::string base = "fddt.l" + std::to_string(l) + "." + stno_class_name(static_cast<StnoClass>(k));
                p.add(base + ".w", fddt.layers[static_cast<size_t>(l)].w[static_cast<size_t>(k)]);
                p.add(base + ".b", fddt.layers[static_cast<size_t>(l)].b[static_cast<size_t>(k)]);
            }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Tape binding
// ---------------------------------------------------------------------------

struct Bound {
    GradTape* tape = nullptr;
    std::map<std::string, Var> vars;

    Var operator()(const std::string& name) const {
        auto it = vars.find(name);
        require(it != vars.end(), "Bound: unknown parameter " + name);
        return it->second;
    }
};

// Parameters outside the trainable set are bound as constants, which both
// freezes them and skips their backward work.
inline Bound bind_params(GradTape& tape, const ParamStore& store,
                         const std::function<bool(const std::string&)>& trainable = nullptr) {
    Bound b;
    b.tape = &tape;
    for (const auto& [name, value] : store.items()) {
        const bool train = trainable ? trainable(name) : true;
        b.vars[name] = train ? tape.parameter(name, value) : tape.constant(value);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Attention / blocks
// ---------------------------------------------------------------------------

struct EncoderTrace {
    // per layer, per head: unscaled score matrices q_hat . k_hat^T
    std::vector<std::vector<Tensor>> raw_scores;
};

namespace detail {

inline Tensor causal_mask(int n) {
    Tensor m({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m.at(i, j) = kNegInf;
    return m;
}

struct AttnVars {
    Var wq, bq, wk, wv, bv, wo, bo;
    bool extended = false;
};

inline AttnVars attn_vars(const Bound& b, const std::string& prefix, bool extended) {
    return {b(prefix + ".wq"), b(prefix + ".bq"), b(prefix + ".wk"), b(prefix + ".wv"),
            b(prefix + ".bv"), b(prefix + ".wo"), b(prefix + ".bo"), extended};
}

// Multi-head attention; per-head width d_m/heads. With extended projections
// the appended query coordinate is the constant 1 and the appended key
// coordinate carries the per-frame bias (0 target / -c otherwise); the score
// scale stays sqrt(d_m/heads) so target-frame scores are unchanged.
inline Var mha(const ModelConfig& cfg, const AttnVars& a, Var x_q, Var x_kv, bool causal,
               const Tensor* key_bias = nullptr, std::vector<Tensor>* raw_score_sink = nullptr) {
    GradTape& t = *x_q.tape;
    const int d = cfg.d_m, H = cfg.heads, dh = d / H;

    Var q_in = x_q, k_in = x_kv;
    if (a.extended) {
        q_in = append_const_col(x_q, 1.0);
        k_in = key_bias != nullptr ? append_col(x_kv, *key_bias) : append_const_col(x_kv, 0.0);
    }
    Var q = add_rowvec(matmul_nt(q_in, a.wq), a.bq);
    Var k = matmul_nt(k_in, a.wk);
    Var v = add_rowvec(matmul_nt(x_kv, a.wv), a.bv);

    Tensor mask;
    if (causal) mask = causal_mask(q.value().shape[0]);

    Var out{-1, nullptr};
    for (int h = 0; h < H; ++h) {
        Var qh = slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = slice_cols(k, h * dh, (h + 1) * dh);
        if (a.extended) {
            qh = concat_cols(qh, slice_cols(q, d, d + 1));
            kh = concat_cols(kh, slice_cols(k, d, d + 1));
        }
        Var scores = matmul_nt(qh, kh);
        if (raw_score_sink != nullptr) raw_score_sink->push_back(scores.value());
        scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
        if (causal) scores = add(scores, t.constant(mask));
        Var oh = matmul(softmax_rows(scores), slice_cols(v, h * dh, (h + 1) * dh));
        out = out.valid() ? concat_cols(out, oh) : oh;
    }
    return add_rowvec(matmul_nt(out, a.wo), a.bo);
}

inline Var layer_norm(const Bound& b, const std::string& prefix, Var x) {
    return layer_norm_rows(x, b(prefix + ".g"), b(prefix + ".b"));
}

inline Var mlp_block(const Bound& b, const std::string& prefix, Var x) {
    Var y = gelu(add_rowvec(matmul_nt(x, b(prefix + ".w1")), b(prefix + ".b1")));
    return add_rowvec(matmul_nt(y, b(prefix + ".w2")), b(prefix + ".b2"));
}

inline Var conv_subsample(const Bound& b, const std::string& prefix, Var x) {
    Var patches = unfold1d(x, 3, 2, 1);
    return gelu(add_rowvec(matmul_nt(patches, b(prefix + ".w")), b(prefix + ".b")));
}

inline std::array<Var, 4> fddt_w(const Bound& b, int layer) {
    std::array<Var, 4> w;
    for (int k = 0; k < 4; ++k)
        w[static_cast<size_t>(k)] = b("fddt.l" + std::to_string(layer) + "." +
                                      stno_class_name(static_cast<StnoClass>(k)) + ".w");
    return w;
}

inline std::array<Var, 4> fddt_b(const Bound& b, int layer) {
    std::array<Var, 4> w;
    for (int k = 0; k < 4; ++k)
        w[static_cast<size_t>(k)] = b("fddt.l" + std::to_string(layer) + "." +
                                      stno_class_name(static_cast<StnoClass>(k)) + ".b");
    return w;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

struct ConditioningInput {
    const StnoMask* feature_mask = nullptr;  // at the feature frame rate (T frames)
    const StnoMask* encoder_mask = nullptr;  // at the encoder frame rate (T/2 frames)
};

// Convolutional subsampling (stride 2), positional embeddings (shifted when
// QKb requests it), then attention blocks with FDDT applied before every
// layer input.
inline Var encoder_forward(const ModelConfig& cfg, const Bound& b, Var features, const ConditioningInput& cond,
                           EncoderTrace* trace = nullptr) {
    GradTape& tape = *features.tape;
    const int t_in = features.value().shape[0];
    require_dim(features.value().shape[1] == cfg.feat_dim, "encoder: feature dim mismatch");
    require_dim(t_in % 2 == 0, "encoder: frame count must be even");
    const int t_enc = t_in / 2;

    Var x = features;
    if (cfg.use_input_mask()) {
        require_dim(cond.feature_mask != nullptr && cond.feature_mask->num_frames() == t_in,
                    "encoder: input_mask needs a feature-rate mask");
        x = input_mask(x, *cond.feature_mask);
    }
    const bool needs_enc_mask = cfg.use_fddt() || cfg.use_qkb();
    if (needs_enc_mask)
        require_dim(cond.encoder_mask != nullptr && cond.encoder_mask->num_frames() == t_enc,
                    "encoder: conditioning needs an encoder-rate mask");

    x = detail::conv_subsample(b, "enc.conv", x);

    std::vector<int> positions(static_cast<size_t>(t_enc));
    if (cfg.use_qkb() && cfg.qkb.shift_positions) {
        const std::vector<int> shifted = shifted_positions(qkb_target_flags(*cond.encoder_mask));
        for (int i = 0; i < t_enc; ++i) positions[static_cast<size_t>(i)] = shifted[static_cast<size_t>(i)] - 1;
    } else {
        for (int i = 0; i < t_enc; ++i) positions[static_cast<size_t>(i)] = i;
    }
    x = add(x, tape.constant(sinusoid_positions(positions, cfg.d_m)));

    Tensor key_bias;
    if (cfg.qkb_encoder()) key_bias = qkb_bias_vector(*cond.encoder_mask, cfg.qkb.c);

    for (int l = 0; l < cfg.enc_layers; ++l) {
        const std::string base = "enc.l" + std::to_string(l);
        if (cfg.use_fddt())
            x = fddt_apply(x, *cond.encoder_mask, detail::fddt_w(b, l), detail::fddt_b(b, l));
        Var h = detail::layer_norm(b, base + ".ln1", x);
        std::vector<Tensor> sink;
        Var attn = detail::mha(cfg, detail::attn_vars(b, base + ".attn", cfg.qkb_encoder()), h, h,
                               /*causal=*/false, cfg.qkb_encoder() ? &key_bias : nullptr,
                               trace != nullptr ? &sink : nullptr);
        if (trace != nullptr) trace->raw_scores.push_back(std::move(sink));
        x = add(x, attn);
        x = add(x, detail::mlp_block(b, base + ".mlp", detail::layer_norm(b, base + ".ln2", x)));
    }
    return detail::layer_norm(b, "enc.ln_post", x);
}

// ---------------------------------------------------------------------------
// Decoder (teacher-forced full pass)
// ---------------------------------------------------------------------------

// tokens: decoder input sequence beginning with BOS. Returns [L x V] logits
// for the next token at every position.
inline Var decoder_forward(const ModelConfig& cfg, const Bound& b, Var enc_h, const std::vector<int>& tokens,
                           const Tensor* cross_key_bias = nullptr) {
    GradTape& tape = *enc_h.tape;
    require(!tokens.empty() && tokens.front() == Vocab::kBos, "decoder: prefix must begin with BOS");
    if (static_cast<int>(tokens.size()) > cfg.max_decode_len)
        throw CapacityError("decoder: prefix exceeds max decode length");
    const int L = static_cast<int>(tokens.size());

    Var x = embedding_rows(b("dec.embed"), tokens);
    std::vector<int> positions(static_cast<size_t>(L));
    for (int i = 0; i < L; ++i) positions[static_cast<size_t>(i)] = i;
    x = add(x, tape.constant(sinusoid_positions(positions, cfg.d_m)));

    for (int l = 0; l < cfg.dec_layers; ++l) {
        const std::string base = "dec.l" + std::to_string(l);
        Var h = detail::layer_norm(b, base + ".ln1", x);
        x = add(x, detail::mha(cfg, detail::attn_vars(b, base + ".self", false), h, h, /*causal=*/true));
        Var hx = detail::layer_norm(b, base + ".lnx", x);
        x = add(x, detail::mha(cfg, detail::attn_vars(b, base + ".cross", cfg.qkb_cross()), hx, enc_h,
                               /*causal=*/false, cfg.qkb_cross() ? cross_key_bias : nullptr));
        x = add(x, detail::mlp_block(b, base + ".mlp", detail::layer_norm(b, base + ".ln2", x)));
    }
    x = detail::layer_norm(b, "dec.ln_post", x);
    return add_rowvec(matmul_nt(x, b("dec.out.w")), b("dec.out.b"));
}

// ---------------------------------------------------------------------------
// CTC head
// ---------------------------------------------------------------------------

// One attention layer, two stride-2 convolutions and a linear projection to
// the vocabulary; the overall frame ratio is 8x relative to raw features.
// Odd lengths are zero-padded to a multiple of 4 and the padded tail output
// is dropped.
inline Var ctc_head_forward(const ModelConfig& cfg, const Bound& b, Var enc_h) {
    GradTape& tape = *enc_h.tape;
    const int t_enc = enc_h.value().shape[0];
    const int t_out = (t_enc + 3) / 4;

    Var x = enc_h;
    Var h = detail::layer_norm(b, "ctc.ln1", x);
    x = add(x, detail::mha(cfg, detail::attn_vars(b, "ctc.attn", false), h, h, false));
    x = add(x, detail::mlp_block(b, "ctc.mlp", detail::layer_norm(b, "ctc.ln2", x)));

    const int padded = ((t_enc + 3) / 4) * 4;
    if (padded != t_enc)
        x = concat_rows(x, tape.constant(Tensor::zeros({padded - t_enc, cfg.d_m})));
    x = gelu(add_rowvec(matmul_nt(unfold1d(x, 3, 2, 1), b("ctc.conv1.w")), b("ctc.conv1.b")));
    x = gelu(add_rowvec(matmul_nt(unfold1d(x, 3, 2, 1), b("ctc.conv2.w")), b("ctc.conv2.b")));
    Var logits = add_rowvec(matmul_nt(x, b("ctc.out.w")), b("ctc.out.b"));
    if (logits.value().shape[0] != t_out) logits = slice_rows(logits, 0, t_out);
    return logits;
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

struct Model {
    ModelConfig config;
    Vocab vocab;
    ParamStore params;

    static Model init(const ModelConfig& cfg, uint64_t seed) {
        Model m;
        m.config = cfg;
        m.params = init_params(cfg, seed);
        return m;
    }

    void save(const std::string& path) const {
        nlohmann::json meta = {{"kind", "tsasr-model"}, {"config", config.to_json()}};
        save_params(path, params, meta);
    }

    static Model load(const std::string& path) {
        Model m;
        nlohmann::json meta;
        m.params = load_params(path, &meta);
        if (!meta.contains("config")) throw ParseError("model checkpoint: missing config metadata");
        m.config = ModelConfig::from_json(meta.at("config"));
        m.config.validate();
        return m;
    }
};

// Pure encoder run (no gradients); returns the [T/2 x d_m] states.
inline Tensor run_encoder(const Model& m, const Tensor& features, const ConditioningInput& cond,
                          EncoderTrace* trace = nullptr) {
    GradTape tape;
    tape.recording = false;
    Bound b = bind_params(tape, m.params, [](const std::string&) { return false; });
    return encoder_forward(m.config, b, tape.constant(features), cond, trace).value();
}

// Pure teacher-forced decoder logits.
inline Tensor run_decoder(const Model& m, const Tensor& enc_h, const std::vector<int>& tokens,
                          const Tensor* cross_key_bias = nullptr) {
    GradTape tape;
    tape.recording = false;
    Bound b = bind_params(tape, m.params, [](const std::string&) { return false; });
    return decoder_forward(m.config, b, tape.constant(enc_h), tokens, cross_key_bias).value();
}

// Pure CTC-head log posteriors [T_c x V].
inline Tensor run_ctc_head(const Model& m, const Tensor& enc_h) {
    GradTape tape;
    tape.recording = false;
    Bound b = bind_params(tape, m.params, [](const std::string&) { return false; });
    return log_softmax_rows(ctc_head_forward(m.config, b, tape.constant(enc_h)).value());
}

// ---------------------------------------------------------------------------
// Incremental decoding session (pure tensor math with per-layer KV caches)
// ---------------------------------------------------------------------------

class DecodeSession {
  public:
    struct State {
        std::vector<Tensor> self_k, self_v;  // per layer, [len x d_m]
        int length = 0;
    };

    DecodeSession(const Model& m, Tensor enc_h, const StnoMask* enc_mask) : model_(m), enc_h_(std::move(enc_h)) {
        const ModelConfig& cfg = m.config;
        if (cfg.qkb_cross()) {
            require(enc_mask != nullptr, "DecodeSession: QKb cross-attention needs an encoder-rate mask");
            cross_bias_ = qkb_bias_vector(*enc_mask, cfg.qkb.c);
        }
        for (int l = 0; l < cfg.dec_layers; ++l) {
            const std::string base = "dec.l" + std::to_string(l) + ".cross";
            Tensor k_in = cfg.qkb_cross() ? append_col(enc_h_, cross_bias_) : enc_h_;
            cross_k_.push_back(matmul_nt(k_in, m.params.get(base + ".wk")));
            cross_v_.push_back(add_rowvec(matmul_nt(enc_h_, m.params.get(base + ".wv")), m.params.get(base + ".bv")));
        }
    }

    State initial() const {
        State s;
        s.self_k.assign(static_cast<size_t>(model_.config.dec_layers), Tensor());
        s.self_v.assign(static_cast<size_t>(model_.config.dec_layers), Tensor());
        return s;
    }

    // Consumes one token and returns log-probs over the next token [V].
    Tensor advance(State& st, int token) const {
        const ModelConfig& cfg = model_.config;
        const ParamStore& p = model_.params;
        if (st.length + 1 > cfg.max_decode_len) throw CapacityError("DecodeSession: prefix exceeds max decode length");
        const int d = cfg.d_m, H = cfg.heads, dh = d / H;

        Tensor x({1, d});
        const Tensor& emb = p.get("dec.embed");
        std::copy(emb.row_ptr(token), emb.row_ptr(token) + d, x.row_ptr(0));
        x = add(x, sinusoid_positions({st.length}, d));

        for (int l = 0; l < cfg.dec_layers; ++l) {
            const std::string base = "dec.l" + std::to_string(l);
            // causal self-attention over the cache plus this position
            Tensor h = layer_norm_rows(x, p.get(base + ".ln1.g"), p.get(base + ".ln1.b"));
            Tensor qs = add_rowvec(matmul_nt(h, p.get(base + ".self.wq")), p.get(base + ".self.bq"));
            Tensor ks = matmul_nt(h, p.get(base + ".self.wk"));
            Tensor vs = add_rowvec(matmul_nt(h, p.get(base + ".self.wv")), p.get(base + ".self.bv"));
            Tensor& cache_k = st.self_k[static_cast<size_t>(l)];
            Tensor& cache_v = st.self_v[static_cast<size_t>(l)];
            cache_k = cache_k.numel() == 0 ? ks : concat_rows(cache_k, ks);
            cache_v = cache_v.numel() == 0 ? vs : concat_rows(cache_v, vs);
            x = add(x, attn_single(cfg, qs, cache_k, cache_v, p.get(base + ".self.wo"), p.get(base + ".self.bo"), dh, H));

            // cross-attention over the fixed encoder keys
            Tensor hx = layer_norm_rows(x, p.get(base + ".lnx.g"), p.get(base + ".lnx.b"));
            Tensor q_in = cfg.qkb_cross() ? append_const_col(hx, 1.0) : hx;
            Tensor qx = add_rowvec(matmul_nt(q_in, p.get(base + ".cross.wq")), p.get(base + ".cross.bq"));
            x = add(x, attn_single(cfg, qx, cross_k_[static_cast<size_t>(l)], cross_v_[static_cast<size_t>(l)],
                                   p.get(base + ".cross.wo"), p.get(base + ".cross.bo"), dh, H,
                                   cfg.qkb_cross()));

            Tensor y = layer_norm_rows(x, p.get(base + ".ln2.g"), p.get(base + ".ln2.b"));
            y = gelu(add_rowvec(matmul_nt(y, p.get(base + ".mlp.w1")), p.get(base + ".mlp.b1")));
            x = add(x, add_rowvec(matmul_nt(y, p.get(base + ".mlp.w2")), p.get(base + ".mlp.b2")));
        }
        st.length += 1;
        x = layer_norm_rows(x, p.get("dec.ln_post.g"), p.get("dec.ln_post.b"));
        Tensor logits = add_rowvec(matmul_nt(x, p.get("dec.out.w")), p.get("dec.out.b"));
        Tensor lp = log_softmax_rows(logits);
        Tensor out({model_.config.vocab_size});
        std::copy(lp.row_ptr(0), lp.row_ptr(0) + model_.config.vocab_size, out.data.begin());
        return out;
    }

    const Tensor& encoder_states() const { return enc_h_; }

  private:
    static Tensor attn_single(const ModelConfig& cfg, const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& wo, const Tensor& bo, int dh, int H, bool extended = false) {
        const int d = cfg.d_m;
        Tensor out({1, d});
        for (int h = 0; h < H; ++h) {
            Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
            Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
            if (extended) {
                qh = concat_cols(qh, slice_cols(q, d, d + 1));
                kh = concat_cols(kh, slice_cols(k, d, d + 1));
            }
            Tensor scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
            Tensor a = softmax_rows(scores);
            Tensor oh = matmul(a, slice_cols(v, h * dh, (h + 1) * dh));
            std::copy(oh.data.begin(), oh.data.end(), out.row_ptr(0) + h * dh);
        }
        return add_rowvec(matmul_nt(out, wo), bo);
    }

    const Model& model_;
    Tensor enc_h_;
    Tensor cross_bias_;
    std::vector<Tensor> cross_k_, cross_v_;
};

}  // namespace tsasr
