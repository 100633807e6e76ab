#pragma once

// Inter-speaker co-attention over the S per-speaker encoder outputs. The
// speaker summary and the per-speaker streams are co-attended with one shared
// set of query/key projections (block-diagonal across speakers, blocks tied),
// so the attention matrices are identical for both paths by construction.
// Zero-initialized fusion keeps the module an identity residual at start.

#include <vector>

#include "tsasr/autodiff.hpp"
#include "tsasr/model.hpp"

namespace tsasr {

struct CoAttentionTrace {
    // shared per-head attention weights used for both the per-speaker and the
    // summary path
    std::vector<Tensor> attention_weights;
};

namespace detail {

// Standard multi-head self-attention at width `dim` with `heads` heads; the
// q/k/v projections are per-head [dim/heads x dim].
inline Var coatt_self_attention(const Bound& b, Var x, int dim, int heads, const std::string& prefix) {
    const int dh = dim / heads;
    Var out{-1, nullptr};
    for (int h = 0; h < heads; ++h) {
        const std::string hs = ".h" + std::to_string(h);
        Var q = matmul_nt(x, b(prefix + ".q" + hs));
        Var k = matmul_nt(x, b(prefix + ".k" + hs));
        Var v = matmul_nt(x, b(prefix + ".v" + hs));
        Var scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
        Var oh = matmul(softmax_rows(scores), v);
        out = out.valid() ? concat_cols(out, oh) : oh;
    }
    return matmul_nt(out, b(prefix + ".wo"));
}

}  // namespace detail

// h_list: S per-speaker encoder outputs, each [T x d_m]. Returns S tensors of
// the same shape. The block-diagonal q/k assembly happens at run time, so S
// may vary per call.
inline std::vector<Var> co_attention_forward(const ModelConfig& cfg, const Bound& b, const std::vector<Var>& h_list,
                                             CoAttentionTrace* trace = nullptr) {
    require(!h_list.empty(), "co_attention: need at least one speaker");
    const int S = static_cast<int>(h_list.size());
    const std::vector<int> shape0 = h_list[0].value().shape;
    for (const Var& h : h_list)
        require_dim(h.value().shape == shape0, "co_attention: inconsistent speaker tensor shapes");
    require_dim(shape0.size() == 2 && shape0[1] == cfg.d_m, "co_attention: expected [T x d_m] inputs");

    const int d = cfg.d_m, dp = d / 2, dh = d / 4, H = cfg.heads;

    // speaker summary A from the mean of all streams
    Var mean = h_list[0];
    for (int s = 1; s < S; ++s) mean = add(mean, h_list[static_cast<size_t>(s)]);
    mean = scale(mean, 1.0 / S);
    Var a = layer_norm_rows(matmul_nt(mean, b("coatt.wa")), b("coatt.ln_a.g"), b("coatt.ln_a.b"));

    // per-speaker projections
    std::vector<Var> m(static_cast<size_t>(S));
    for (int s = 0; s < S; ++s)
        m[static_cast<size_t>(s)] =
            layer_norm_rows(matmul_nt(h_list[static_cast<size_t>(s)], b("coatt.wm")), b("coatt.ln_m.g"), b("coatt.ln_m.b"));

    // shared attention weights: queries and keys come from the concatenated
    // streams through block-diagonal projections whose blocks are tied, so
    // the scale uses the assembled width S*dp/H
    std::vector<Var> weights(static_cast<size_t>(H), Var{-1, nullptr});
    for (int h = 0; h < H; ++h) {
        const std::string hs = ".h" + std::to_string(h);
        Var q{-1, nullptr}, k{-1, nullptr};
        for (int s = 0; s < S; ++s) {
            Var qs = matmul_nt(m[static_cast<size_t>(s)], b("coatt.qk.q" + hs));
            Var ks = matmul_nt(m[static_cast<size_t>(s)], b("coatt.qk.k" + hs));
            q = q.valid() ? concat_cols(q, qs) : qs;
            k = k.valid() ? concat_cols(k, ks) : ks;
        }
        const double width = static_cast<double>(S) * dp / H;
        weights[static_cast<size_t>(h)] = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(width)));
        if (trace != nullptr) trace->attention_weights.push_back(weights[static_cast<size_t>(h)].value());
    }

    // co-attended per-speaker streams (values from M_s)
    std::vector<Var> m_prime(static_cast<size_t>(S));
    for (int s = 0; s < S; ++s) {
        Var out{-1, nullptr};
        for (int h = 0; h < H; ++h) {
            Var v = matmul_nt(m[static_cast<size_t>(s)], b("coatt.th.v.h" + std::to_string(h)));
            Var oh = matmul(weights[static_cast<size_t>(h)], v);
            out = out.valid() ? concat_cols(out, oh) : oh;
        }
        out = matmul_nt(out, b("coatt.th.wo"));
        m_prime[static_cast<size_t>(s)] =
            layer_norm_rows(add(out, m[static_cast<size_t>(s)]), b("coatt.ln_ms.g"), b("coatt.ln_ms.b"));
    }

    // co-attended summary (values from A, identical attention weights)
    Var a_out{-1, nullptr};
    for (int h = 0; h < H; ++h) {
        Var v = matmul_nt(a, b("coatt.xi.v.h" + std::to_string(h)));
        Var oh = matmul(weights[static_cast<size_t>(h)], v);
        a_out = a_out.valid() ? concat_cols(a_out, oh) : oh;
    }
    Var a_prime = layer_norm_rows(add(matmul_nt(a_out, b("coatt.xi.wo")), a), b("coatt.ln_ap.g"), b("coatt.ln_ap.b"));

    // refine the summary with plain self-attention
    Var a_bar = layer_norm_rows(add(detail::coatt_self_attention(b, a_prime, dh, H, "coatt.om"), a_prime),
                                b("coatt.ln_abar.g"), b("coatt.ln_abar.b"));

    // fuse and add back to the original streams
    std::vector<Var> out(static_cast<size_t>(S));
    for (int s = 0; s < S; ++s) {
        Var fused = matmul_nt(concat_cols(m_prime[static_cast<size_t>(s)], a_bar), b("coatt.wf"));
        out[static_cast<size_t>(s)] = add(h_list[static_cast<size_t>(s)], fused);
    }
    return out;
}

// Pure wrapper for S tensors.
inline std::vector<Tensor> co_attention_forward(const ModelConfig& cfg, const ParamStore& params,
                                                const std::vector<Tensor>& h_list, CoAttentionTrace* trace = nullptr) {
    GradTape tape;
    tape.recording = false;
    Bound b = bind_params(tape, params, [](const std::string&) { return false; });
    std::vector<Var> vars;
    vars.reserve(h_list.size());
    for (const Tensor& h : h_list) vars.push_back(tape.constant(h));
    std::vector<Var> outs = co_attention_forward(cfg, b, vars, trace);
    std::vector<Tensor> result;
    result.reserve(outs.size());
    for (const Var& v : outs) result.push_back(v.value());
    return result;
}

}  // namespace tsasr
