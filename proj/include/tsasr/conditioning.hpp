#pragma once

// Target-speaker conditioning transforms: input masking, query-key biasing
// with shifted positional embeddings, and frame-level diarization-dependent
// transformations (FDDT). All three consume StnoMask frames and are pure
// given their parameters.

#include <array>
#include <random>
#include <utility>
#include <vector>

#include "tsasr/autodiff.hpp"
#include "tsasr/diarization.hpp"

namespace tsasr {

enum class StnoClass { kSilence = 0, kTarget = 1, kNonTarget = 2, kOverlap = 3 };

inline const char* stno_class_name(StnoClass c) {
    switch (c) {
        case StnoClass::kSilence: return "S";
        case StnoClass::kTarget: return "T";
        case StnoClass::kNonTarget: return "N";
        case StnoClass::kOverlap: return "O";
    }
    return "?";
}

struct QkbConfig {
    double c = 50.0;  // initial bias constant, non-negative
    bool apply_in_encoder_self_attention = true;
    bool apply_in_decoder_cross_attention = true;
    bool shift_positions = true;

    void validate() const { require(c >= 0.0, "QkbConfig: c must be non-negative"); }
};

// ---------------------------------------------------------------------------
// Input masking: frame t scaled by (p_T + p_O)
// ---------------------------------------------------------------------------

inline Tensor input_mask_scale(const StnoMask& stno) {
    Tensor s({stno.num_frames()});
    for (int t = 0; t < stno.num_frames(); ++t) s.data[static_cast<size_t>(t)] = stno.target_activity(t);
    return s;
}

inline Tensor input_mask(const Tensor& features, const StnoMask& stno) {
    require_dim(features.ndim() == 2 && features.shape[0] == stno.num_frames(),
                "input_mask: frame count mismatch");
    return row_scale(features, input_mask_scale(stno));
}

inline Var input_mask(Var features, const StnoMask& stno) {
    require_dim(features.value().shape[0] == stno.num_frames(), "input_mask: frame count mismatch");
    return row_scale(features, input_mask_scale(stno));
}

// ---------------------------------------------------------------------------
// Query-key biasing
// ---------------------------------------------------------------------------

// Embeds a projection into one extra row/column: original block top-left,
// 1 in the bottom-right corner, zeros elsewhere. Works for per-head
// rectangular projections as well.
inline Tensor extend_projection(const Tensor& w) {
    require_dim(w.ndim() == 2, "extend_projection: matrix expected");
    Tensor out({w.shape[0] + 1, w.shape[1] + 1});
    for (int i = 0; i < w.shape[0]; ++i)
        std::copy(w.row_ptr(i), w.row_ptr(i) + w.shape[1], out.row_ptr(i));
    out.at(w.shape[0], w.shape[1]) = 1.0;
    return out;
}

inline Tensor extend_bias(const Tensor& b) {
    require_dim(b.ndim() == 1, "extend_bias: vector expected");
    Tensor out({b.shape[0] + 1});
    std::copy(b.data.begin(), b.data.end(), out.data.begin());
    return out;
}

inline std::pair<Tensor, Tensor> extend_qk(const Tensor& w_q, const Tensor& w_k) {
    require_dim(w_q.ndim() == 2 && w_q.shape[0] == w_q.shape[1], "extend_qk: W_q must be square");
    require_dim(w_k.ndim() == 2 && w_k.shape[0] == w_k.shape[1], "extend_qk: W_k must be square");
    return {extend_projection(w_q), extend_projection(w_k)};
}

// Hard target decision for QKb: a frame is a target frame when the target's
// activity p_T + p_O reaches 0.5.
inline std::vector<bool> qkb_target_flags(const StnoMask& stno) {
    std::vector<bool> flags(static_cast<size_t>(stno.num_frames()));
    for (int t = 0; t < stno.num_frames(); ++t) flags[static_cast<size_t>(t)] = stno.target_activity(t) >= 0.5;
    return flags;
}

// Value of the appended key coordinate: 0 on target frames, -c otherwise.
inline Tensor qkb_bias_vector(const StnoMask& stno, double c) {
    require(c >= 0.0, "qkb_bias_vector: c must be non-negative");
    const std::vector<bool> flags = qkb_target_flags(stno);
    Tensor out({stno.num_frames()});
    for (int t = 0; t < stno.num_frames(); ++t) out.data[static_cast<size_t>(t)] = flags[static_cast<size_t>(t)] ? 0.0 : -c;
    return out;
}

// Position counter increments on target frames and repeats on non-target
// ones; leading non-target frames take position 1 (no predecessor to repeat).
// TTTNNTT -> 1,2,3,3,3,4,5.
inline std::vector<int> shifted_positions(const std::vector<bool>& target_flags) {
    require(!target_flags.empty(), "shifted_positions: empty input");
    std::vector<int> positions(target_flags.size());
    int counter = 0;
    for (size_t t = 0; t < target_flags.size(); ++t) {
        if (target_flags[t]) ++counter;
        positions[t] = std::max(counter, 1);
    }
    return positions;
}

// ---------------------------------------------------------------------------
// FDDT
// ---------------------------------------------------------------------------

struct FddtLayerParams {
    std::array<Tensor, 4> w;  // indexed by StnoClass
    std::array<Tensor, 4> b;
};

struct FddtParams {
    std::vector<FddtLayerParams> layers;
    int dim = 0;

    int num_layers() const { return static_cast<int>(layers.size()); }
};

enum class FddtInitMode { kSuppressive, kRandom };

// Suppressive mode zeroes W_S and W_N at the first layer only (identities at
// the deeper ones) and keeps W_T/W_O identity everywhere with zero biases, so
// a freshly initialized model ignores silence/non-target content without
// altering target frames.
inline FddtParams fddt_init(int num_layers, int d_m, FddtInitMode mode, std::mt19937_64* rng = nullptr) {
    require(num_layers >= 1, "fddt_init: need at least one layer");
    require(d_m >= 1, "fddt_init: bad model dim");
    FddtParams params;
    params.dim = d_m;
    params.layers.resize(static_cast<size_t>(num_layers));
    for (int l = 0; l < num_layers; ++l) {
        FddtLayerParams& lp = params.layers[static_cast<size_t>(l)];
        for (int k = 0; k < 4; ++k) {
            if (mode == FddtInitMode::kRandom) {
                require(rng != nullptr, "fddt_init: random mode needs an rng");
                lp.w[static_cast<size_t>(k)] = Tensor::randn({d_m, d_m}, *rng, 0.02);
            } else {
                const bool zero = (l == 0) && (k == static_cast<int>(StnoClass::kSilence) ||
                                               k == static_cast<int>(StnoClass::kNonTarget));
                lp.w[static_cast<size_t>(k)] = zero ? Tensor::zeros({d_m, d_m}) : Tensor::eye(d_m);
            }
            lp.b[static_cast<size_t>(k)] = Tensor::zeros({d_m});
        }
    }
    return params;
}

namespace detail {
// Frames grouped by their one-hot class, in frame order.
inline std::array<std::vector<int>, 4> hard_class_frames(const StnoMask& stno) {
    std::array<std::vector<int>, 4> groups;
    for (int t = 0; t < stno.num_frames(); ++t)
        for (int k = 0; k < 4; ++k)
            if (stno.values.at(t, k) == 1.0) {
                groups[static_cast<size_t>(k)].push_back(t);
                break;
            }
    return groups;
}
}  // namespace detail

// z_hat_t = sum_k (W_k z_t + b_k) p_k^t. With one-hot rows this reduces to
// selecting one transform per frame; both paths produce bit-identical values.
inline Var fddt_apply(Var z, const StnoMask& stno, const std::array<Var, 4>& w, const std::array<Var, 4>& b) {
    const std::vector<int> zshape = z.value().shape;
    require_dim(zshape.size() == 2 && zshape[0] == stno.num_frames(), "fddt_apply: frame count mismatch");
    if (stno.is_hard()) {
        const auto groups = detail::hard_class_frames(stno);
        Var out{-1, nullptr};
        for (int k = 0; k < 4; ++k) {
            const auto& ids = groups[static_cast<size_t>(k)];
            if (ids.empty()) continue;
            Var rows = gather_rows(z, ids);
            Var transformed = add_rowvec(matmul_nt(rows, w[static_cast<size_t>(k)]), b[static_cast<size_t>(k)]);
            Var placed = scatter_rows(transformed, ids, zshape[0]);
            out = out.valid() ? add(out, placed) : placed;
        }
        require(out.valid(), "fddt_apply: empty mask");
        return out;
    }
    Var out{-1, nullptr};
    for (int k = 0; k < 4; ++k) {
        Tensor pk({stno.num_frames()});
        for (int t = 0; t < stno.num_frames(); ++t) pk.data[static_cast<size_t>(t)] = stno.values.at(t, k);
        Var term = row_scale(add_rowvec(matmul_nt(z, w[static_cast<size_t>(k)]), b[static_cast<size_t>(k)]), pk);
        out = out.valid() ? add(out, term) : term;
    }
    return out;
}

inline Tensor fddt_apply(const Tensor& z, const StnoMask& stno, const FddtLayerParams& layer) {
    GradTape tape;
    tape.recording = false;
    std::array<Var, 4> w, b;
    for (int k = 0; k < 4; ++k) {
        w[static_cast<size_t>(k)] = tape.constant(layer.w[static_cast<size_t>(k)]);
        b[static_cast<size_t>(k)] = tape.constant(layer.b[static_cast<size_t>(k)]);
    }
    return fddt_apply(tape.constant(z), stno, w, b).value();
}

// Soft-path evaluation regardless of mask hardness; used to check the
// selection fast path against the convex-combination definition.
inline Tensor fddt_apply_soft_path(const Tensor& z, const StnoMask& stno, const FddtLayerParams& layer) {
    require_dim(z.ndim() == 2 && z.shape[0] == stno.num_frames(), "fddt_apply: frame count mismatch");
    Tensor out;
    bool first = true;
    for (int k = 0; k < 4; ++k) {
        Tensor pk({stno.num_frames()});
        for (int t = 0; t < stno.num_frames(); ++t) pk.data[static_cast<size_t>(t)] = stno.values.at(t, k);
        Tensor term = row_scale(add_rowvec(matmul_nt(z, layer.w[static_cast<size_t>(k)]), layer.b[static_cast<size_t>(k)]), pk);
        out = first ? term : add(out, term);
        first = false;
    }
    return out;
}

}  // namespace tsasr
