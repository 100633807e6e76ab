#pragma once

// CTC negative log-likelihood via the log-domain forward-backward recursion,
// exposed both as a pure value and as a tape primitive whose backward uses
// the alignment posteriors.

#include <vector>

#include "tsasr/autodiff.hpp"

namespace tsasr {

// Minimum frames needed to emit the label: one per symbol plus a blank
// between adjacent repeats.
inline int ctc_min_frames(const std::vector<int>& labels) {
    int required = static_cast<int>(labels.size());
    for (size_t i = 1; i < labels.size(); ++i)
        if (labels[i] == labels[i - 1]) ++required;
    return required;
}

namespace detail {

struct CtcAlpha {
    std::vector<int> ext;          // blank-interleaved label sequence
    std::vector<double> alpha;     // [T x S] log domain
    double log_prob = kNegInf;
    int frames = 0;

    double& at(int t, int s) { return alpha[static_cast<size_t>(t) * ext.size() + static_cast<size_t>(s)]; }
    double at(int t, int s) const { return alpha[static_cast<size_t>(t) * ext.size() + static_cast<size_t>(s)]; }
};

inline CtcAlpha ctc_forward(const Tensor& logp, const std::vector<int>& labels, int blank) {
    require_dim(logp.ndim() == 2, "ctc: log posteriors must be [T x V]");
    const int T = logp.shape[0], V = logp.shape[1];
    for (int l : labels) {
        require(l != blank, "ctc: labels may not contain blank");
        require(l >= 0 && l < V, "ctc: label out of vocabulary");
    }
    if (ctc_min_frames(labels) > T)
        throw InfeasibleLabelError("ctc: label needs " + std::to_string(ctc_min_frames(labels)) +
                                   " frames but only " + std::to_string(T) + " available");

    CtcAlpha fw;
    fw.frames = T;
    fw.ext.push_back(blank);
    for (int l : labels) {
        fw.ext.push_back(l);
        fw.ext.push_back(blank);
    }
    const int S = static_cast<int>(fw.ext.size());
    fw.alpha.assign(static_cast<size_t>(T) * S, kNegInf);

    fw.at(0, 0) = logp.at(0, blank);
    if (S > 1) fw.at(0, 1) = logp.at(0, fw.ext[1]);
    for (int t = 1; t < T; ++t) {
        for (int s = 0; s < S; ++s) {
            double acc = fw.at(t - 1, s);
            if (s >= 1) acc = logaddexp(acc, fw.at(t - 1, s - 1));
            if (s >= 2 && fw.ext[static_cast<size_t>(s)] != blank && fw.ext[static_cast<size_t>(s)] != fw.ext[static_cast<size_t>(s) - 2])
                acc = logaddexp(acc, fw.at(t - 1, s - 2));
            if (acc != kNegInf) fw.at(t, s) = acc + logp.at(t, fw.ext[static_cast<size_t>(s)]);
        }
    }
    fw.log_prob = fw.at(T - 1, S - 1);
    if (S > 1) fw.log_prob = logaddexp(fw.log_prob, fw.at(T - 1, S - 2));
    return fw;
}

}  // namespace detail

// -log p(labels | logp); logp rows must be per-frame log posteriors.
inline double ctc_nll_value(const Tensor& logp, const std::vector<int>& labels, int blank) {
    return -detail::ctc_forward(logp, labels, blank).log_prob;
}

// Per-frame symbol posteriors gamma[t][k] = P(path emits k at t | labels).
// Used as the loss gradient: dL/dlogp[t][k] = -gamma[t][k].
inline Tensor ctc_posteriors(const Tensor& logp, const std::vector<int>& labels, int blank, double* nll_out = nullptr) {
    const detail::CtcAlpha fw = detail::ctc_forward(logp, labels, blank);
    const int T = logp.shape[0];
    const int S = static_cast<int>(fw.ext.size());

    // beta excludes the frame-t emission so alpha + beta is exactly the
    // posterior path mass through (t, s)
    std::vector<double> beta(static_cast<size_t>(T) * S, kNegInf);
    auto bat = [&](int t, int s) -> double& { return beta[static_cast<size_t>(t) * S + static_cast<size_t>(s)]; };
    bat(T - 1, S - 1) = 0.0;
    if (S > 1) bat(T - 1, S - 2) = 0.0;
    for (int t = T - 2; t >= 0; --t) {
        for (int s = 0; s < S; ++s) {
            double acc = (bat(t + 1, s) == kNegInf) ? kNegInf : bat(t + 1, s) + logp.at(t + 1, fw.ext[static_cast<size_t>(s)]);
            if (s + 1 < S && bat(t + 1, s + 1) != kNegInf)
                acc = logaddexp(acc, bat(t + 1, s + 1) + logp.at(t + 1, fw.ext[static_cast<size_t>(s) + 1]));
            if (s + 2 < S && fw.ext[static_cast<size_t>(s) + 2] != blank &&
                fw.ext[static_cast<size_t>(s) + 2] != fw.ext[static_cast<size_t>(s)] && bat(t + 1, s + 2) != kNegInf)
                acc = logaddexp(acc, bat(t + 1, s + 2) + logp.at(t + 1, fw.ext[static_cast<size_t>(s) + 2]));
            bat(t, s) = acc;
        }
    }

    Tensor gamma(logp.shape);
    for (int t = 0; t < T; ++t)
        for (int s = 0; s < S; ++s) {
            const double a = fw.at(t, s);
            if (a == kNegInf || bat(t, s) == kNegInf) continue;
            const double post = std::exp(a + bat(t, s) - fw.log_prob);
            gamma.at(t, fw.ext[static_cast<size_t>(s)]) += post;
        }
    if (nll_out != nullptr) *nll_out = -fw.log_prob;
    return gamma;
}

// Tape primitive: scalar CTC loss on log posteriors.
inline Var ctc_nll(Var logp, const std::vector<int>& labels, int blank) {
    GradTape& t = *logp.tape;
    double nll = 0.0;
    Tensor gamma = ctc_posteriors(logp.value(), labels, blank, &nll);
    return t.push_op(Tensor::scalar(nll), {logp.id}, [pl = logp.id, gamma = std::move(gamma)](GradTape& t, int self) {
        t.accumulate(pl, scale(gamma, -t.node(self).grad.data[0]));
    });
}

}  // namespace tsasr
