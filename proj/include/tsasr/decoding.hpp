#pragma once

// Beam search with CTC prefix rescoring. The prefix scorer follows the
// standard forward recursion over (blank-ending, nonblank-ending) state
// vectors; timestamp tokens keep the CTC state untouched and contribute a
// zero score, so the CTC head scores only the non-timestamp label subset.

#include <algorithm>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "tsasr/coattention.hpp"
#include "tsasr/metrics.hpp"
#include "tsasr/model.hpp"

namespace tsasr {

// ---------------------------------------------------------------------------
// CTC prefix scoring
// ---------------------------------------------------------------------------

struct CtcPrefixState {
    std::vector<double> r_nb;  // log prob of alignments ending in the prefix's last symbol
    std::vector<double> r_b;   // log prob of alignments ending in blank
    int last_token = -1;       // -1 marks the empty prefix
    double log_prefix = 0.0;   // log P(prefix is a prefix of the output)
    int frames_scored = 0;
    bool initial = true;

    bool operator==(const CtcPrefixState& o) const {
        return r_nb == o.r_nb && r_b == o.r_b && last_token == o.last_token &&
               log_prefix == o.log_prefix && frames_scored == o.frames_scored && initial == o.initial;
    }
};

class CtcPrefixScorer {
  public:
    CtcPrefixScorer(Tensor logp, int blank, int ts_begin, int ts_end)
        : logp_(std::move(logp)), blank_(blank), ts_begin_(ts_begin), ts_end_(ts_end) {
        require_dim(logp_.ndim() == 2 && logp_.shape[0] >= 1, "prefix scorer: need [T x V] log posteriors");
        frames_ = logp_.shape[0];
    }

    bool is_timestamp(int token) const { return token >= ts_begin_ && token < ts_end_; }
    int frames() const { return frames_; }

    CtcPrefixState initial() const {
        CtcPrefixState st;
        st.r_nb.assign(static_cast<size_t>(frames_), kNegInf);
        st.r_b.resize(static_cast<size_t>(frames_));
        double acc = 0.0;
        for (int t = 0; t < frames_; ++t) {
            acc += logp_.at(t, blank_);
            st.r_b[static_cast<size_t>(t)] = acc;
        }
        st.frames_scored = frames_;
        return st;
    }

    // Log probability that prefix+token prefixes the CTC output, with the
    // advanced state. Timestamp tokens return the state unchanged and leave
    // the score where it was.
    std::pair<double, CtcPrefixState> score(const CtcPrefixState& st, int next_token) const {
        if (is_timestamp(next_token)) return {st.log_prefix, st};
        require(next_token != blank_, "prefix scorer: blank is not a valid extension");
        require(next_token >= 0 && next_token < logp_.shape[1], "prefix scorer: token out of vocabulary");
        require(st.frames_scored == frames_, "prefix scorer: state does not match these posteriors");

        CtcPrefixState ns;
        ns.initial = false;
        ns.last_token = next_token;
        ns.frames_scored = frames_;
        ns.r_nb.assign(static_cast<size_t>(frames_), kNegInf);
        ns.r_b.assign(static_cast<size_t>(frames_), kNegInf);

        const bool same_as_last = (!st.initial && next_token == st.last_token);
        double psi = kNegInf;
        double phi_prev = st.initial ? 0.0 : kNegInf;  // phi(-1): only the empty prefix can start here
        for (int t = 0; t < frames_; ++t) {
            const double lp_tok = logp_.at(t, next_token);
            const double rnb_prev = (t == 0) ? kNegInf : ns.r_nb[static_cast<size_t>(t) - 1];
            ns.r_nb[static_cast<size_t>(t)] = lp_tok + logaddexp(rnb_prev, phi_prev);
            const double rb_prev = (t == 0) ? kNegInf : ns.r_b[static_cast<size_t>(t) - 1];
            const double rnb_prev2 = (t == 0) ? kNegInf : ns.r_nb[static_cast<size_t>(t) - 1];
            ns.r_b[static_cast<size_t>(t)] = logp_.at(t, blank_) + logaddexp(rb_prev, rnb_prev2);
            psi = logaddexp(psi, phi_prev + lp_tok);
            // phi(t) for the next iteration, taken from the parent state
            phi_prev = same_as_last ? st.r_b[static_cast<size_t>(t)]
                                    : logaddexp(st.r_b[static_cast<size_t>(t)], st.r_nb[static_cast<size_t>(t)]);
        }
        ns.log_prefix = psi;
        return {psi, ns};
    }

    // Log probability that the output equals the prefix exactly (EOS score).
    double final_score(const CtcPrefixState& st) const {
        require(st.frames_scored == frames_, "prefix scorer: state does not match these posteriors");
        return logaddexp(st.r_nb[static_cast<size_t>(frames_) - 1], st.r_b[static_cast<size_t>(frames_) - 1]);
    }

  private:
    Tensor logp_;
    int blank_, ts_begin_, ts_end_, frames_ = 0;
};

// ---------------------------------------------------------------------------
// Joint CTC/attention beam search
// ---------------------------------------------------------------------------

struct BeamSearchConfig {
    double lambda = 0.3;  // weight on the CTC side of the joint objective
    int beam = 4;
    int candidate_n = 40;  // attention candidates rescored by CTC per step
    int max_len = 96;

    void validate() const {
        require(lambda >= 0.0 && lambda <= 1.0, "beam: lambda must lie in [0,1]");
        require(beam >= 1, "beam: need k >= 1");
        require(candidate_n >= 1, "beam: need candidate_n >= 1");
        require(max_len >= 1, "beam: need max_len >= 1");
    }
};

struct BeamHypothesis {
    std::vector<int> tokens;  // BOS excluded; EOS present when finished
    double att_logprob = 0.0;
    double ctc_logprob = 0.0;
    double joint_score = 0.0;
    bool finished = false;
};

struct BeamSearchResult {
    std::vector<BeamHypothesis> nbest;  // joint score descending
    bool completed = true;              // false: best partial returned with a warning flag
};

inline double joint_combine(double lambda, double ctc, double att) {
    if (lambda <= 0.0) return att;
    if (lambda >= 1.0) return ctc;
    return lambda * ctc + (1.0 - lambda) * att;
}

inline bool tokens_less(const std::vector<int>& a, const std::vector<int>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

// Session must expose: State initial() const; Tensor advance(State&, int) const
// returning next-token log-probs. States must be copyable.
template <typename Session>
BeamSearchResult joint_beam_search_impl(const Session& session, const Tensor& ctc_logposteriors,
                                        const Vocab& vocab, const BeamSearchConfig& cfg) {
    cfg.validate();
    const int V = ctc_logposteriors.shape[1];
    CtcPrefixScorer scorer(ctc_logposteriors, Vocab::kBlank, vocab.ts_begin(), vocab.size());

    struct Live {
        std::vector<int> tokens;
        double att = 0.0, ctc = 0.0, joint = 0.0;
        CtcPrefixState ctc_state;
        typename Session::State state;
        Tensor next_lp;  // [V] log-probs for the next token
    };

    Live root;
    root.ctc_state = scorer.initial();
    root.state = session.initial();
    root.next_lp = session.advance(root.state, Vocab::kBos);
    root.joint = joint_combine(cfg.lambda, 0.0, 0.0);
    std::vector<Live> beam;
    beam.push_back(std::move(root));

    std::vector<BeamHypothesis> finished;
    auto best_finished = [&]() -> double {
        double best = kNegInf;
        for (const auto& h : finished) best = std::max(best, h.joint_score);
        return best;
    };

    struct Cand {
        const Live* parent;
        int token;
        double att, ctc, joint;
        CtcPrefixState ctc_state;
        bool ts;
    };

    for (int step = 0; step < cfg.max_len && !beam.empty(); ++step) {
        std::vector<Cand> cands;
        for (const Live& hyp : beam) {
            // attention pre-selection: top candidate_n emittable token ids
            std::vector<int> order;
            order.reserve(static_cast<size_t>(V));
            for (int v = 0; v < V; ++v)
                if (v != Vocab::kBos && v != Vocab::kBlank) order.push_back(v);
            const Tensor& lp = hyp.next_lp;
            const int keep = std::min<int>(cfg.candidate_n, static_cast<int>(order.size()));
            std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&lp](int a, int b) {
                if (lp.data[static_cast<size_t>(a)] != lp.data[static_cast<size_t>(b)])
                    return lp.data[static_cast<size_t>(a)] > lp.data[static_cast<size_t>(b)];
                return a < b;
            });
            for (int r = 0; r < keep; ++r) {
                const int tok = order[static_cast<size_t>(r)];
                Cand c;
                c.parent = &hyp;
                c.token = tok;
                c.att = hyp.att + lp.data[static_cast<size_t>(tok)];
                if (tok == Vocab::kEos) {
                    c.ctc = scorer.final_score(hyp.ctc_state);
                    c.ctc_state = hyp.ctc_state;
                    c.ts = false;
                } else if (scorer.is_timestamp(tok)) {
                    c.ctc = hyp.ctc;
                    c.ctc_state = hyp.ctc_state;
                    c.ts = true;
                } else {
                    auto [psi, ns] = scorer.score(hyp.ctc_state, tok);
                    c.ctc = psi;
                    c.ctc_state = std::move(ns);
                    c.ts = false;
                }
                c.joint = joint_combine(cfg.lambda, c.ctc, c.att);
                cands.push_back(std::move(c));
            }
        }

        // ties broken by the lexicographically smaller token sequence
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.joint != b.joint) return a.joint > b.joint;
            std::vector<int> ta = a.parent->tokens, tb = b.parent->tokens;
            ta.push_back(a.token);
            tb.push_back(b.token);
            return tokens_less(ta, tb);
        });

        std::vector<Live> next_beam;
        for (const Cand& c : cands) {
            if (c.token == Vocab::kEos) {
                BeamHypothesis done;
                done.tokens = c.parent->tokens;
                done.tokens.push_back(Vocab::kEos);
                done.att_logprob = c.att;
                done.ctc_logprob = c.ctc;
                done.joint_score = c.joint;
                done.finished = true;
                finished.push_back(std::move(done));
                continue;
            }
            if (static_cast<int>(next_beam.size()) >= cfg.beam) continue;
            Live nl;
            nl.tokens = c.parent->tokens;
            nl.tokens.push_back(c.token);
            nl.att = c.att;
            nl.ctc = c.ctc;
            nl.joint = c.joint;
            nl.ctc_state = c.ctc_state;
            nl.state = c.parent->state;  // copy, then advance
            nl.next_lp = session.advance(nl.state, c.token);
            next_beam.push_back(std::move(nl));
        }
        beam = std::move(next_beam);

        // joint scores only decrease along extensions, so once every live
        // hypothesis scores below the best finished one the search is done
        if (!finished.empty() && !beam.empty()) {
            double best_live = kNegInf;
            for (const auto& h : beam) best_live = std::max(best_live, h.joint);
            if (best_live < best_finished()) break;
        }
    }

    BeamSearchResult result;
    if (!finished.empty()) {
        std::stable_sort(finished.begin(), finished.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
            if (a.joint_score != b.joint_score) return a.joint_score > b.joint_score;
            return tokens_less(a.tokens, b.tokens);
        });
        result.nbest = std::move(finished);
        result.completed = true;
    } else {
        // no hypothesis reached EOS within max_len: return best partials
        for (const Live& h : beam) {
            BeamHypothesis partial;
            partial.tokens = h.tokens;
            partial.att_logprob = h.att;
            partial.ctc_logprob = h.ctc;
            partial.joint_score = h.joint;
            partial.finished = false;
            result.nbest.push_back(std::move(partial));
        }
        std::stable_sort(result.nbest.begin(), result.nbest.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
            if (a.joint_score != b.joint_score) return a.joint_score > b.joint_score;
            return tokens_less(a.tokens, b.tokens);
        });
        result.completed = false;
    }
    return result;
}

inline BeamSearchResult joint_beam_search(const Model& model, const Tensor& enc_h, const Tensor& ctc_logposteriors,
                                          const StnoMask* enc_mask, const BeamSearchConfig& cfg) {
    DecodeSession session(model, enc_h, enc_mask);
    return joint_beam_search_impl(session, ctc_logposteriors, model.vocab, cfg);
}

// ---------------------------------------------------------------------------
// Token sequence -> timed segments
// ---------------------------------------------------------------------------

inline std::vector<SegmentTranscript> tokens_to_segments(const std::vector<int>& tokens, const Vocab& vocab,
                                                         double window_offset_s, double window_end_s,
                                                         const std::string& session_id, const std::string& speaker) {
    std::vector<SegmentTranscript> out;
    std::optional<double> open_start;
    std::string buffer;
    auto flush = [&](double start, double end) {
        std::vector<std::string> words;
        std::istringstream is(buffer);
        std::string w;
        while (is >> w) words.push_back(w);
        buffer.clear();
        if (words.empty()) return;
        SegmentTranscript seg;
        seg.session_id = session_id;
        seg.speaker = speaker;
        seg.start_time = window_offset_s + start;
        seg.end_time = window_offset_s + std::max(start, end);
        seg.words = std::move(words);
        out.push_back(std::move(seg));
    };
    for (int tok : tokens) {
        if (tok == Vocab::kEos) break;
        if (vocab.is_timestamp(tok)) {
            const double t = vocab.timestamp_seconds(tok);
            if (!open_start) {
                open_start = t;
            } else {
                flush(*open_start, t);
                open_start.reset();
            }
        } else if (vocab.is_char(tok)) {
            if (!open_start) open_start = 0.0;  // tolerate a missing opening timestamp
            buffer.push_back(vocab.id_char(tok));
        }
    }
    if (open_start) flush(*open_start, window_end_s - window_offset_s);
    return out;
}

// ---------------------------------------------------------------------------
// Long-form per-target decoding (30 s windows)
// ---------------------------------------------------------------------------

struct TranscribeResult {
    std::vector<SegmentTranscript> segments;
    int windows = 0;
    int failed_windows = 0;  // decode failures; remaining windows still returned
};

// One n-best list per decoded (speaker, window).
struct NBestRecord {
    std::string session_id;
    std::string speaker;
    int window = 0;
    std::vector<BeamHypothesis> hypotheses;
};

inline nlohmann::json nbest_to_json(const std::vector<NBestRecord>& records, const Vocab& vocab) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& rec : records) {
        nlohmann::json hyps = nlohmann::json::array();
        for (const auto& h : rec.hypotheses) {
            std::string readable;
            for (int tok : h.tokens) readable += vocab.token_name(tok);
            hyps.push_back({{"tokens", h.tokens},
                            {"text", readable},
                            {"joint_score", h.joint_score},
                            {"att_logprob", h.att_logprob},
                            {"ctc_logprob", h.ctc_logprob},
                            {"finished", h.finished}});
        }
        arr.push_back({{"session_id", rec.session_id},
                       {"speaker", rec.speaker},
                       {"window", rec.window},
                       {"nbest", std::move(hyps)}});
    }
    return arr;
}

namespace detail {
inline StnoMask slice_mask(const StnoMask& m, int t0, int t1) {
    StnoMask out;
    out.values = slice_rows(m.values, t0, t1);
    out.target_index = m.target_index;
    return out;
}
}  // namespace detail

// feature_mask is rasterized at the feature rate ([T x 4]); encoder_mask at
// the post-subsampling rate ([T/2 x 4]). Long inputs are cut at fixed window
// boundaries; decoded timestamps are shifted by the window offset.
inline TranscribeResult transcribe_target(const Model& model, const Tensor& features, const StnoMask& feature_mask,
                                          const StnoMask& encoder_mask, const BeamSearchConfig& beam_cfg,
                                          const std::string& session_id, const std::string& speaker) {
    const ModelConfig& cfg = model.config;
    const int total = features.shape[0];
    require_dim(feature_mask.num_frames() == total, "transcribe: feature mask length mismatch");
    require_dim(encoder_mask.num_frames() == total / 2, "transcribe: encoder mask length mismatch");
    const int window = cfg.max_feature_frames();

    TranscribeResult result;
    for (int w0 = 0; w0 < total; w0 += window) {
        int w1 = std::min(total, w0 + window);
        if ((w1 - w0) % 2 == 1) w1 -= 1;  // encoder needs an even frame count
        if (w1 <= w0) break;
        result.windows += 1;
        try {
            Tensor feats = slice_rows(features, w0, w1);
            StnoMask fmask = detail::slice_mask(feature_mask, w0, w1);
            StnoMask emask = detail::slice_mask(encoder_mask, w0 / 2, w1 / 2);
            ConditioningInput cond;
            if (cfg.use_input_mask()) cond.feature_mask = &fmask;
            if (cfg.use_fddt() || cfg.use_qkb()) cond.encoder_mask = &emask;
            Tensor enc_h = run_encoder(model, feats, cond);
            Tensor ctc_logp = run_ctc_head(model, enc_h);
            BeamSearchResult decoded = joint_beam_search(model, enc_h, ctc_logp,
                                                         cond.encoder_mask, beam_cfg);
            if (decoded.nbest.empty()) continue;
            const double off_s = w0 / cfg.feature_fps;
            const double end_s = w1 / cfg.feature_fps;
            auto segs = tokens_to_segments(decoded.nbest[0].tokens, model.vocab, off_s, end_s, session_id, speaker);
            result.segments.insert(result.segments.end(), segs.begin(), segs.end());
        } catch (const Error&) {
            result.failed_windows += 1;
        }
    }
    return result;
}

// Decodes every target speaker of one recording; with co-attention enabled
// the per-speaker encoder outputs interact before decoding.
inline TranscribeResult transcribe_recording(const Model& model, const Tensor& features,
                                             const SpeakerActivity& feat_activity,
                                             const SpeakerActivity& enc_activity,
                                             const BeamSearchConfig& beam_cfg, const std::string& session_id,
                                             std::vector<NBestRecord>* nbest_out = nullptr) {
    const ModelConfig& cfg = model.config;
    require(feat_activity.num_frames() == features.shape[0], "transcribe: activity frame mismatch");
    const int total = features.shape[0];
    const int window = cfg.max_feature_frames();
    const int S = feat_activity.num_speakers();

    TranscribeResult result;
    for (int w0 = 0; w0 < total; w0 += window) {
        int w1 = std::min(total, w0 + window);
        if ((w1 - w0) % 2 == 1) w1 -= 1;
        if (w1 <= w0) break;
        result.windows += 1;

        Tensor feats = slice_rows(features, w0, w1);
        SpeakerActivity feat_act_w = feat_activity;
        feat_act_w.values = Tensor::zeros({S, w1 - w0});
        SpeakerActivity enc_act_w = enc_activity;
        enc_act_w.values = Tensor::zeros({S, (w1 - w0) / 2});
        for (int s = 0; s < S; ++s) {
            for (int t = w0; t < w1; ++t) feat_act_w.values.at(s, t - w0) = feat_activity.values.at(s, t);
            for (int t = w0 / 2; t < w1 / 2; ++t) enc_act_w.values.at(s, t - w0 / 2) = enc_activity.values.at(s, t);
        }

        std::vector<StnoMask> fmasks, emasks;
        std::vector<Tensor> enc_outs;
        for (int s = 0; s < S; ++s) {
            fmasks.push_back(stno_mask(feat_act_w, s));
            emasks.push_back(stno_mask(enc_act_w, s));
        }
        try {
            for (int s = 0; s < S; ++s) {
                ConditioningInput cond;
                if (cfg.use_input_mask()) cond.feature_mask = &fmasks[static_cast<size_t>(s)];
                if (cfg.use_fddt() || cfg.use_qkb()) cond.encoder_mask = &emasks[static_cast<size_t>(s)];
                enc_outs.push_back(run_encoder(model, feats, cond));
            }
            if (cfg.co_attention && S > 1) enc_outs = co_attention_forward(cfg, model.params, enc_outs);
            for (int s = 0; s < S; ++s) {
                Tensor ctc_logp = run_ctc_head(model, enc_outs[static_cast<size_t>(s)]);
                const StnoMask* emask = (cfg.use_fddt() || cfg.use_qkb()) ? &emasks[static_cast<size_t>(s)] : nullptr;
                BeamSearchResult decoded =
                    joint_beam_search(model, enc_outs[static_cast<size_t>(s)], ctc_logp, emask, beam_cfg);
                if (nbest_out != nullptr)
                    nbest_out->push_back({session_id, feat_activity.speaker_labels[static_cast<size_t>(s)],
                                          result.windows - 1, decoded.nbest});
                if (decoded.nbest.empty()) continue;
                const double off_s = w0 / cfg.feature_fps;
                const double end_s = w1 / cfg.feature_fps;
                auto segs = tokens_to_segments(decoded.nbest[0].tokens, model.vocab, off_s, end_s, session_id,
                                               feat_activity.speaker_labels[static_cast<size_t>(s)]);
                result.segments.insert(result.segments.end(), segs.begin(), segs.end());
            }
        } catch (const Error&) {
            result.failed_windows += 1;
        }
    }
    return result;
}

}  // namespace tsasr
