#pragma once

// Losses and the three-phase training procedure: a CTC preheat that trains
// only the CTC head, an FDDT preheat that trains CTC + FDDT parameters with a
// raised learning rate on the FDDT group, and full fine-tuning. Early
// stopping monitors the development tcpWER. All reductions run in a fixed
// order, so a fixed seed reproduces checkpoints bit for bit.

#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "tsasr/ctc.hpp"
#include "tsasr/decoding.hpp"
#include "tsasr/model.hpp"
#include "tsasr/synthdata.hpp"

namespace tsasr {

struct TrainConfig {
    int batch_size = 8;
    int max_steps = 2500;
    int warmup_steps = 250;
    double peak_lr = 3e-4;
    double weight_decay = 1e-6;
    double ctc_weight = 0.3;  // loss-side lambda
    double fddt_lr_multiplier = 100.0;
    int eval_every = 0;  // 0: min(1 epoch, 500 steps)
    int patience = 5;    // early-stop patience in evaluations
    std::string phase = "full";  // ctc_preheat | fddt_preheat | full
    uint64_t seed = 1;
    double empty_target_fraction = 0.05;
    std::string mask_mode = "stno";  // stno | all_target
    int threads = 1;
    double grad_clip = 1.0;  // global gradient-norm clip, 0 disables
    BeamSearchConfig dev_beam{0.3, 2, 8, 72};
    double dev_collar = 5.0;
    int dev_decode_cap = 0;  // 0: decode the whole dev split at every evaluation

    void validate() const {
        require(batch_size >= 1 && max_steps >= 1 && warmup_steps >= 0, "train: bad step configuration");
        require(ctc_weight >= 0.0 && ctc_weight <= 1.0, "train: ctc_weight must lie in [0,1]");
        require(fddt_lr_multiplier >= 1.0, "train: fddt multiplier must be >= 1");
        require(phase == "ctc_preheat" || phase == "fddt_preheat" || phase == "full",
                "train: unknown phase '" + phase + "'");
        require(mask_mode == "stno" || mask_mode == "all_target", "train: unknown mask mode '" + mask_mode + "'");
        require(patience >= 1 && threads >= 1, "train: bad patience/threads");
    }
};

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

struct TrainSample {
    std::string rec_id;
    std::string speaker;
    Tensor features;  // [T x F]
    StnoMask feat_mask;
    StnoMask enc_mask;
    std::vector<std::vector<int>> decoder_variants;  // BOS ... EOS, one per casing variant
    std::vector<std::vector<int>> ctc_variants;      // char labels per variant
};

namespace detail {

inline std::vector<int> transcript_tokens(const Vocab& vocab, const std::vector<SegmentTranscript>& segs,
                                          bool uppercase) {
    std::vector<int> tokens = {Vocab::kBos};
    for (const auto& seg : segs) {
        tokens.push_back(vocab.timestamp_id(seg.start_time));
        std::string text;
        for (size_t w = 0; w < seg.words.size(); ++w) {
            if (w) text += ' ';
            text += seg.words[w];
        }
        if (uppercase) text = to_upper_ascii(text);
        for (int id : vocab.encode(text)) tokens.push_back(id);
        tokens.push_back(vocab.timestamp_id(seg.end_time));
    }
    tokens.push_back(Vocab::kEos);
    return tokens;
}

inline std::vector<int> ctc_labels(const Vocab& vocab, const std::vector<SegmentTranscript>& segs, bool uppercase) {
    std::string text;
    for (size_t i = 0; i < segs.size(); ++i) {
        if (i) text += ' ';
        for (size_t w = 0; w < segs[i].words.size(); ++w) {
            if (w) text += ' ';
            text += segs[i].words[w];
        }
    }
    if (uppercase) text = to_upper_ascii(text);
    return vocab.encode(text);
}

}  // namespace detail

// One sample per (recording, speaker); a deterministic fraction of extra
// inactive-target samples teaches the model to emit nothing when the target
// never speaks.
inline std::vector<TrainSample> build_samples(const LoadedCorpus& corpus, const std::vector<std::string>& ids,
                                              const Vocab& vocab, const ModelConfig& mcfg,
                                              const std::string& mask_mode, double empty_target_fraction) {
    auto by_session = group_by_session(corpus.reference);
    std::map<std::string, std::vector<DiarizationSegment>> diar_by_rec;
    for (const auto& seg : corpus.diarization) diar_by_rec[seg.recording].push_back(seg);

    std::vector<TrainSample> samples;
    int empty_budget_counter = 0;
    for (const auto& id : ids) {
        const Tensor& feats = corpus.features.at(id);
        const double duration = corpus.duration_seconds(id);
        const auto& diar = diar_by_rec.at(id);
        const SpeakerActivity feat_act = activity_matrix(diar, mcfg.feature_fps, duration);
        const SpeakerActivity enc_act = activity_matrix(diar, mcfg.encoder_fps(), duration);
        require(feat_act.num_frames() == feats.shape[0], "build_samples: activity/feature mismatch");

        std::map<std::string, std::vector<SegmentTranscript>> by_speaker;
        for (const auto& seg : by_session.at(id)) by_speaker[seg.speaker].push_back(seg);

        for (size_t s = 0; s < feat_act.speaker_labels.size(); ++s) {
            const std::string& spk = feat_act.speaker_labels[s];
            TrainSample sample;
            sample.rec_id = id;
            sample.speaker = spk;
            sample.features = feats;
            if (mask_mode == "all_target") {
                sample.feat_mask = stno_mask_all_target(feat_act.num_frames());
                sample.enc_mask = stno_mask_all_target(enc_act.num_frames());
            } else {
                sample.feat_mask = stno_mask(feat_act, static_cast<int>(s));
                sample.enc_mask = stno_mask(enc_act, static_cast<int>(s));
            }
            auto segs = by_speaker.at(spk);
            std::stable_sort(segs.begin(), segs.end(), [](const SegmentTranscript& a, const SegmentTranscript& b) {
                return a.start_time < b.start_time;
            });
            sample.decoder_variants.push_back(detail::transcript_tokens(vocab, segs, false));
            sample.ctc_variants.push_back(detail::ctc_labels(vocab, segs, false));
            if (corpus.config.case_simulation) {
                sample.decoder_variants.push_back(detail::transcript_tokens(vocab, segs, true));
                sample.ctc_variants.push_back(detail::ctc_labels(vocab, segs, true));
            }
            samples.push_back(std::move(sample));
        }

        // inactive-target sample with an empty transcript
        if (empty_target_fraction > 0.0) {
            empty_budget_counter += 1;
            if (static_cast<double>(empty_budget_counter) * empty_target_fraction >= 1.0) {
                empty_budget_counter = 0;
                TrainSample sample;
                sample.rec_id = id;
                sample.speaker = "__inactive__";
                sample.features = feats;
                sample.feat_mask = stno_mask_inactive_target(feat_act);
                sample.enc_mask = stno_mask_inactive_target(enc_act);
                sample.decoder_variants.push_back({Vocab::kBos, Vocab::kEos});
                sample.ctc_variants.push_back({});
                samples.push_back(std::move(sample));
            }
        }
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct SampleLossParts {
    double total = 0.0;
    double ce = 0.0;
    double ctc = 0.0;
    int chosen_variant = 0;
};

// (1 - w) * min over label variants of per-token cross entropy
// + w * length-normalized CTC loss (canonical variant labels).
inline Var combined_loss(const ModelConfig& cfg, const Bound& b, const TrainSample& sample, double ctc_weight,
                         SampleLossParts* parts = nullptr) {
    require(!sample.decoder_variants.empty(), "combined_loss: empty label variant list");
    GradTape& tape = *b.tape;

    ConditioningInput cond;
    if (cfg.use_input_mask()) cond.feature_mask = &sample.feat_mask;
    if (cfg.use_fddt() || cfg.use_qkb()) cond.encoder_mask = &sample.enc_mask;
    Var enc_h = encoder_forward(cfg, b, tape.constant(sample.features), cond);

    Tensor cross_bias;
    const Tensor* bias_ptr = nullptr;
    if (cfg.qkb_cross()) {
        cross_bias = qkb_bias_vector(sample.enc_mask, cfg.qkb.c);
        bias_ptr = &cross_bias;
    }

    // dual-case rule: evaluate every variant, keep the smaller loss branch
    Var best_ce{-1, nullptr};
    double best_value = 0.0;
    int best_idx = -1;
    for (size_t vi = 0; vi < sample.decoder_variants.size(); ++vi) {
        const auto& tokens = sample.decoder_variants[vi];
        require(tokens.size() >= 2 && tokens.front() == Vocab::kBos && tokens.back() == Vocab::kEos,
                "combined_loss: variant must be BOS ... EOS");
        const std::vector<int> input(tokens.begin(), tokens.end() - 1);
        const std::vector<int> target(tokens.begin() + 1, tokens.end());
        Var logits = decoder_forward(cfg, b, enc_h, input, bias_ptr);
        Var ce = scale(nll_rows(log_softmax_rows(logits), target), 1.0 / static_cast<double>(target.size()));
        const double value = ce.value().data[0];
        if (best_idx < 0 || value < best_value) {
            best_idx = static_cast<int>(vi);
            best_value = value;
            best_ce = ce;
        }
    }

    Var ctc_logits = ctc_head_forward(cfg, b, enc_h);
    const int t_ctc = ctc_logits.value().shape[0];
    const auto& labels = sample.ctc_variants[static_cast<size_t>(best_idx) < sample.ctc_variants.size()
                                                 ? static_cast<size_t>(best_idx)
                                                 : 0];
    Var ctc = ctc_nll(log_softmax_rows(ctc_logits), labels, Vocab::kBlank);
    const double ctc_norm = labels.empty() ? static_cast<double>(t_ctc) : static_cast<double>(labels.size());
    ctc = scale(ctc, 1.0 / ctc_norm);

    Var total = add(scale(best_ce, 1.0 - ctc_weight), scale(ctc, ctc_weight));
    if (parts != nullptr) {
        parts->ce = best_value;
        parts->ctc = ctc.value().data[0];
        parts->chosen_variant = best_idx;
        parts->total = total.value().data[0];
    }
    return total;
}

// Forward-only batch loss (dev metric).
inline double batch_loss_value(const Model& model, const std::vector<TrainSample>& samples, double ctc_weight) {
    if (samples.empty()) return 0.0;
    double total = 0.0;
    for (const auto& s : samples) {
        GradTape tape;
        tape.recording = false;
        Bound b = bind_params(tape, model.params, [](const std::string&) { return false; });
        total += combined_loss(model.config, b, s, ctc_weight).value().data[0];
    }
    return total / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with decoupled weight decay
// ---------------------------------------------------------------------------

class AdamW {
  public:
    AdamW(double weight_decay) : weight_decay_(weight_decay) {}

    void step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr,
              const std::function<double(const std::string&)>& lr_scale = nullptr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& [name, grad] : grads) {
            Tensor& p = params.get(name);
            Tensor& m = state(m_, name, p.shape);
            Tensor& v = state(v_, name, p.shape);
            const double eff_lr = lr * (lr_scale ? lr_scale(name) : 1.0);
            for (size_t i = 0; i < p.data.size(); ++i) {
                const double g = grad.data[i];
                m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * g;
                v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * g * g;
                const double mhat = m.data[i] / bc1;
                const double vhat = v.data[i] / bc2;
                p.data[i] -= eff_lr * weight_decay_ * p.data[i];
                p.data[i] -= eff_lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

  private:
    Tensor& state(std::map<std::string, Tensor>& store, const std::string& name, const std::vector<int>& shape) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor::zeros(shape)).first;
        return it->second;
    }

    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_;
    std::map<std::string, Tensor> m_, v_;
    int64_t t_ = 0;
};

// Linear warmup then linear decay to zero at max_steps.
inline double lr_at_step(const TrainConfig& cfg, int step) {
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (cfg.max_steps <= cfg.warmup_steps) return cfg.peak_lr;
    const double frac = static_cast<double>(cfg.max_steps - step) /
                        static_cast<double>(cfg.max_steps - cfg.warmup_steps);
    return cfg.peak_lr * std::max(0.0, frac);
}

// ---------------------------------------------------------------------------
// Phase runner
// ---------------------------------------------------------------------------

struct PhaseResult {
    ParamStore best_params;
    ParamStore final_params;
    std::vector<nlohmann::json> log;  // one record per step/eval event
    double best_dev_tcpwer = std::numeric_limits<double>::infinity();
    bool aborted_nonfinite = false;
    int steps_run = 0;
};

namespace detail {

inline std::function<bool(const std::string&)> phase_trainable(const std::string& phase) {
    if (phase == "ctc_preheat") return [](const std::string& n) { return is_ctc_param(n); };
    if (phase == "fddt_preheat") return [](const std::string& n) { return is_ctc_param(n) || is_fddt_param(n); };
    return [](const std::string&) { return true; };
}

inline ParamStore copy_params(const ParamStore& p) {
    ParamStore out;
    for (const auto& [name, t] : p.items()) out.add(name, t);
    return out;
}

// Decodes the dev split and scores tcpWER against the reference.
inline double dev_tcpwer(const Model& model, const LoadedCorpus& corpus, const TrainConfig& cfg,
                         const std::string& mask_mode) {
    std::map<std::string, std::vector<DiarizationSegment>> diar_by_rec;
    for (const auto& seg : corpus.diarization) diar_by_rec[seg.recording].push_back(seg);
    std::vector<std::string> dev_ids = corpus.dev_ids;
    if (cfg.dev_decode_cap > 0 && static_cast<int>(dev_ids.size()) > cfg.dev_decode_cap)
        dev_ids.resize(static_cast<size_t>(cfg.dev_decode_cap));
    std::vector<SegmentTranscript> hyps, refs;
    for (const auto& seg : corpus.reference)
        if (std::find(dev_ids.begin(), dev_ids.end(), seg.session_id) != dev_ids.end())
            refs.push_back(seg);
    for (const auto& id : dev_ids) {
        const Tensor& feats = corpus.features.at(id);
        const double duration = corpus.duration_seconds(id);
        SpeakerActivity feat_act = activity_matrix(diar_by_rec.at(id), model.config.feature_fps, duration);
        SpeakerActivity enc_act = activity_matrix(diar_by_rec.at(id), model.config.encoder_fps(), duration);
        if (mask_mode == "all_target") {
            for (double& v : feat_act.values.data) v = 1.0;
            for (double& v : enc_act.values.data) v = 1.0;
        }
        auto res = transcribe_recording(model, feats, feat_act, enc_act, cfg.dev_beam, id);
        hyps.insert(hyps.end(), res.segments.begin(), res.segments.end());
    }
    auto report = corpus_wer(refs, hyps, WerMode::kCp, /*time_constrained=*/true, cfg.dev_collar);
    return report.rate;
}

}  // namespace detail

// Runs one training phase. ctc_preheat freezes everything but the CTC head;
// fddt_preheat trains CTC + FDDT with the FDDT learning-rate multiplier; full
// trains every parameter. Early stopping on dev tcpWER, patience in
// evaluations; non-finite losses abort with the last good parameters.
inline PhaseResult run_phase(const LoadedCorpus& corpus, Model& model, const TrainConfig& cfg) {
    cfg.validate();
    model.config.validate();

    std::vector<TrainSample> train_samples = build_samples(corpus, corpus.train_ids, model.vocab, model.config,
                                                           cfg.mask_mode, cfg.empty_target_fraction);
    std::vector<std::string> dev_loss_ids = corpus.dev_ids;
    if (cfg.dev_decode_cap > 0 && static_cast<int>(dev_loss_ids.size()) > cfg.dev_decode_cap)
        dev_loss_ids.resize(static_cast<size_t>(cfg.dev_decode_cap));
    std::vector<TrainSample> dev_samples = build_samples(corpus, dev_loss_ids, model.vocab, model.config,
                                                         cfg.mask_mode, 0.0);
    require(!train_samples.empty(), "run_phase: no training samples");

    const auto trainable = detail::phase_trainable(cfg.phase);
    const bool fddt_boost = (cfg.phase == "fddt_preheat");
    auto lr_scale = [&](const std::string& name) {
        return (fddt_boost && is_fddt_param(name)) ? cfg.fddt_lr_multiplier : 1.0;
    };

    const int epoch_steps = std::max<int>(1, static_cast<int>(train_samples.size()) / cfg.batch_size);
    const int eval_every = cfg.eval_every > 0 ? cfg.eval_every : std::min(epoch_steps, 500);

    PhaseResult result;
    AdamW opt(cfg.weight_decay);
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0xa5a5a5a5ULL);

    std::vector<size_t> order(train_samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // trigger shuffle on first use

    result.best_params = detail::copy_params(model.params);
    int evals_without_improvement = 0;

    auto evaluate = [&](int step) {
        const double dloss = batch_loss_value(model, dev_samples, cfg.ctc_weight);
        const double dwer = detail::dev_tcpwer(model, corpus, cfg, cfg.mask_mode);
        nlohmann::json rec = {{"event", "eval"}, {"step", step}, {"dev_loss", dloss}, {"dev_tcpwer", dwer}};
        result.log.push_back(rec);
        if (dwer < result.best_dev_tcpwer) {
            result.best_dev_tcpwer = dwer;
            result.best_params = detail::copy_params(model.params);
            evals_without_improvement = 0;
        } else {
            evals_without_improvement += 1;
        }
        return evals_without_improvement >= cfg.patience;
    };

    for (int step = 1; step <= cfg.max_steps; ++step) {
        // seeded shuffle per epoch, batches drawn consecutively
        std::vector<const TrainSample*> batch;
        for (int i = 0; i < cfg.batch_size; ++i) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            batch.push_back(&train_samples[order[cursor++]]);
        }

        // per-sample gradients, reduced in sample order for determinism
        std::vector<std::map<std::string, Tensor>> grads(batch.size());
        std::vector<double> losses(batch.size(), 0.0);
        std::vector<SampleLossParts> parts(batch.size());
        std::atomic<bool> bad{false};
        auto worker = [&](size_t begin, size_t end) {
            for (size_t i = begin; i < end && !bad.load(); ++i) {
                GradTape tape;
                Bound b = bind_params(tape, model.params, trainable);
                Var loss = combined_loss(model.config, b, *batch[i], cfg.ctc_weight, &parts[i]);
                const double lv = loss.value().data[0];
                losses[i] = lv;
                if (!std::isfinite(lv)) {
                    bad.store(true);
                    return;
                }
                tape.backward(loss);
                for (const auto& [name, id] : tape.parameters()) grads[i][name] = tape.grad(Var{id, &tape});
            }
        };
        if (cfg.threads <= 1 || batch.size() == 1) {
            worker(0, batch.size());
        } else {
            std::vector<std::thread> pool;
            const size_t chunk = (batch.size() + cfg.threads - 1) / cfg.threads;
            for (size_t b0 = 0; b0 < batch.size(); b0 += chunk)
                pool.emplace_back(worker, b0, std::min(batch.size(), b0 + chunk));
            for (auto& th : pool) th.join();
        }
        if (bad.load()) {
            result.aborted_nonfinite = true;
            break;
        }

        std::map<std::string, Tensor> total_grads;
        for (size_t i = 0; i < grads.size(); ++i) {
            for (auto& [name, g] : grads[i]) {
                auto it = total_grads.find(name);
                if (it == total_grads.end())
                    total_grads.emplace(name, g);
                else
                    for (size_t k = 0; k < g.data.size(); ++k) it->second.data[k] += g.data[k];
            }
        }
        bool finite = true;
        for (auto& [name, g] : total_grads) {
            for (double& v : g.data) v /= static_cast<double>(batch.size());
            finite = finite && g.all_finite();
        }
        if (!finite) {
            result.aborted_nonfinite = true;
            break;
        }
        if (cfg.grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& [name, g] : total_grads)
                for (double v : g.data) sq += v * v;
            const double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip) {
                const double f = cfg.grad_clip / norm;
                for (auto& [name, g] : total_grads)
                    for (double& v : g.data) v *= f;
            }
        }

        const double lr = lr_at_step(cfg, step);
        opt.step(model.params, total_grads, lr, lr_scale);
        result.steps_run = step;

        double mean_loss = 0.0, mean_ce = 0.0, mean_ctc = 0.0;
        for (size_t i = 0; i < losses.size(); ++i) {
            mean_loss += losses[i];
            mean_ce += parts[i].ce;
            mean_ctc += parts[i].ctc;
        }
        mean_loss /= static_cast<double>(losses.size());
        mean_ce /= static_cast<double>(losses.size());
        mean_ctc /= static_cast<double>(losses.size());
        result.log.push_back({{"event", "step"}, {"step", step}, {"lr", lr}, {"train_loss", mean_loss},
                              {"ce", mean_ce}, {"ctc", mean_ctc}});

        if (step % eval_every == 0 || step == cfg.max_steps) {
            if (evaluate(step)) break;  // early stop
        }
    }

    result.final_params = detail::copy_params(model.params);
    return result;
}

inline void write_metric_log(const std::string& path, const std::vector<nlohmann::json>& log) {
    std::ofstream os(path);
    require(os.good(), "cannot write metric log: " + path);
    for (const auto& rec : log) os << rec.dump() << "\n";
}

}  // namespace tsasr
