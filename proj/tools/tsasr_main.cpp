// tsasr command line: synth | train | decode | score | stno.
// Exit codes: 0 success, 1 configuration error (message names the offending
// key), 2 runtime failure.

#include <CLI11.hpp>

#include <cctype>
#include <filesystem>
#include <iostream>

#include "tsasr/config.hpp"
#include "tsasr/decoding.hpp"
#include "tsasr/metrics.hpp"
#include "tsasr/synthdata.hpp"
#include "tsasr/training.hpp"

namespace fs = std::filesystem;
using namespace tsasr;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
};

RunConfig make_run_config(const GlobalArgs& g) {
    RunConfig cfg = load_run_config(g.config_path, g.overrides);
    if (g.seed_set) cfg.seed = g.seed;
    if (g.threads > 0) cfg.threads = g.threads;
    propagate_seed(cfg);
    return cfg;
}

std::string normalize_word(const std::string& w) {
    std::string out;
    for (char c : w) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (std::isalnum(u) || c == '\'') out.push_back(static_cast<char>(std::tolower(u)));
    }
    return out;
}

std::vector<SegmentTranscript> normalize_segments(std::vector<SegmentTranscript> segs) {
    for (auto& s : segs) {
        std::vector<std::string> words;
        for (const auto& w : s.words) {
            std::string n = normalize_word(w);
            if (!n.empty()) words.push_back(std::move(n));
        }
        s.words = std::move(words);
        s.word_times.reset();  // equal-division timing after normalization
    }
    return segs;
}

std::vector<SegmentTranscript> read_segments(const std::string& path) {
    std::ifstream is(path);
    if (!is.good()) throw InputError("cannot open transcript file: " + path);
    return segments_from_json(nlohmann::json::parse(is));
}

std::vector<DiarizationSegment> read_rttm_file(const std::string& path) {
    std::ifstream is(path);
    if (!is.good()) throw InputError("cannot open rttm file: " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_rttm(buf.str());
}

double percent(double rate) { return 100.0 * rate; }

nlohmann::json counts_json(const WerCounts& c) {
    char pct[32];
    std::snprintf(pct, sizeof(pct), "%.4g", percent(c.rate()));
    return {{"substitutions", c.substitutions}, {"insertions", c.insertions}, {"deletions", c.deletions},
            {"ref_len", c.ref_len},             {"errors", c.errors()},       {"rate", c.rate()},
            {"percent", pct}};
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const GlobalArgs& g, const std::string& out_dir) {
    RunConfig cfg = make_run_config(g);
    SynthDataset ds = synth_corpus(cfg.data);
    save_corpus(ds, out_dir);
    nlohmann::json stats = {{"recordings", cfg.data.num_recordings},
                            {"silence", ds.stats.silence},
                            {"one_speaker", ds.stats.one_speaker},
                            {"overlap", ds.stats.overlap},
                            {"frames", ds.stats.frames},
                            {"out", out_dir}};
    std::cout << stats.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const GlobalArgs& g, const std::string& corpus_dir, const std::string& out_dir,
              const std::string& init_ckpt, std::string phases_arg) {
    RunConfig cfg = make_run_config(g);
    LoadedCorpus corpus = load_corpus(corpus_dir);

    // the corpus dictates the feature geometry
    cfg.model.feat_dim = corpus.config.feat_dim;
    cfg.model.feature_fps = corpus.config.frame_rate;
    cfg.model.validate();

    Model model = init_ckpt.empty() ? Model::init(cfg.model, cfg.seed) : Model::load(init_ckpt);
    fs::create_directories(out_dir);

    if (phases_arg.empty()) phases_arg = cfg.train_phases;
    std::vector<std::string> phases;
    std::stringstream ps(phases_arg);
    std::string phase;
    while (std::getline(ps, phase, ',')) {
        if (!phase.empty()) phases.push_back(phase);
    }
    if (phases.empty()) throw ConfigError("train: empty phase list (key train.phases)");

    for (const std::string& ph : phases) {
        TrainConfig tc = cfg.train;
        tc.phase = ph;
        tc.validate();
        std::cout << "phase " << ph << ": " << tc.max_steps << " max steps\n";
        PhaseResult res = run_phase(corpus, model, tc);
        // continue from the best-on-dev parameters
        model.params = res.best_params;
        const std::string ck = (fs::path(out_dir) / ("phase_" + ph + ".ckpt")).string();
        model.save(ck);
        write_metric_log((fs::path(out_dir) / ("phase_" + ph + ".log.jsonl")).string(), res.log);
        std::cout << "phase " << ph << " done: steps=" << res.steps_run
                  << " best_dev_tcpwer=" << res.best_dev_tcpwer
                  << (res.aborted_nonfinite ? " (aborted on non-finite loss)" : "") << "\n";
        if (res.aborted_nonfinite) {
            model.save((fs::path(out_dir) / "model.ckpt").string());
            return 2;
        }
    }
    model.save((fs::path(out_dir) / "model.ckpt").string());
    std::cout << "saved " << (fs::path(out_dir) / "model.ckpt").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

int cmd_decode(const GlobalArgs& g, const std::string& corpus_dir, const std::string& model_path,
               const std::string& diarization, const std::string& split, const std::string& mask_mode,
               const std::string& out_path, const std::string& nbest_path) {
    RunConfig cfg = make_run_config(g);
    LoadedCorpus corpus = load_corpus(corpus_dir);
    Model model = Model::load(model_path);

    std::vector<DiarizationSegment> diar =
        diarization == "oracle" ? corpus.diarization : read_rttm_file(diarization);
    std::map<std::string, std::vector<DiarizationSegment>> by_rec;
    for (const auto& seg : diar) by_rec[seg.recording].push_back(seg);

    std::vector<std::string> ids;
    if (split == "train") ids = corpus.train_ids;
    else if (split == "dev") ids = corpus.dev_ids;
    else if (split == "test") ids = corpus.test_ids;
    else if (split == "all") {
        ids = corpus.train_ids;
        ids.insert(ids.end(), corpus.dev_ids.begin(), corpus.dev_ids.end());
        ids.insert(ids.end(), corpus.test_ids.begin(), corpus.test_ids.end());
    } else {
        throw ConfigError("decode: unknown split '" + split + "'");
    }

    std::vector<SegmentTranscript> hyps;
    std::vector<NBestRecord> nbest;
    int failed = 0;
    for (const auto& id : ids) {
        auto it = by_rec.find(id);
        if (it == by_rec.end()) continue;  // no diarized speech for this recording
        const Tensor& feats = corpus.features.at(id);
        const double duration = corpus.duration_seconds(id);
        SpeakerActivity feat_act = activity_matrix(it->second, model.config.feature_fps, duration);
        SpeakerActivity enc_act = activity_matrix(it->second, model.config.encoder_fps(), duration);
        if (mask_mode == "all_target") {
            for (double& v : feat_act.values.data) v = 1.0;
            for (double& v : enc_act.values.data) v = 1.0;
        }
        auto res = transcribe_recording(model, feats, feat_act, enc_act, cfg.decode, id,
                                        nbest_path.empty() ? nullptr : &nbest);
        failed += res.failed_windows;
        hyps.insert(hyps.end(), res.segments.begin(), res.segments.end());
    }

    std::ofstream os(out_path);
    require(os.good(), "decode: cannot write " + out_path);
    os << segments_to_json(hyps).dump(2) << "\n";
    if (!nbest_path.empty()) {
        std::ofstream ns(nbest_path);
        require(ns.good(), "decode: cannot write " + nbest_path);
        ns << nbest_to_json(nbest, model.vocab).dump(2) << "\n";
    }
    std::cout << "decoded " << ids.size() << " recordings, " << hyps.size() << " segments"
              << (failed ? (", " + std::to_string(failed) + " failed windows") : "") << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

int cmd_score(const GlobalArgs& g, const std::string& metric, const std::string& ref_path,
              const std::string& hyp_path, double collar_flag, bool collar_set) {
    RunConfig cfg = make_run_config(g);
    if (cfg.metrics.utterance_groups)
        throw ConfigError("metrics.utterance_groups: utterance-group evaluation is not supported");
    const double collar = collar_set ? collar_flag : cfg.metrics.collar;

    nlohmann::json report;
    report["metric"] = metric;

    if (metric == "der") {
        auto res = der(read_rttm_file(ref_path), read_rttm_file(hyp_path), collar_set ? collar_flag : 0.0);
        if (!res.defined) {
            report["defined"] = false;
        } else {
            char pct[32];
            std::snprintf(pct, sizeof(pct), "%.4g", percent(res.der));
            report["defined"] = true;
            report["der"] = res.der;
            report["percent"] = pct;
            report["miss"] = res.miss / res.total_ref_time;
            report["false_alarm"] = res.false_alarm / res.total_ref_time;
            report["confusion"] = res.confusion / res.total_ref_time;
            report["ref_speech_seconds"] = res.total_ref_time;
        }
        std::cout << report.dump(2) << "\n";
        return 0;
    }

    auto refs = read_segments(ref_path);
    auto hyps = read_segments(hyp_path);
    if (cfg.metrics.normalize) {
        refs = normalize_segments(std::move(refs));
        hyps = normalize_segments(std::move(hyps));
    }

    auto run = [&](WerMode mode, bool tc) {
        auto rep = corpus_wer(refs, hyps, mode, tc, collar);
        nlohmann::json out = counts_json(rep.aggregate);
        nlohmann::json per = nlohmann::json::object();
        for (const auto& [session, counts] : rep.per_session) per[session] = counts_json(counts);
        out["per_session"] = std::move(per);
        if (tc) out["collar"] = collar;
        return out;
    };

    if (metric == "wer") {
        // speaker-agnostic single-stream WER: every segment joined in time order
        auto strip = [](std::vector<SegmentTranscript> segs) {
            for (auto& s : segs) s.speaker = "all";
            return segs;
        };
        auto rep = corpus_wer(strip(refs), strip(hyps), WerMode::kCp, false, collar);
        report["aggregate"] = counts_json(rep.aggregate);
    } else if (metric == "cpwer") {
        report["aggregate"] = run(WerMode::kCp, false);
    } else if (metric == "tcpwer") {
        report["aggregate"] = run(WerMode::kCp, true);
    } else if (metric == "orcwer") {
        report["aggregate"] = run(WerMode::kOrc, false);
    } else if (metric == "tcorcwer") {
        report["aggregate"] = run(WerMode::kOrc, true);
    } else if (metric == "all") {
        report["cpwer"] = run(WerMode::kCp, false);
        report["tcpwer"] = run(WerMode::kCp, true);
        report["orcwer"] = run(WerMode::kOrc, false);
        report["tcorcwer"] = run(WerMode::kOrc, true);
    } else {
        throw ConfigError("score: unknown metric '" + metric + "'");
    }
    std::cout << report.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// stno
// ---------------------------------------------------------------------------

int cmd_stno(const GlobalArgs& g, const std::string& rttm_path, int target, double frame_rate, double duration) {
    (void)g;
    auto segs = read_rttm_file(rttm_path);
    double dur = duration;
    if (dur <= 0.0) {
        for (const auto& s : segs) dur = std::max(dur, s.end);
    }
    SpeakerActivity act = activity_matrix(segs, frame_rate, dur);
    StnoMask mask = stno_mask(act, target);
    nlohmann::json rows = nlohmann::json::array();
    for (int t = 0; t < mask.num_frames(); ++t)
        rows.push_back({mask.p_s(t), mask.p_t(t), mask.p_n(t), mask.p_o(t)});
    nlohmann::json out = {{"target_index", target},
                          {"target_speaker", act.speaker_labels[static_cast<size_t>(target)]},
                          {"frame_rate", frame_rate},
                          {"order", "p_S p_T p_N p_O"},
                          {"rows", std::move(rows)}};
    std::cout << out.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy diarization-conditioned target-speaker ASR"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "config file (flat key=value sections)");
    app.add_option("--set", g.overrides, "override config entries, section.key=value");
    auto* seed_opt = app.add_option("--seed", g.seed, "seed for corpus generation and training");
    app.add_option("--threads", g.threads, "worker threads for batch gradients");

    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    std::string synth_out = "corpus";
    synth->add_option("--out", synth_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "run training phases on a corpus");
    std::string train_corpus, train_out = "run", train_init, train_phases;
    train->add_option("--corpus", train_corpus, "corpus directory")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--init", train_init, "initial checkpoint");
    train->add_option("--phases", train_phases, "comma list: ctc_preheat,fddt_preheat,full");

    auto* decode = app.add_subcommand("decode", "transcribe every (recording, speaker) pair");
    std::string dec_corpus, dec_model, dec_diar = "oracle", dec_split = "test", dec_mask = "stno";
    std::string dec_out = "hyp.json", dec_nbest;
    decode->add_option("--corpus", dec_corpus, "corpus directory")->required();
    decode->add_option("--model", dec_model, "model checkpoint")->required();
    decode->add_option("--diarization", dec_diar, "'oracle' or an RTTM path");
    decode->add_option("--split", dec_split, "train|dev|test|all");
    decode->add_option("--mask", dec_mask, "stno|all_target");
    decode->add_option("--out", dec_out, "hypothesis JSON output");
    decode->add_option("--nbest", dec_nbest, "n-best JSON output");

    auto* score = app.add_subcommand("score", "compute error metrics");
    std::string score_metric = "tcpwer", score_ref, score_hyp;
    double score_collar = 5.0;
    score->add_option("--metric", score_metric, "wer|cpwer|tcpwer|orcwer|tcorcwer|der|all");
    auto* collar_opt = score->add_option("--collar", score_collar, "collar seconds for tc metrics / der");
    score->add_option("ref", score_ref, "reference json (rttm for der)")->required();
    score->add_option("hyp", score_hyp, "hypothesis json (rttm for der)")->required();

    auto* stno_cmd = app.add_subcommand("stno", "dump STNO masks for an RTTM");
    std::string stno_rttm;
    int stno_target = 0;
    double stno_fps = 50.0, stno_duration = 0.0;
    stno_cmd->add_option("--diarization", stno_rttm, "RTTM path")->required();
    stno_cmd->add_option("--target", stno_target, "target speaker index");
    stno_cmd->add_option("--frame-rate", stno_fps, "frames per second");
    stno_cmd->add_option("--duration", stno_duration, "override duration seconds");

    try {
        app.parse(argc, argv);
        g.seed_set = seed_opt->count() > 0;
        if (synth->parsed()) return cmd_synth(g, synth_out);
        if (train->parsed()) return cmd_train(g, train_corpus, train_out, train_init, train_phases);
        if (decode->parsed())
            return cmd_decode(g, dec_corpus, dec_model, dec_diar, dec_split, dec_mask, dec_out, dec_nbest);
        if (score->parsed()) return cmd_score(g, score_metric, score_ref, score_hyp, score_collar, collar_opt->count() > 0);
        if (stno_cmd->parsed()) return cmd_stno(g, stno_rttm, stno_target, stno_fps, stno_duration);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
