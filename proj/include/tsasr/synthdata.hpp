#pragma once

// Deterministic synthetic multi-speaker corpus. Every speaker draws a voice
// (multiplicative signature plus offset direction) from a small pool; each
// character contributes a fixed feature pattern modulated by that voice over
// a fixed number of frames. Overlapped regions are the exact sum of the
// active speakers' contributions and silence is exactly zero, so additive
// mixing holds bit-for-bit. A proportional controller steers the realized
// overlap fraction toward the configured target.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsasr/checkpoint.hpp"
#include "tsasr/diarization.hpp"
#include "tsasr/metrics.hpp"

namespace tsasr {

struct SynthConfig {
    int num_recordings = 1000;
    int speakers_min = 2;
    int speakers_max = 2;
    double overlap_target = 0.3;  // fraction of all frames with >= 2 active speakers
    std::string word_chars = "abcdefghijklmnopqrstuvwxyz";
    int feat_dim = 16;
    double frame_rate = 50.0;
    uint64_t seed = 1234;
    int utt_per_speaker_min = 1;
    int utt_per_speaker_max = 2;
    int words_min = 2;
    int words_max = 3;
    int word_len_min = 2;
    int word_len_max = 4;
    int frames_per_char = 12;
    int voice_pool = 6;
    double train_fraction = 0.90;
    double dev_fraction = 0.05;
    bool case_simulation = false;

    void validate() const {
        require(num_recordings >= 1, "synth: need at least one recording");
        require(speakers_min >= 1 && speakers_max >= speakers_min, "synth: bad speaker range");
        if (!(overlap_target >= 0.0 && overlap_target < 1.0))
            throw ConfigError("synth: overlap fraction must lie in [0,1)");
        if (overlap_target > 0.6)
            throw ConfigError("synth: overlap target above 0.6 is infeasible for these utterance lengths");
        if (overlap_target > 0.0 && speakers_max < 2)
            throw ConfigError("synth: overlap needs at least two speakers");
        require(feat_dim >= 4, "synth: feature dim too small");
        require(frames_per_char >= 2, "synth: frames per char too small");
        require(word_len_min >= 1 && word_len_max >= word_len_min, "synth: bad word length range");
        require(words_min >= 1 && words_max >= words_min, "synth: bad words range");
        require(utt_per_speaker_min >= 1 && utt_per_speaker_max >= utt_per_speaker_min, "synth: bad utterance range");
        require(voice_pool >= speakers_max, "synth: voice pool smaller than speakers per recording");
        require(train_fraction > 0 && dev_fraction >= 0 && train_fraction + dev_fraction < 1.0,
                "synth: bad split fractions");
    }

    nlohmann::json to_json() const {
        return {{"num_recordings", num_recordings}, {"speakers_min", speakers_min}, {"speakers_max", speakers_max},
                {"overlap_target", overlap_target}, {"word_chars", word_chars},     {"feat_dim", feat_dim},
                {"frame_rate", frame_rate},         {"seed", seed},                 {"utt_per_speaker_min", utt_per_speaker_min},
                {"utt_per_speaker_max", utt_per_speaker_max}, {"words_min", words_min}, {"words_max", words_max},
                {"word_len_min", word_len_min},     {"word_len_max", word_len_max}, {"frames_per_char", frames_per_char},
                {"voice_pool", voice_pool},         {"train_fraction", train_fraction}, {"dev_fraction", dev_fraction},
                {"case_simulation", case_simulation}};
    }

    static SynthConfig from_json(const nlohmann::json& j) {
        SynthConfig c;
        c.num_recordings = j.at("num_recordings");
        c.speakers_min = j.at("speakers_min");
        c.speakers_max = j.at("speakers_max");
        c.overlap_target = j.at("overlap_target");
        c.word_chars = j.at("word_chars").get<std::string>();
        c.feat_dim = j.at("feat_dim");
        c.frame_rate = j.at("frame_rate");
        c.seed = j.at("seed");
        c.utt_per_speaker_min = j.at("utt_per_speaker_min");
        c.utt_per_speaker_max = j.at("utt_per_speaker_max");
        c.words_min = j.at("words_min");
        c.words_max = j.at("words_max");
        c.word_len_min = j.at("word_len_min");
        c.word_len_max = j.at("word_len_max");
        c.frames_per_char = j.at("frames_per_char");
        c.voice_pool = j.at("voice_pool");
        c.train_fraction = j.at("train_fraction");
        c.dev_fraction = j.at("dev_fraction");
        c.case_simulation = j.at("case_simulation");
        return c;
    }
};

struct SynthUtterance {
    std::string text;  // words joined by single spaces
    int start_frame = 0;
    int end_frame = 0;
};

struct SynthRecording {
    std::string id;
    int frames = 0;  // even
    Tensor features;                                    // [T x F]
    std::vector<std::string> speakers;                  // rec-local labels
    std::vector<int> voices;                            // voice index per speaker
    std::vector<std::vector<SynthUtterance>> utterances;  // per speaker, time order

    std::vector<DiarizationSegment> segments(double fps) const {
        std::vector<DiarizationSegment> out;
        for (size_t s = 0; s < speakers.size(); ++s)
            for (const auto& u : utterances[s])
                out.push_back({speakers[s], u.start_frame / fps, u.end_frame / fps, id});
        return out;
    }
};

struct SynthStats {
    double silence = 0.0;   // fractions of all frames
    double one_speaker = 0.0;
    double overlap = 0.0;
    int64_t frames = 0;
};

struct SynthDataset {
    SynthConfig config;
    std::vector<SynthRecording> recordings;
    SynthStats stats;
    std::vector<std::string> train_ids, dev_ids, test_ids;
};

// ---------------------------------------------------------------------------
// Voice bank
// ---------------------------------------------------------------------------

struct VoiceBank {
    std::vector<Tensor> char_pattern;  // per charset char (+1 for space), [F]
    std::vector<Tensor> signature;     // per voice, [F], multiplicative
    std::vector<Tensor> offset;        // per voice, [F]
    std::string chars;                 // word chars + ' '

    int char_index(char c) const {
        const size_t p = chars.find(c);
        require(p != std::string::npos, std::string("voice bank: unknown char '") + c + "'");
        return static_cast<int>(p);
    }

    // contribution of one voice speaking char c, [F]
    Tensor frame(int voice, char c) const {
        const Tensor& pat = char_pattern[static_cast<size_t>(char_index(c))];
        Tensor out = mul(pat, signature[static_cast<size_t>(voice)]);
        return add(out, offset[static_cast<size_t>(voice)]);
    }
};

inline VoiceBank make_voice_bank(const SynthConfig& cfg) {
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    VoiceBank bank;
    bank.chars = cfg.word_chars + ' ';
    std::uniform_int_distribution<int> sign(0, 1);
    for (size_t c = 0; c < bank.chars.size(); ++c) {
        Tensor pat({cfg.feat_dim});
        for (double& v : pat.data) v = sign(rng) ? 0.7 : -0.7;
        bank.char_pattern.push_back(std::move(pat));
    }
    std::uniform_real_distribution<double> off_dist(-0.15, 0.15);
    for (int v = 0; v < cfg.voice_pool; ++v) {
        bank.signature.push_back(Tensor::uniform({cfg.feat_dim}, rng, 0.6, 1.4));
        Tensor off({cfg.feat_dim});
        for (double& x : off.data) x = off_dist(rng);
        off.data[static_cast<size_t>(v % cfg.feat_dim)] += 1.4;  // distinct per-voice direction
        bank.offset.push_back(std::move(off));
    }
    return bank;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

inline std::string random_word(std::mt19937_64& rng, const SynthConfig& cfg) {
    std::uniform_int_distribution<int> len(cfg.word_len_min, cfg.word_len_max);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(cfg.word_chars.size()) - 1);
    const int n = len(rng);
    std::string w;
    w.reserve(static_cast<size_t>(n));
    char prev = '\0';
    for (int i = 0; i < n; ++i) {
        char c = cfg.word_chars[static_cast<size_t>(pick(rng))];
        while (c == prev) c = cfg.word_chars[static_cast<size_t>(pick(rng))];  // no double letters
        w.push_back(c);
        prev = c;
    }
    return w;
}

inline std::string random_utterance(std::mt19937_64& rng, const SynthConfig& cfg) {
    std::uniform_int_distribution<int> nwords(cfg.words_min, cfg.words_max);
    const int n = nwords(rng);
    std::string text;
    for (int i = 0; i < n; ++i) {
        if (i) text += ' ';
        text += random_word(rng, cfg);
    }
    return text;
}

}  // namespace detail

inline void render_contribution(const VoiceBank& bank, int voice, const SynthUtterance& utt, int fpc, Tensor& into) {
    int frame = utt.start_frame;
    for (char c : utt.text) {
        const Tensor f = bank.frame(voice, c);
        for (int k = 0; k < fpc; ++k) {
            double* row = into.row_ptr(frame);
            for (int j = 0; j < f.shape[0]; ++j) row[j] += f.data[static_cast<size_t>(j)];
            ++frame;
        }
    }
    require(frame == utt.end_frame, "synth: utterance length inconsistent");
}

// Per-speaker feature component of one recording; the stored mixture is the
// exact sum of these.
inline Tensor speaker_contribution(const SynthConfig& cfg, const VoiceBank& bank, const SynthRecording& rec,
                                   int speaker) {
    Tensor out = Tensor::zeros({rec.frames, cfg.feat_dim});
    for (const auto& utt : rec.utterances[static_cast<size_t>(speaker)])
        render_contribution(bank, rec.voices[static_cast<size_t>(speaker)], utt, cfg.frames_per_char, out);
    return out;
}

inline SynthRecording synth_recording(const SynthConfig& cfg, const VoiceBank& bank, int index) {
    std::mt19937_64 rng(cfg.seed + 0x517cc1b727220a95ULL * static_cast<uint64_t>(index + 1));
    SynthRecording rec;
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "rec_%05d", index);
        rec.id = buf;
    }

    std::uniform_int_distribution<int> sdist(cfg.speakers_min, cfg.speakers_max);
    const int S = sdist(rng);
    std::vector<int> pool(static_cast<size_t>(cfg.voice_pool));
    for (int v = 0; v < cfg.voice_pool; ++v) pool[static_cast<size_t>(v)] = v;
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int s = 0; s < S; ++s) {
        rec.speakers.push_back("spk" + std::to_string(s));
        rec.voices.push_back(pool[static_cast<size_t>(s)]);
    }
    rec.utterances.assign(static_cast<size_t>(S), {});

    // draw utterance texts, then place them round-robin across speakers;
    // high overlap targets need longer chains to be reachable, so the
    // utterance count floor rises with the target
    int min_u = cfg.utt_per_speaker_min, max_u = cfg.utt_per_speaker_max;
    if (cfg.overlap_target > 0.35) {
        min_u = std::max(min_u, 2);
        max_u = std::max(max_u, 3);
    }
    if (cfg.overlap_target > 0.45) {
        min_u = std::max(min_u, 3);
        max_u = std::max(max_u, 4);
    }
    std::uniform_int_distribution<int> nutt(min_u, max_u);
    std::vector<int> per_speaker(static_cast<size_t>(S));
    int total_utts = 0;
    for (int s = 0; s < S; ++s) {
        per_speaker[static_cast<size_t>(s)] = nutt(rng);
        total_utts += per_speaker[static_cast<size_t>(s)];
    }

    std::uniform_int_distribution<int> gap_dist(8, 25), lead_dist(4, 12), tail_dist(10, 20);
    int cursor = lead_dist(rng);  // end of the latest utterance
    int prev_start = 0, prev_speaker = -1;
    int64_t overlap_frames = 0;
    std::vector<int> own_prev_end(static_cast<size_t>(S), -1);
    std::vector<int> remaining = per_speaker;
    int placed = 0, speaker_rr = 0;
    while (placed < total_utts) {
        while (remaining[static_cast<size_t>(speaker_rr)] == 0) speaker_rr = (speaker_rr + 1) % S;
        const int s = speaker_rr;
        speaker_rr = (speaker_rr + 1) % S;
        remaining[static_cast<size_t>(s)] -= 1;

        SynthUtterance utt;
        utt.text = detail::random_utterance(rng, cfg);
        const int dur = static_cast<int>(utt.text.size()) * cfg.frames_per_char;

        int start;
        const int prev_dur = cursor - prev_start;
        // proportional controller: pick the overlap that lands the running
        // fraction on target, clamped to 85% of the shorter utterance and to
        // the speaker's own previous end (no self-overlap)
        double want = cfg.overlap_target * (cursor + dur) - static_cast<double>(overlap_frames);
        want /= (1.0 + cfg.overlap_target);
        int delta = std::max(0, static_cast<int>(want));
        delta = std::min({delta, static_cast<int>(0.85 * std::min(prev_dur, dur))});
        if (own_prev_end[static_cast<size_t>(s)] >= 0)
            delta = std::min(delta, cursor - own_prev_end[static_cast<size_t>(s)] - 2);
        if (placed == 0 || s == prev_speaker || cfg.overlap_target <= 0.0) delta = 0;
        if (delta > 0) {
            start = cursor - delta;
            overlap_frames += delta;
        } else {
            start = cursor + gap_dist(rng);
        }
        utt.start_frame = start;
        utt.end_frame = start + dur;
        rec.utterances[static_cast<size_t>(s)].push_back(utt);

        prev_start = start;
        prev_speaker = s;
        own_prev_end[static_cast<size_t>(s)] = utt.end_frame;
        cursor = std::max(cursor, utt.end_frame);
        ++placed;
    }
    rec.frames = cursor + tail_dist(rng);
    if (rec.frames % 2 == 1) rec.frames += 1;

    rec.features = Tensor::zeros({rec.frames, cfg.feat_dim});
    for (int s = 0; s < S; ++s)
        for (const auto& utt : rec.utterances[static_cast<size_t>(s)])
            render_contribution(bank, rec.voices[static_cast<size_t>(s)], utt, cfg.frames_per_char, rec.features);
    return rec;
}

struct ActivityCounts {
    int64_t silence = 0, one_speaker = 0, overlap = 0, frames = 0;
};

inline ActivityCounts activity_counts(const SpeakerActivity& act) {
    ActivityCounts c;
    c.frames = act.num_frames();
    for (int t = 0; t < act.num_frames(); ++t) {
        int active = 0;
        for (int s = 0; s < act.num_speakers(); ++s)
            if (act.values.at(s, t) >= 0.5) ++active;
        if (active == 0) ++c.silence;
        else if (active == 1) ++c.one_speaker;
        else ++c.overlap;
    }
    return c;
}

inline SynthStats activity_stats(const SpeakerActivity& act) {
    const ActivityCounts c = activity_counts(act);
    SynthStats st;
    st.frames = c.frames;
    st.silence = static_cast<double>(c.silence) / c.frames;
    st.one_speaker = static_cast<double>(c.one_speaker) / c.frames;
    st.overlap = static_cast<double>(c.overlap) / c.frames;
    return st;
}

inline SynthDataset synth_corpus(const SynthConfig& cfg) {
    cfg.validate();
    const VoiceBank bank = make_voice_bank(cfg);
    SynthDataset ds;
    ds.config = cfg;
    ActivityCounts total;
    for (int i = 0; i < cfg.num_recordings; ++i) {
        SynthRecording rec = synth_recording(cfg, bank, i);
        const SpeakerActivity act =
            activity_matrix(rec.segments(cfg.frame_rate), cfg.frame_rate, rec.frames / cfg.frame_rate);
        const ActivityCounts c = activity_counts(act);
        total.silence += c.silence;
        total.one_speaker += c.one_speaker;
        total.overlap += c.overlap;
        total.frames += c.frames;
        ds.recordings.push_back(std::move(rec));
    }
    ds.stats.frames = total.frames;
    ds.stats.silence = static_cast<double>(total.silence) / total.frames;
    ds.stats.one_speaker = static_cast<double>(total.one_speaker) / total.frames;
    ds.stats.overlap = static_cast<double>(total.overlap) / total.frames;

    const int n_train = static_cast<int>(cfg.num_recordings * cfg.train_fraction);
    const int n_dev = std::max(1, static_cast<int>(cfg.num_recordings * cfg.dev_fraction));
    for (int i = 0; i < cfg.num_recordings; ++i) {
        const std::string& id = ds.recordings[static_cast<size_t>(i)].id;
        if (i < n_train) ds.train_ids.push_back(id);
        else if (i < n_train + n_dev) ds.dev_ids.push_back(id);
        else ds.test_ids.push_back(id);
    }
    if (ds.test_ids.empty() && !ds.dev_ids.empty()) ds.test_ids.push_back(ds.dev_ids.back());
    return ds;
}

// Ground-truth STNO mask for one recording/speaker at an arbitrary rate.
inline StnoMask rasterize_reference(const SynthDataset& ds, const std::string& rec_id, const std::string& speaker,
                                    double frame_rate) {
    for (const auto& rec : ds.recordings) {
        if (rec.id != rec_id) continue;
        const auto segs = rec.segments(ds.config.frame_rate);
        const SpeakerActivity act = activity_matrix(segs, frame_rate, rec.frames / ds.config.frame_rate);
        for (size_t s = 0; s < act.speaker_labels.size(); ++s)
            if (act.speaker_labels[s] == speaker) return stno_mask(act, static_cast<int>(s));
        throw InputError("rasterize_reference: unknown speaker " + speaker);
    }
    throw InputError("rasterize_reference: unknown recording " + rec_id);
}

// ---------------------------------------------------------------------------
// Corpus on disk
// ---------------------------------------------------------------------------

inline std::vector<SegmentTranscript> reference_transcripts(const SynthDataset& ds) {
    std::vector<SegmentTranscript> out;
    const double fps = ds.config.frame_rate;
    for (const auto& rec : ds.recordings) {
        for (size_t s = 0; s < rec.speakers.size(); ++s) {
            for (const auto& utt : rec.utterances[s]) {
                SegmentTranscript seg;
                seg.session_id = rec.id;
                seg.speaker = rec.speakers[s];
                seg.start_time = utt.start_frame / fps;
                seg.end_time = utt.end_frame / fps;
                std::istringstream is(utt.text);
                std::string w;
                while (is >> w) seg.words.push_back(w);
                out.push_back(std::move(seg));
            }
        }
    }
    return out;
}

inline void save_corpus(const SynthDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "features");
    nlohmann::json meta = {{"kind", "tsasr-corpus"},
                           {"config", ds.config.to_json()},
                           {"stats",
                            {{"silence", ds.stats.silence},
                             {"one_speaker", ds.stats.one_speaker},
                             {"overlap", ds.stats.overlap},
                             {"frames", ds.stats.frames}}},
                           {"train", ds.train_ids},
                           {"dev", ds.dev_ids},
                           {"test", ds.test_ids}};
    {
        std::ofstream os(fs::path(dir) / "meta.json");
        require(os.good(), "synth: cannot write meta.json");
        os << meta.dump(2) << "\n";
    }
    std::vector<DiarizationSegment> all_segments;
    for (const auto& rec : ds.recordings) {
        save_checkpoint((fs::path(dir) / "features" / (rec.id + ".ckpt")).string(), {{"features", rec.features}},
                        {{"recording", rec.id}, {"frame_rate", ds.config.frame_rate}});
        const auto segs = rec.segments(ds.config.frame_rate);
        all_segments.insert(all_segments.end(), segs.begin(), segs.end());
    }
    {
        std::ofstream os(fs::path(dir) / "diarization.rttm");
        require(os.good(), "synth: cannot write diarization.rttm");
        os << format_rttm(all_segments);
    }
    {
        std::ofstream os(fs::path(dir) / "reference.json");
        require(os.good(), "synth: cannot write reference.json");
        os << segments_to_json(reference_transcripts(ds)).dump(2) << "\n";
    }
}

struct LoadedCorpus {
    SynthConfig config;
    std::vector<std::string> train_ids, dev_ids, test_ids;
    std::map<std::string, Tensor> features;
    std::vector<SegmentTranscript> reference;
    std::vector<DiarizationSegment> diarization;

    double duration_seconds(const std::string& rec_id) const {
        auto it = features.find(rec_id);
        require(it != features.end(), "corpus: unknown recording " + rec_id);
        return it->second.shape[0] / config.frame_rate;
    }
};

inline LoadedCorpus load_corpus(const std::string& dir) {
    namespace fs = std::filesystem;
    LoadedCorpus c;
    std::ifstream ms(fs::path(dir) / "meta.json");
    if (!ms.good()) throw InputError("corpus: missing meta.json in " + dir);
    nlohmann::json meta = nlohmann::json::parse(ms);
    c.config = SynthConfig::from_json(meta.at("config"));
    c.train_ids = meta.at("train").get<std::vector<std::string>>();
    c.dev_ids = meta.at("dev").get<std::vector<std::string>>();
    c.test_ids = meta.at("test").get<std::vector<std::string>>();
    for (const auto& ids : {c.train_ids, c.dev_ids, c.test_ids})
        for (const auto& id : ids) {
            Checkpoint ck = load_checkpoint((fs::path(dir) / "features" / (id + ".ckpt")).string());
            c.features[id] = ck.get("features");
        }
    {
        std::ifstream rs(fs::path(dir) / "reference.json");
        if (!rs.good()) throw InputError("corpus: missing reference.json");
        c.reference = segments_from_json(nlohmann::json::parse(rs));
    }
    {
        std::ifstream ds_(fs::path(dir) / "diarization.rttm");
        if (!ds_.good()) throw InputError("corpus: missing diarization.rttm");
        std::stringstream buf;
        buf << ds_.rdbuf();
        c.diarization = parse_rttm(buf.str());
    }
    return c;
}

}  // namespace tsasr
