#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "tsasr/synthdata.hpp"

using namespace tsasr;

static SynthConfig small_config() {
    SynthConfig cfg;
    cfg.num_recordings = 30;
    cfg.seed = 777;
    return cfg;
}

TEST_CASE("fixed seed gives byte-identical corpora") {
    SynthDataset a = synth_corpus(small_config());
    SynthDataset b = synth_corpus(small_config());
    REQUIRE(a.recordings.size() == b.recordings.size());
    for (size_t i = 0; i < a.recordings.size(); ++i) {
        REQUIRE(a.recordings[i].features.data == b.recordings[i].features.data);
        REQUIRE(a.recordings[i].frames == b.recordings[i].frames);
    }
    CHECK(a.stats.overlap == b.stats.overlap);
}

TEST_CASE("overlap target zero realizes zero overlap") {
    SynthConfig cfg = small_config();
    cfg.overlap_target = 0.0;
    SynthDataset ds = synth_corpus(cfg);
    CHECK(ds.stats.overlap == 0.0);
}

TEST_CASE("overlap controller lands near the target") {
    for (double target : {0.3, 0.5}) {
        SynthConfig cfg = small_config();
        cfg.num_recordings = 100;
        cfg.overlap_target = target;
        SynthDataset ds = synth_corpus(cfg);
        INFO("target " << target << " realized " << ds.stats.overlap);
        CHECK(std::fabs(ds.stats.overlap - target) < 0.05);
    }
}

TEST_CASE("infeasible configs are rejected") {
    SynthConfig cfg = small_config();
    cfg.overlap_target = 0.7;
    CHECK_THROWS_AS(synth_corpus(cfg), ConfigError);
    cfg.overlap_target = -0.1;
    CHECK_THROWS_AS(synth_corpus(cfg), ConfigError);
    cfg = small_config();
    cfg.speakers_min = cfg.speakers_max = 1;
    cfg.overlap_target = 0.2;
    CHECK_THROWS_AS(synth_corpus(cfg), ConfigError);
}

TEST_CASE("mixture is the exact sum of speaker contributions") {
    SynthConfig cfg = small_config();
    cfg.num_recordings = 5;
    SynthDataset ds = synth_corpus(cfg);
    const VoiceBank bank = make_voice_bank(cfg);
    for (const auto& rec : ds.recordings) {
        Tensor sum = Tensor::zeros(rec.features.shape);
        for (size_t s = 0; s < rec.speakers.size(); ++s)
            sum = add(sum, speaker_contribution(cfg, bank, rec, static_cast<int>(s)));
        REQUIRE(sum.data == rec.features.data);  // additive mixing, bitwise
    }
}

TEST_CASE("generated activity is binary and masks are one-hot") {
    SynthConfig cfg = small_config();
    cfg.num_recordings = 5;
    SynthDataset ds = synth_corpus(cfg);
    for (const auto& rec : ds.recordings) {
        const SpeakerActivity act =
            activity_matrix(rec.segments(cfg.frame_rate), cfg.frame_rate, rec.frames / cfg.frame_rate);
        for (double v : act.values.data) REQUIRE((v == 0.0 || v == 1.0));
        for (int s = 0; s < act.num_speakers(); ++s) {
            StnoMask m = stno_mask(act, s);
            REQUIRE(m.is_hard());
        }
    }
}

TEST_CASE("emitted statistics match recomputation from D exactly") {
    SynthConfig cfg = small_config();
    cfg.num_recordings = 20;
    SynthDataset ds = synth_corpus(cfg);
    ActivityCounts total;
    for (const auto& rec : ds.recordings) {
        const SpeakerActivity act =
            activity_matrix(rec.segments(cfg.frame_rate), cfg.frame_rate, rec.frames / cfg.frame_rate);
        const ActivityCounts c = activity_counts(act);
        total.silence += c.silence;
        total.one_speaker += c.one_speaker;
        total.overlap += c.overlap;
        total.frames += c.frames;
    }
    REQUIRE(ds.stats.frames == total.frames);
    REQUIRE(ds.stats.silence == static_cast<double>(total.silence) / total.frames);
    REQUIRE(ds.stats.one_speaker == static_cast<double>(total.one_speaker) / total.frames);
    REQUIRE(ds.stats.overlap == static_cast<double>(total.overlap) / total.frames);
}

TEST_CASE("rasterized reference masks cover the stno classes") {
    SynthConfig cfg = small_config();
    cfg.num_recordings = 8;
    cfg.overlap_target = 0.4;
    SynthDataset ds = synth_corpus(cfg);
    bool saw_t = false, saw_s = false, saw_o = false, saw_n = false;
    for (const auto& rec : ds.recordings) {
        StnoMask m = rasterize_reference(ds, rec.id, "spk0", cfg.frame_rate);
        for (int t = 0; t < m.num_frames(); ++t) {
            saw_t |= m.p_t(t) == 1.0;
            saw_s |= m.p_s(t) == 1.0;
            saw_o |= m.p_o(t) == 1.0;
            saw_n |= m.p_n(t) == 1.0;
        }
    }
    CHECK(saw_t);
    CHECK(saw_s);
    CHECK(saw_o);
    CHECK(saw_n);
    CHECK_THROWS_AS(rasterize_reference(ds, "rec_00000", "ghost", 50.0), InputError);
}

TEST_CASE("corpus round trips through disk") {
    namespace fs = std::filesystem;
    SynthConfig cfg = small_config();
    cfg.num_recordings = 6;
    SynthDataset ds = synth_corpus(cfg);
    const std::string dir = "/tmp/tsasr_test_corpus";
    fs::remove_all(dir);
    save_corpus(ds, dir);

    LoadedCorpus lc = load_corpus(dir);
    CHECK(lc.config.seed == cfg.seed);
    CHECK(lc.train_ids.size() + lc.dev_ids.size() + lc.test_ids.size() >= 6);
    const std::string first = ds.recordings[0].id;
    REQUIRE(lc.features.count(first) == 1);
    CHECK(lc.features.at(first).data == ds.recordings[0].features.data);
    CHECK_FALSE(lc.reference.empty());
    CHECK_FALSE(lc.diarization.empty());

    // reference transcripts and diarization agree on segment boundaries
    const auto refs = reference_transcripts(ds);
    REQUIRE(lc.reference.size() == refs.size());
    for (size_t i = 0; i < refs.size(); ++i) {
        CHECK(lc.reference[i].speaker == refs[i].speaker);
        CHECK(lc.reference[i].start_time == Catch::Approx(refs[i].start_time).margin(1e-9));
    }
}
