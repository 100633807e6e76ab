#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "tsasr/gradcheck.hpp"
#include "tsasr/model.hpp"

using namespace tsasr;

static ModelConfig tiny_config(const std::string& conditioning) {
    ModelConfig cfg = default_model_config();
    cfg.d_m = 16;
    cfg.enc_layers = 2;
    cfg.dec_layers = 2;
    cfg.heads = 4;
    cfg.feat_dim = 6;
    cfg.mlp_mult = 2;
    cfg.conditioning = conditioning;
    cfg.validate();
    return cfg;
}

static Tensor random_features(std::mt19937_64& rng, int frames, int dim) {
    return Tensor::randn({frames, dim}, rng);
}

static StnoMask hard_mask(const std::string& pattern) {
    std::vector<std::vector<double>> rows;
    for (char c : pattern) {
        std::vector<double> r(4, 0.0);
        const std::string classes = "STNO";
        r[classes.find(c)] = 1.0;
        rows.push_back(r);
    }
    StnoMask m;
    m.values = Tensor::from_rows(rows);
    m.target_index = 0;
    return m;
}

TEST_CASE("encoder halves the frame count") {
    std::mt19937_64 rng(5);
    Model m = Model::init(tiny_config("none"), 11);
    Tensor feats = random_features(rng, 100, 6);
    Tensor h = run_encoder(m, feats, {});
    CHECK(h.shape == std::vector<int>({50, 16}));
    CHECK(h.all_finite());

    CHECK_THROWS_AS(run_encoder(m, random_features(rng, 101, 6), {}), DimensionError);
}

TEST_CASE("ctc head shapes: two stride-2 stages") {
    std::mt19937_64 rng(7);
    Model m = Model::init(tiny_config("none"), 13);
    SECTION("divisible length") {
        Tensor h = Tensor::randn({16, 16}, rng);
        Tensor z = run_ctc_head(m, h);
        CHECK(z.shape == std::vector<int>({4, m.config.vocab_size}));
    }
    SECTION("odd length is padded then masked") {
        Tensor h = Tensor::randn({17, 16}, rng);
        Tensor z = run_ctc_head(m, h);
        CHECK(z.shape[0] == 5);
    }
    SECTION("full-scale frame arithmetic: 1500 -> 375") {
        CHECK((1500 + 3) / 4 == 375);
    }
}

TEST_CASE("decoder determinism and shapes") {
    std::mt19937_64 rng(9);
    Model m = Model::init(tiny_config("none"), 17);
    Tensor h = Tensor::randn({20, 16}, rng);
    const std::vector<int> prefix = {Vocab::kBos, m.vocab.char_id('h'), m.vocab.char_id('i')};
    Tensor l1 = run_decoder(m, h, prefix);
    Tensor l2 = run_decoder(m, h, prefix);
    CHECK(l1.shape == std::vector<int>({3, m.config.vocab_size}));
    CHECK(l1.data == l2.data);

    CHECK_THROWS_AS(run_decoder(m, h, {m.vocab.char_id('x')}), Error);
    std::vector<int> too_long(static_cast<size_t>(m.config.max_decode_len) + 1, m.vocab.char_id('a'));
    too_long[0] = Vocab::kBos;
    CHECK_THROWS_AS(run_decoder(m, h, too_long), CapacityError);
}

TEST_CASE("incremental decode equals full recompute") {
    std::mt19937_64 rng(11);
    for (const std::string mode : {"none", "qkb"}) {
        Model m = Model::init(tiny_config(mode), 19);
        Tensor feats = random_features(rng, 40, 6);
        StnoMask enc_mask = hard_mask("TTNNTTTTSSTTTTTTOOTT");
        ConditioningInput cond;
        if (mode != "none") cond.encoder_mask = &enc_mask;
        Tensor h = run_encoder(m, feats, cond);

        Tensor cross_bias;
        const Tensor* bias_ptr = nullptr;
        if (m.config.qkb_cross()) {
            cross_bias = qkb_bias_vector(enc_mask, m.config.qkb.c);
            bias_ptr = &cross_bias;
        }

        DecodeSession session(m, h, mode != "none" ? &enc_mask : nullptr);
        DecodeSession::State st = session.initial();
        std::vector<int> prefix = {Vocab::kBos};
        Tensor lp_inc = session.advance(st, Vocab::kBos);
        for (int step = 0; step < 4; ++step) {
            Tensor full_logits = run_decoder(m, h, prefix, bias_ptr);
            Tensor full_lp = log_softmax_rows(full_logits);
            for (int v = 0; v < m.config.vocab_size; ++v) {
                REQUIRE(std::fabs(lp_inc.data[static_cast<size_t>(v)] -
                                  full_lp.at(full_lp.shape[0] - 1, v)) < 1e-10);
            }
            const int next = m.vocab.char_id(static_cast<char>('a' + step));
            prefix.push_back(next);
            lp_inc = session.advance(st, next);
        }
    }
}

TEST_CASE("fddt do-no-harm: suppressive init with all-target mask matches unconditioned") {
    std::mt19937_64 rng(13);
    Model vanilla = Model::init(tiny_config("none"), 23);
    Model fddt = Model::init(tiny_config("fddt"), 23);

    for (int iter = 0; iter < 5; ++iter) {
        Tensor feats = random_features(rng, 30, 6);
        StnoMask all_t = stno_mask_all_target(15);
        ConditioningInput cond;
        cond.encoder_mask = &all_t;
        Tensor h_vanilla = run_encoder(vanilla, feats, {});
        Tensor h_fddt = run_encoder(fddt, feats, cond);
        REQUIRE(h_vanilla.shape == h_fddt.shape);
        for (size_t i = 0; i < h_vanilla.data.size(); ++i)
            REQUIRE(std::fabs(h_vanilla.data[i] - h_fddt.data[i]) <= 1e-9);
    }
}

TEST_CASE("qkb with zero-bias mask equals the unextended encoder") {
    std::mt19937_64 rng(17);
    ModelConfig qkb_cfg = tiny_config("qkb");
    Model vanilla = Model::init(tiny_config("none"), 29);
    Model qkb = Model::init(qkb_cfg, 29);

    Tensor feats = random_features(rng, 24, 6);
    StnoMask all_t = stno_mask_all_target(12);
    ConditioningInput cond;
    cond.encoder_mask = &all_t;
    Tensor h_vanilla = run_encoder(vanilla, feats, {});
    Tensor h_qkb = run_encoder(qkb, feats, cond);
    for (size_t i = 0; i < h_vanilla.data.size(); ++i)
        REQUIRE(std::fabs(h_vanilla.data[i] - h_qkb.data[i]) <= 1e-9);
}

TEST_CASE("qkb shifts raw non-target scores by exactly -c") {
    std::mt19937_64 rng(19);
    ModelConfig cfg = tiny_config("qkb");
    Model vanilla = Model::init(tiny_config("none"), 31);
    Model qkb = Model::init(cfg, 31);

    Tensor feats = random_features(rng, 24, 6);
    StnoMask mask = hard_mask("TTNNSSTTTTON");
    const std::vector<bool> flags = qkb_target_flags(mask);
    ConditioningInput cond_none{};
    ConditioningInput cond_qkb{};
    cond_qkb.encoder_mask = &mask;

    // disable the positional shift so layer-0 inputs agree between models
    qkb.config.qkb.shift_positions = false;

    EncoderTrace trace_vanilla, trace_qkb;
    run_encoder(vanilla, feats, cond_none, &trace_vanilla);
    run_encoder(qkb, feats, cond_qkb, &trace_qkb);

    // layer 0 raw scores: biased = plain - c on non-target key columns
    const auto& plain = trace_vanilla.raw_scores[0];
    const auto& biased = trace_qkb.raw_scores[0];
    REQUIRE(plain.size() == biased.size());
    for (size_t h = 0; h < plain.size(); ++h) {
        for (int i = 0; i < plain[h].shape[0]; ++i)
            for (int j = 0; j < plain[h].shape[1]; ++j) {
                const double expected = plain[h].at(i, j) - (flags[static_cast<size_t>(j)] ? 0.0 : cfg.qkb.c);
                REQUIRE(std::fabs(biased[h].at(i, j) - expected) <= 1e-9);
            }
    }
}

TEST_CASE("checkpoint round trip preserves weights and config") {
    Model m = Model::init(tiny_config("fddt"), 37);
    const std::string path = "/tmp/tsasr_test_model.ckpt";
    m.save(path);
    Model loaded = Model::load(path);
    CHECK(loaded.config.conditioning == "fddt");
    CHECK(loaded.config.d_m == m.config.d_m);
    REQUIRE(loaded.params.size() == m.params.size());
    for (const auto& [name, t] : m.params.items()) {
        REQUIRE(loaded.params.get(name).data == t.data);
    }
}

TEST_CASE("combined forward yields finite gradients everywhere") {
    std::mt19937_64 rng(23);
    Model m = Model::init(tiny_config("fddt"), 41);
    Tensor feats = random_features(rng, 24, 6);
    StnoMask mask = hard_mask("TTTNNTTTSSTO");

    GradTape tape;
    Bound b = bind_params(tape, m.params);
    ConditioningInput cond;
    cond.encoder_mask = &mask;
    Var h = encoder_forward(m.config, b, tape.constant(feats), cond);
    const std::vector<int> tokens = {Vocab::kBos, m.vocab.char_id('a'), m.vocab.char_id('b')};
    Var dec_logits = decoder_forward(m.config, b, h, tokens);
    Var ctc_logits = ctc_head_forward(m.config, b, h);
    Var loss = add(sum_all(mul(dec_logits, dec_logits)), sum_all(mul(ctc_logits, ctc_logits)));
    tape.backward(loss);

    int with_grad = 0;
    for (const auto& [name, id] : tape.parameters()) {
        Tensor g = tape.grad(Var{id, &tape});
        REQUIRE(g.all_finite());
        double norm = 0.0;
        for (double v : g.data) norm += v * v;
        if (norm > 0.0) ++with_grad;
    }
    // everything except a couple of zero-initialized FDDT leaves sees flow
    CHECK(with_grad > static_cast<int>(tape.parameters().size()) * 3 / 4);
}

TEST_CASE("conditioned-module gradients pass finite differences") {
    // small end-to-end slice: encoder with fddt + qkb-style extension params
    std::mt19937_64 rng(43);
    ModelConfig cfg = tiny_config("fddt");
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    Model m = Model::init(cfg, 47);
    Tensor feats = random_features(rng, 8, 6);
    StnoMask mask = hard_mask("TNST");

    // gradcheck across a representative subset of parameters
    std::vector<std::string> names = {"fddt.l0.T.w", "fddt.l0.S.w", "fddt.l0.N.b",
                                      "enc.l0.attn.wq", "enc.conv.w", "ctc.conv1.w", "ctc.out.w"};
    std::vector<std::pair<std::string, Tensor>> subset;
    for (const auto& n : names) subset.emplace_back(n, m.params.get(n));

    auto f = [&](GradTape& t, const std::vector<Var>& vars) {
        Bound b;
        b.tape = &t;
        for (const auto& [name, value] : m.params.items()) {
            bool overridden = false;
            for (size_t i = 0; i < names.size(); ++i)
                if (names[i] == name) {
                    b.vars[name] = vars[i];
                    overridden = true;
                    break;
                }
            if (!overridden) b.vars[name] = t.constant(value);
        }
        ConditioningInput cond;
        cond.encoder_mask = &mask;
        Var h = encoder_forward(m.config, b, t.constant(feats), cond);
        Var z = ctc_head_forward(m.config, b, h);
        return sum_all(mul(z, z));
    };
    CHECK(finite_difference_gradcheck(f, subset, 1e-5).max_rel_err() < 1e-4);
}
