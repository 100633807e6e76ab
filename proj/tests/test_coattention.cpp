#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "tsasr/coattention.hpp"
#include "tsasr/gradcheck.hpp"

using namespace tsasr;

static ModelConfig coatt_config() {
    ModelConfig cfg = default_model_config();
    cfg.d_m = 16;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.heads = 4;
    cfg.feat_dim = 6;
    cfg.co_attention = true;
    cfg.validate();
    return cfg;
}

// co-attention weights drawn away from the zero fusion init so the module
// actually mixes speakers
static ParamStore randomized_coatt_params(uint64_t seed) {
    ModelConfig cfg = coatt_config();
    ParamStore p = init_params(cfg, seed);
    std::mt19937_64 rng(seed + 999);
    for (auto& [name, t] : p.items())
        if (name.rfind("coatt.", 0) == 0 && name.find(".ln_") == std::string::npos)
            t = Tensor::randn(t.shape, rng, 0.3);
    return p;
}

TEST_CASE("shape preservation for any speaker count") {
    ModelConfig cfg = coatt_config();
    std::mt19937_64 rng(3);
    for (int S = 1; S <= 4; ++S) {
        ParamStore params = randomized_coatt_params(50 + static_cast<uint64_t>(S));
        std::vector<Tensor> hs;
        for (int s = 0; s < S; ++s) hs.push_back(Tensor::randn({9, cfg.d_m}, rng));
        auto outs = co_attention_forward(cfg, params, hs);
        REQUIRE(outs.size() == static_cast<size_t>(S));
        for (int s = 0; s < S; ++s) {
            CHECK(outs[static_cast<size_t>(s)].shape == hs[static_cast<size_t>(s)].shape);
            CHECK(outs[static_cast<size_t>(s)].all_finite());
        }
    }
}

TEST_CASE("zero fusion keeps the module an identity residual") {
    ModelConfig cfg = coatt_config();
    ParamStore params = init_params(cfg, 51);  // wf is zero at init
    std::mt19937_64 rng(5);
    std::vector<Tensor> hs = {Tensor::randn({7, cfg.d_m}, rng), Tensor::randn({7, cfg.d_m}, rng)};
    auto outs = co_attention_forward(cfg, params, hs);
    for (int s = 0; s < 2; ++s) REQUIRE(outs[static_cast<size_t>(s)].data == hs[static_cast<size_t>(s)].data);
}

TEST_CASE("speaker permutation equivariance") {
    ModelConfig cfg = coatt_config();
    std::mt19937_64 rng(7);
    for (int S = 2; S <= 4; ++S) {
        ParamStore params = randomized_coatt_params(60 + static_cast<uint64_t>(S));
        std::vector<Tensor> hs;
        for (int s = 0; s < S; ++s) hs.push_back(Tensor::randn({6, cfg.d_m}, rng));
        auto base = co_attention_forward(cfg, params, hs);

        // rotate speakers by one
        std::vector<Tensor> rotated;
        for (int s = 0; s < S; ++s) rotated.push_back(hs[static_cast<size_t>((s + 1) % S)]);
        auto rotated_out = co_attention_forward(cfg, params, rotated);
        for (int s = 0; s < S; ++s) {
            const Tensor& a = rotated_out[static_cast<size_t>(s)];
            const Tensor& b = base[static_cast<size_t>((s + 1) % S)];
            for (size_t i = 0; i < a.data.size(); ++i) REQUIRE(std::fabs(a.data[i] - b.data[i]) <= 1e-9);
        }
    }
}

TEST_CASE("per-speaker and summary paths share attention weights") {
    ModelConfig cfg = coatt_config();
    ParamStore params = randomized_coatt_params(77);
    std::mt19937_64 rng(11);
    std::vector<Tensor> hs = {Tensor::randn({5, cfg.d_m}, rng), Tensor::randn({5, cfg.d_m}, rng)};
    CoAttentionTrace trace;
    co_attention_forward(cfg, params, hs, &trace);
    REQUIRE(trace.attention_weights.size() == static_cast<size_t>(cfg.heads));
    for (const Tensor& w : trace.attention_weights) {
        REQUIRE(w.shape == std::vector<int>({5, 5}));
        for (int i = 0; i < w.shape[0]; ++i) {
            double sum = 0.0;
            for (int j = 0; j < w.shape[1]; ++j) sum += w.at(i, j);
            REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
        }
    }
}

TEST_CASE("co-attention gradients pass finite differences") {
    ModelConfig cfg = coatt_config();
    ParamStore params = randomized_coatt_params(88);
    std::mt19937_64 rng(13);
    std::vector<Tensor> hs = {Tensor::randn({4, cfg.d_m}, rng), Tensor::randn({4, cfg.d_m}, rng)};

    std::vector<std::string> names = {"coatt.wa", "coatt.wm", "coatt.qk.q.h0", "coatt.qk.k.h1",
                                      "coatt.th.v.h0", "coatt.xi.v.h2", "coatt.om.q.h3", "coatt.wf"};
    std::vector<std::pair<std::string, Tensor>> subset;
    for (const auto& n : names) subset.emplace_back(n, params.get(n));

    auto f = [&](GradTape& t, const std::vector<Var>& vars) {
        Bound b;
        b.tape = &t;
        for (const auto& [name, value] : params.items()) {
            bool overridden = false;
            for (size_t i = 0; i < names.size(); ++i)
                if (names[i] == name) {
                    b.vars[name] = vars[i];
                    overridden = true;
                    break;
                }
            if (!overridden) b.vars[name] = t.constant(value);
        }
        std::vector<Var> h_vars = {t.constant(hs[0]), t.constant(hs[1])};
        std::vector<Var> outs = co_attention_forward(cfg, b, h_vars);
        return sum_all(mul(outs[0], outs[1]));
    };
    CHECK(finite_difference_gradcheck(f, subset, 1e-5).max_rel_err() < 1e-4);
}
