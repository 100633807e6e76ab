#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "tsasr/conditioning.hpp"
#include "tsasr/gradcheck.hpp"

using namespace tsasr;

static StnoMask soft_mask_from_rows(const std::vector<std::vector<double>>& rows) {
    StnoMask m;
    m.values = Tensor::from_rows(rows);
    m.target_index = 0;
    return m;
}

static StnoMask random_soft_mask(std::mt19937_64& rng, int frames) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<std::vector<double>> rows;
    for (int t = 0; t < frames; ++t) {
        std::vector<double> r = {u(rng), u(rng), u(rng), u(rng)};
        const double sum = r[0] + r[1] + r[2] + r[3];
        for (double& v : r) v /= sum;
        rows.push_back(r);
    }
    return soft_mask_from_rows(rows);
}

TEST_CASE("input mask scales frames by target activity") {
    Tensor feats = Tensor::from_rows({{2, 4}, {2, 4}, {2, 4}});
    StnoMask m = soft_mask_from_rows({{0, 1, 0, 0}, {1, 0, 0, 0}, {0.25, 0.25, 0.25, 0.25}});
    Tensor out = input_mask(feats, m);
    CHECK(out.at(0, 0) == 2.0);  // pure target frame unchanged
    CHECK(out.at(1, 0) == 0.0);  // silence frame zeroed
    CHECK(out.at(2, 0) == Catch::Approx(1.0));  // p_T + p_O = 0.5
    CHECK(out.at(2, 1) == Catch::Approx(2.0));

    Tensor wrong = Tensor::zeros({2, 4});
    CHECK_THROWS_AS(input_mask(wrong, m), DimensionError);
}

TEST_CASE("extend_qk block placement") {
    auto [eq, ek] = extend_qk(Tensor::eye(2), Tensor::eye(2));
    CHECK(eq.data == Tensor::eye(3).data);
    CHECK(ek.data == Tensor::eye(3).data);

    auto [e1, e1k] = extend_qk(Tensor::from_rows({{2.0}}), Tensor::from_rows({{3.0}}));
    CHECK(e1.data == std::vector<double>({2, 0, 0, 1}));
    CHECK(e1k.data == std::vector<double>({3, 0, 0, 1}));

    CHECK_THROWS_AS(extend_qk(Tensor::zeros({2, 3}), Tensor::eye(3)), DimensionError);
}

TEST_CASE("extended projections reproduce q.k - c") {
    // Numerical check of the biased score identity on random 4-dim vectors.
    std::mt19937_64 rng(7);
    const double c = 50.0;
    for (int iter = 0; iter < 50; ++iter) {
        Tensor wq = Tensor::randn({4, 4}, rng);
        Tensor wk = Tensor::randn({4, 4}, rng);
        Tensor q = Tensor::randn({1, 4}, rng);
        Tensor k = Tensor::randn({1, 4}, rng);
        auto [ewq, ewk] = extend_qk(wq, wk);

        Tensor qp = matmul_nt(q, wq);  // row vector times W^T == W q
        Tensor kp = matmul_nt(k, wk);
        const double plain = matmul_nt(qp, kp).at(0, 0);

        Tensor qe = matmul_nt(append_const_col(q, 1.0), ewq);
        Tensor ke_target = matmul_nt(append_const_col(k, 0.0), ewk);
        Tensor ke_biased = matmul_nt(append_const_col(k, -c), ewk);
        const double target_score = matmul_nt(qe, ke_target).at(0, 0);
        const double biased_score = matmul_nt(qe, ke_biased).at(0, 0);

        REQUIRE(std::fabs(target_score - plain) <= 1e-12);
        REQUIRE(std::fabs(biased_score - (plain - c)) <= 1e-9);
        // target-frame score does not depend on c at all
        REQUIRE(target_score == matmul_nt(qe, ke_target).at(0, 0));
    }
}

TEST_CASE("qkb bias vector values") {
    StnoMask m = soft_mask_from_rows({{0, 1, 0, 0}, {1, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
    Tensor bias = qkb_bias_vector(m, 50.0);
    CHECK(bias.data == std::vector<double>({0.0, -50.0, -50.0, 0.0}));
    CHECK_THROWS(qkb_bias_vector(m, -1.0));

    // with c = 0 the vector vanishes and biased attention equals unbiased
    Tensor zero_bias = qkb_bias_vector(m, 0.0);
    for (double v : zero_bias.data) CHECK(v == 0.0);
}

TEST_CASE("shifted positions") {
    auto flags = [](const std::string& s) {
        std::vector<bool> f;
        for (char c : s) f.push_back(c == 'T');
        return f;
    };
    CHECK(shifted_positions(flags("TTTNNTT")) == std::vector<int>({1, 2, 3, 3, 3, 4, 5}));
    CHECK(shifted_positions(flags("TTTT")) == std::vector<int>({1, 2, 3, 4}));
    CHECK(shifted_positions(flags("NNT")) == std::vector<int>({1, 1, 1}));
    CHECK(shifted_positions(flags("NNNN")) == std::vector<int>({1, 1, 1, 1}));
}

TEST_CASE("shifted position properties") {
    std::mt19937_64 rng(11);
    std::bernoulli_distribution coin(0.6);
    for (int iter = 0; iter < 200; ++iter) {
        std::uniform_int_distribution<int> len(1, 40);
        const int n = len(rng);
        std::vector<bool> f(static_cast<size_t>(n));
        int targets = 0;
        for (int i = 0; i < n; ++i) {
            f[static_cast<size_t>(i)] = coin(rng);
            targets += f[static_cast<size_t>(i)] ? 1 : 0;
        }
        auto pos = shifted_positions(f);
        bool seen_target = f[0];
        for (size_t i = 1; i < pos.size(); ++i) {
            REQUIRE(pos[i] >= pos[i - 1]);  // non-decreasing
            if (pos[i] != pos[i - 1]) {
                // position only moves on target frames, one step at a time
                REQUIRE(f[i]);
                REQUIRE(pos[i] == pos[i - 1] + 1);
            }
            if (!f[i]) REQUIRE(pos[i] == pos[i - 1]);
            // once a target frame occurred, every further target increments
            if (f[i] && seen_target) REQUIRE(pos[i] == pos[i - 1] + 1);
            seen_target = seen_target || f[i];
        }
        const int expected_max = std::max(targets, 1);
        REQUIRE(*std::max_element(pos.begin(), pos.end()) == expected_max);
    }
}

TEST_CASE("fddt suppressive initialization") {
    FddtParams p = fddt_init(2, 4, FddtInitMode::kSuppressive);
    CHECK(p.layers[0].w[0].data == Tensor::zeros({4, 4}).data);  // W_S^0
    CHECK(p.layers[0].w[2].data == Tensor::zeros({4, 4}).data);  // W_N^0
    CHECK(p.layers[0].w[1].data == Tensor::eye(4).data);         // W_T^0
    CHECK(p.layers[1].w[1].data == Tensor::eye(4).data);         // W_T^1
    CHECK(p.layers[1].w[0].data == Tensor::eye(4).data);         // deeper layers identity
    for (int l = 0; l < 2; ++l)
        for (int k = 0; k < 4; ++k) CHECK(p.layers[l].b[k].data == std::vector<double>(4, 0.0));
}

TEST_CASE("fddt random initialization stays small") {
    std::mt19937_64 rng(13);
    FddtParams p = fddt_init(1, 16, FddtInitMode::kRandom, &rng);
    double maxabs = 0.0, sumsq = 0.0;
    for (double v : p.layers[0].w[0].data) {
        maxabs = std::max(maxabs, std::fabs(v));
        sumsq += v * v;
    }
    CHECK(maxabs < 0.2);
    CHECK(std::sqrt(sumsq / 256.0) == Catch::Approx(0.02).epsilon(0.5));
    CHECK_THROWS(fddt_init(1, 4, FddtInitMode::kRandom, nullptr));
}

TEST_CASE("fddt apply against hand-evaluated cases") {
    FddtParams p = fddt_init(1, 3, FddtInitMode::kSuppressive);
    Tensor z = Tensor::from_rows({{1, 2, 3}});

    StnoMask hard_t = soft_mask_from_rows({{0, 1, 0, 0}});
    CHECK(fddt_apply(z, hard_t, p.layers[0]).data == z.data);  // identity transform

    StnoMask hard_s = soft_mask_from_rows({{1, 0, 0, 0}});
    CHECK(fddt_apply(z, hard_s, p.layers[0]).data == std::vector<double>({0, 0, 0}));

    StnoMask soft = soft_mask_from_rows({{0.25, 0.25, 0.25, 0.25}});
    Tensor out = fddt_apply(z, soft, p.layers[0]);
    CHECK(out.at(0, 0) == Catch::Approx(0.5));
    CHECK(out.at(0, 1) == Catch::Approx(1.0));
    CHECK(out.at(0, 2) == Catch::Approx(1.5));
}

TEST_CASE("fddt hard path is bitwise equal to the convex combination") {
    std::mt19937_64 rng(17);
    for (int iter = 0; iter < 50; ++iter) {
        FddtParams p = fddt_init(1, 6, FddtInitMode::kRandom, &rng);
        Tensor z = Tensor::randn({10, 6}, rng);
        std::uniform_int_distribution<int> cls(0, 3);
        std::vector<std::vector<double>> rows;
        for (int t = 0; t < 10; ++t) {
            std::vector<double> r(4, 0.0);
            r[static_cast<size_t>(cls(rng))] = 1.0;
            rows.push_back(r);
        }
        StnoMask hard = soft_mask_from_rows(rows);
        REQUIRE(hard.is_hard());
        Tensor fast = fddt_apply(z, hard, p.layers[0]);
        Tensor soft = fddt_apply_soft_path(z, hard, p.layers[0]);
        REQUIRE(fast.data == soft.data);
    }
}

TEST_CASE("suppressive init with all-target mask is the identity at every layer") {
    std::mt19937_64 rng(19);
    FddtParams p = fddt_init(3, 8, FddtInitMode::kSuppressive);
    Tensor z = Tensor::randn({12, 8}, rng);
    StnoMask all_t = stno_mask_all_target(12);
    Tensor cur = z;
    for (int l = 0; l < 3; ++l) {
        cur = fddt_apply(cur, all_t, p.layers[static_cast<size_t>(l)]);
        REQUIRE(cur.data == z.data);
    }
}

TEST_CASE("fddt forward passes finite differences") {
    std::mt19937_64 rng(23);
    StnoMask soft = random_soft_mask(rng, 5);
    std::vector<std::pair<std::string, Tensor>> params;
    params.emplace_back("z", Tensor::randn({5, 4}, rng));
    for (int k = 0; k < 4; ++k) {
        params.emplace_back(std::string("w") + std::to_string(k), Tensor::randn({4, 4}, rng, 0.5));
        params.emplace_back(std::string("b") + std::to_string(k), Tensor::randn({4}, rng, 0.5));
    }
    auto f = [&soft](GradTape& t, const std::vector<Var>& p) {
        std::array<Var, 4> w = {p[1], p[3], p[5], p[7]};
        std::array<Var, 4> b = {p[2], p[4], p[6], p[8]};
        return sum_all(mul(fddt_apply(p[0], soft, w, b), fddt_apply(p[0], soft, w, b)));
    };
    CHECK(finite_difference_gradcheck(f, params, 1e-5).max_rel_err() < 1e-6);
}

TEST_CASE("fddt hard-path gradients match finite differences") {
    std::mt19937_64 rng(29);
    StnoMask hard = soft_mask_from_rows({{0, 1, 0, 0}, {1, 0, 0, 0}, {0, 0, 0, 1}, {0, 0, 1, 0}, {0, 1, 0, 0}});
    std::vector<std::pair<std::string, Tensor>> params;
    params.emplace_back("z", Tensor::randn({5, 4}, rng));
    for (int k = 0; k < 4; ++k) {
        params.emplace_back(std::string("w") + std::to_string(k), Tensor::randn({4, 4}, rng, 0.5));
        params.emplace_back(std::string("b") + std::to_string(k), Tensor::randn({4}, rng, 0.5));
    }
    auto f = [&hard](GradTape& t, const std::vector<Var>& p) {
        std::array<Var, 4> w = {p[1], p[3], p[5], p[7]};
        std::array<Var, 4> b = {p[2], p[4], p[6], p[8]};
        Var y = fddt_apply(p[0], hard, w, b);
        return sum_all(mul(y, y));
    };
    CHECK(finite_difference_gradcheck(f, params, 1e-5).max_rel_err() < 1e-6);
}
