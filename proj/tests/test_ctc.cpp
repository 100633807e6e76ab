#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "oracles.hpp"
#include "tsasr/ctc.hpp"
#include "tsasr/gradcheck.hpp"

using namespace tsasr;

static Tensor uniform_logp(int T, int V) {
    return Tensor::full({T, V}, -std::log(static_cast<double>(V)));
}

static Tensor random_logp(std::mt19937_64& rng, int T, int V) {
    return log_softmax_rows(Tensor::randn({T, V}, rng, 1.5));
}

TEST_CASE("ctc loss on hand-checked cases") {
    const int blank = 0;
    SECTION("uniform posteriors, single symbol over two frames") {
        // paths {aa, a_, _a} out of 4 -> p = 0.75
        Tensor lp = uniform_logp(2, 2);
        CHECK(ctc_nll_value(lp, {1}, blank) == Catch::Approx(-std::log(0.75)).margin(1e-12));
    }
    SECTION("empty label is the all-blank path") {
        std::mt19937_64 rng(3);
        Tensor lp = random_logp(rng, 4, 3);
        double expected = 0.0;
        for (int t = 0; t < 4; ++t) expected -= lp.at(t, blank);
        CHECK(ctc_nll_value(lp, {}, blank) == Catch::Approx(expected).margin(1e-12));
    }
    SECTION("repeated symbol needs a separating blank") {
        Tensor lp = uniform_logp(2, 2);
        CHECK(ctc_min_frames({1, 1}) == 3);
        CHECK_THROWS_AS(ctc_nll_value(lp, {1, 1}, blank), InfeasibleLabelError);
    }
    SECTION("labels may not contain blank") {
        Tensor lp = uniform_logp(3, 2);
        CHECK_THROWS(ctc_nll_value(lp, {0}, blank));
    }
}

TEST_CASE("ctc loss equals brute-force alignment enumeration") {
    std::mt19937_64 rng(71);
    const int blank = 0;
    for (int T = 1; T <= 4; ++T) {
        for (int V = 2; V <= 3; ++V) {
            Tensor lp = random_logp(rng, T, V);
            // all labels over {1..V-1} of length <= 2
            std::vector<std::vector<int>> labels = {{}};
            for (int a = 1; a < V; ++a) {
                labels.push_back({a});
                for (int b2 = 1; b2 < V; ++b2) labels.push_back({a, b2});
            }
            for (const auto& lab : labels) {
                if (ctc_min_frames(lab) > T) continue;
                const double brute = oracle::ctc_enumerate_prob(lp, lab, blank);
                const double fast = ctc_nll_value(lp, lab, blank);
                REQUIRE(fast == Catch::Approx(-std::log(brute)).margin(1e-9));
            }
        }
    }
}

TEST_CASE("ctc posteriors sum to one per frame") {
    std::mt19937_64 rng(73);
    Tensor lp = random_logp(rng, 6, 4);
    Tensor gamma = ctc_posteriors(lp, {1, 2, 1}, 0);
    for (int t = 0; t < 6; ++t) {
        double s = 0.0;
        for (int v = 0; v < 4; ++v) s += gamma.at(t, v);
        CHECK(s == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("ctc gradient matches finite differences") {
    std::mt19937_64 rng(79);
    const std::vector<int> labels = {1, 3, 2};
    std::vector<std::pair<std::string, Tensor>> params = {{"logits", Tensor::randn({6, 4}, rng)}};
    auto f = [&labels](GradTape& t, const std::vector<Var>& p) {
        return ctc_nll(log_softmax_rows(p[0]), labels, 0);
    };
    CHECK(finite_difference_gradcheck(f, params, 1e-5).max_rel_err() < 1e-6);
}
