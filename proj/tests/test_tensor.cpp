#include <catch2/catch_amalgamated.hpp>

#include "tsasr/tensor.hpp"

using namespace tsasr;

TEST_CASE("matmul basics") {
    Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
    Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
    Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 19.0);
    CHECK(c.at(0, 1) == 22.0);
    CHECK(c.at(1, 0) == 43.0);
    CHECK(c.at(1, 1) == 50.0);

    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("matmul transpose variants agree") {
    std::mt19937_64 rng(7);
    Tensor a = Tensor::randn({3, 5}, rng);
    Tensor b = Tensor::randn({5, 4}, rng);
    Tensor c1 = matmul(a, b);
    Tensor c2 = matmul_nt(a, transpose(b));
    Tensor c3 = matmul_tn(transpose(a), b);
    for (int i = 0; i < c1.rows(); ++i)
        for (int j = 0; j < c1.cols(); ++j) {
            CHECK(c1.at(i, j) == Catch::Approx(c2.at(i, j)).epsilon(1e-14));
            CHECK(c1.at(i, j) == Catch::Approx(c3.at(i, j)).epsilon(1e-14));
        }
}

TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(11);
    Tensor x = Tensor::randn({6, 9}, rng, 3.0);
    Tensor y = softmax_rows(x);
    for (int i = 0; i < y.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < y.cols(); ++j) s += y.at(i, j);
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("log_softmax matches softmax") {
    std::mt19937_64 rng(13);
    Tensor x = Tensor::randn({4, 7}, rng, 2.0);
    Tensor lp = log_softmax_rows(x);
    Tensor p = softmax_rows(x);
    for (size_t i = 0; i < p.data.size(); ++i) CHECK(std::exp(lp.data[i]) == Catch::Approx(p.data[i]).epsilon(1e-12));
}

TEST_CASE("layer norm normalizes rows") {
    std::mt19937_64 rng(17);
    Tensor x = Tensor::randn({5, 8}, rng, 4.0);
    Tensor g = Tensor::full({8}, 1.0);
    Tensor b = Tensor::zeros({8});
    Tensor y = layer_norm_rows(x, g, b, 1e-12);
    for (int i = 0; i < y.rows(); ++i) {
        double mu = 0.0, var = 0.0;
        for (int j = 0; j < y.cols(); ++j) mu += y.at(i, j);
        mu /= y.cols();
        for (int j = 0; j < y.cols(); ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
        var /= y.cols();
        CHECK(std::fabs(mu) < 1e-9);
        CHECK(var == Catch::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("unfold/fold round trip accounting") {
    Tensor x = Tensor::from_rows({{1, 10}, {2, 20}, {3, 30}, {4, 40}});
    Tensor patches = unfold1d(x, 3, 2, 1);
    REQUIRE(patches.shape == std::vector<int>({2, 6}));
    // first patch covers frames -1,0,1 (zero padded)
    CHECK(patches.at(0, 0) == 0.0);
    CHECK(patches.at(0, 2) == 1.0);
    CHECK(patches.at(0, 4) == 2.0);
    // second patch covers frames 1,2,3
    CHECK(patches.at(1, 0) == 2.0);
    CHECK(patches.at(1, 2) == 3.0);
    CHECK(patches.at(1, 4) == 4.0);

    // fold of all-ones patch grads counts how often each frame was read
    Tensor ones = Tensor::full(patches.shape, 1.0);
    Tensor counts = fold1d(ones, 4, 2, 3, 2, 1);
    CHECK(counts.at(0, 0) == 1.0);
    CHECK(counts.at(1, 0) == 2.0);
    CHECK(counts.at(2, 0) == 1.0);
    CHECK(counts.at(3, 0) == 1.0);
}

TEST_CASE("concat and slice are inverses") {
    std::mt19937_64 rng(23);
    Tensor a = Tensor::randn({3, 2}, rng);
    Tensor b = Tensor::randn({3, 5}, rng);
    Tensor c = concat_cols(a, b);
    Tensor a2 = slice_cols(c, 0, 2);
    Tensor b2 = slice_cols(c, 2, 7);
    CHECK(a2.data == a.data);
    CHECK(b2.data == b.data);
}

TEST_CASE("append_col places values in the last column") {
    Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
    Tensor e = append_const_col(a, -50.0);
    REQUIRE(e.shape == std::vector<int>({2, 3}));
    CHECK(e.at(0, 2) == -50.0);
    CHECK(e.at(1, 2) == -50.0);
    CHECK(e.at(1, 1) == 4.0);
}

TEST_CASE("finite guard trips on NaN") {
    Tensor t = Tensor::zeros({2, 2});
    t.at(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(t.check_finite("test"), NumericError);
}
