#include <doctest.h>

#include <cmath>

#include "koopkal/koopman.hpp"

using namespace koopkal;

namespace {

// trajectory columns x, Mx, M²x, ... packed as 1×d×n
Tensor linear_trajectory(const Tensor& m, const std::vector<double>& x0, int64_t n) {
    const int64_t d = static_cast<int64_t>(x0.size());
    std::vector<double> cols(d * n);
    std::vector<double> cur = x0;
    for (int64_t t = 0; t < n; ++t) {
        for (int64_t i = 0; i < d; ++i) cols[i * n + t] = cur[i];
        std::vector<double> next(d, 0.0);
        auto mv = m.data();
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j < d; ++j) next[i] += mv[i * d + j] * cur[j];
        }
        cur = next;
    }
    return Tensor::from_vector({1, d, n}, std::move(cols));
}

double rel_fro_diff(const Tensor& a, const Tensor& b) {
    double num = 0.0, den = 0.0;
    auto av = a.data(), bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) {
        num += (av[i] - bv[i]) * (av[i] - bv[i]);
        den += bv[i] * bv[i];
    }
    return std::sqrt(num) / std::sqrt(den);
}

}  // namespace

TEST_SUITE_BEGIN("koopman");

TEST_CASE("measurement map starts near the identity") {
    Rng rng(3);
    auto psi = MeasurementMlp::init(8, rng);
    auto tokens = Tensor::randn({2, 8, 5}, rng);
    auto out = measure(psi, tokens);
    auto tv = tokens.data();
    auto ov = out.data();
    double worst = 0.0;
    for (size_t i = 0; i < tv.size(); ++i) worst = std::max(worst, std::abs(ov[i] - tv[i]));
    CHECK(worst < 0.1);
}

TEST_CASE("measurement of a single token preserves shape") {
    Rng rng(5);
    auto psi = MeasurementMlp::init(4, rng);
    auto one = Tensor::randn({1, 4, 1}, rng);
    CHECK(measure(psi, one).shape() == Shape{1, 4, 1});
    CHECK_THROWS_AS(measure(psi, Tensor::zeros({1, 5, 1})), ShapeError);
}

TEST_CASE("measurement gradients match finite differences") {
    Rng rng(7);
    auto psi = MeasurementMlp::init(3, rng);
    auto tokens = Tensor::randn({2, 3, 4}, rng);
    std::vector<NamedParam> params;
    psi.collect(params, "psi");
    auto w = Tensor::randn({2, 3, 4}, rng);
    auto report = finite_difference_check(
        [&] { return sum_all(mul(measure(psi, tokens), w)); }, params, 1e-5, 1e-4);
    CHECK(report.all_pass);
}

TEST_CASE("operator fit recovers an exact diagonal system") {
    auto m = Tensor::from_vector({2, 2}, {0.9, 0.0, 0.0, 0.8});
    auto traj = linear_trajectory(m, {1.0, 1.0}, 3);
    auto k_loc = fit_local_operator(traj, 1e-12);
    REQUIRE(k_loc.shape() == Shape{1, 2, 2});
    CHECK(rel_fro_diff(reshape(k_loc, {2, 2}), m) < 1e-6);
}

TEST_CASE("operator fit on a constant trajectory keeps the fixed point") {
    auto traj = Tensor::from_vector({1, 2, 3}, {2, 2, 2, -1, -1, -1});  // x=(2,-1) repeated
    auto k_loc = reshape(fit_local_operator(traj, 1e-12), {2, 2});
    const double x0 = 2.0, x1 = -1.0;
    const double y0 = k_loc.at({0, 0}) * x0 + k_loc.at({0, 1}) * x1;
    const double y1 = k_loc.at({1, 0}) * x0 + k_loc.at({1, 1}) * x1;
    CHECK(y0 == doctest::Approx(x0).epsilon(1e-6));
    CHECK(y1 == doctest::Approx(x1).epsilon(1e-6));
}

TEST_CASE("operator fit needs at least one snapshot pair") {
    CHECK_THROWS_AS(fit_local_operator(Tensor::zeros({1, 3, 1}), 1e-6), ShapeError);
}

TEST_CASE("exact recovery holds over random linear systems") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(211, seed));
        const int64_t d = 2 + static_cast<int64_t>(seed % 4);
        // orthogonally diagonalizable generator with well-spread eigenvalues
        auto w = Tensor::randn({d, d}, rng);
        // crude orthogonalization: normalize columns of w against each other
        std::vector<double> qv(w.data().begin(), w.data().end());
        for (int64_t c = 0; c < d; ++c) {
            for (int64_t p = 0; p < c; ++p) {
                double dot = 0.0;
                for (int64_t r = 0; r < d; ++r) dot += qv[r * d + c] * qv[r * d + p];
                for (int64_t r = 0; r < d; ++r) qv[r * d + c] -= dot * qv[r * d + p];
            }
            double nrm = 0.0;
            for (int64_t r = 0; r < d; ++r) nrm += qv[r * d + c] * qv[r * d + c];
            nrm = std::sqrt(nrm);
            for (int64_t r = 0; r < d; ++r) qv[r * d + c] /= nrm;
        }
        std::vector<double> mv(d * d, 0.0);
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (int64_t k = 0; k < d; ++k) {
                    const double eig = -0.9 + 1.8 * static_cast<double>(k) /
                                                  std::max<int64_t>(1, d - 1);
                    s += qv[i * d + k] * eig * qv[j * d + k];
                }
                mv[i * d + j] = s;
            }
        }
        auto m = Tensor::from_vector({d, d}, std::move(mv));
        std::vector<double> x0(d);
        for (auto& v : x0) v = rng.normal(0, 1) + 2.0;
        auto traj = linear_trajectory(m, x0, d + 3);
        auto k_loc = reshape(fit_local_operator(traj, 1e-13), {d, d});
        CHECK(rel_fro_diff(k_loc, m) < 1e-6);
    }
}

TEST_CASE("one-step residual is least among random competitors") {
    Rng rng(31);
    const int64_t d = 3, n = 6;
    auto x_star = Tensor::randn({1, d, n}, rng);
    auto k_loc = reshape(fit_local_operator(x_star, 1e-10), {d, d});
    auto back = reshape(slice(x_star, 2, 0, n - 1), {d, n - 1});
    auto fore = reshape(slice(x_star, 2, 1, n), {d, n - 1});
    auto resid_norm = [&](const Tensor& m) {
        auto r = sub(fore, matmul(m, back));
        double s = 0.0;
        for (double v : r.data()) s += v * v;
        return std::sqrt(s);
    };
    const double best = resid_norm(k_loc);
    for (int rep = 0; rep < 300; ++rep) {
        auto m = Tensor::randn({d, d}, rng);
        CHECK(best <= resid_norm(m) + 1e-9);
    }
}

TEST_CASE("rollout with the identity operator repeats the seed column") {
    auto x1 = Tensor::from_vector({2, 1}, {3, -1});
    auto [c, h] = rollout(Tensor::eye(2), x1, 3, 2);
    REQUIRE(c.shape() == Shape{2, 3});
    REQUIRE(h.shape() == Shape{2, 2});
    for (int64_t j = 0; j < 3; ++j) {
        CHECK(c.at({0, j}) == 3.0);
        CHECK(c.at({1, j}) == -1.0);
    }
    for (int64_t j = 0; j < 2; ++j) {
        CHECK(h.at({0, j}) == 3.0);
        CHECK(h.at({1, j}) == -1.0);
    }
}

TEST_CASE("rollout with the zero operator dies after the first column") {
    auto x1 = Tensor::from_vector({2, 1}, {3, -1});
    auto [c, h] = rollout(Tensor::zeros({2, 2}), x1, 3, 2);
    CHECK(c.at({0, 0}) == 3.0);
    CHECK(c.at({1, 0}) == -1.0);
    for (int64_t j = 1; j < 3; ++j) {
        CHECK(c.at({0, j}) == 0.0);
        CHECK(c.at({1, j}) == 0.0);
    }
    for (double v : h.data()) CHECK(v == 0.0);
}

TEST_CASE("rollout halves under a 0.5 contraction") {
    auto k = Tensor::from_vector({1, 1}, {0.5});
    auto x1 = Tensor::from_vector({1, 1}, {1.0});
    auto [c, h] = rollout(k, x1, 2, 2);
    CHECK(c.at({0, 0}) == 1.0);
    CHECK(c.at({0, 1}) == 0.5);
    CHECK(h.at({0, 0}) == 0.25);
    CHECK(h.at({0, 1}) == 0.125);
}

TEST_CASE("rollout columns chain across the context/horizon boundary") {
    Rng rng(37);
    auto k = Tensor::randn({3, 3}, rng, 0.0, 0.4);
    auto x1 = Tensor::randn({3, 1}, rng);
    auto [c, h] = rollout(k, x1, 4, 3);
    auto check_next = [&](const Tensor& prev_col, const Tensor& next_col) {
        auto want = matmul(k, prev_col);
        for (int64_t i = 0; i < 3; ++i) {
            CHECK(next_col.at({i, 0}) == doctest::Approx(want.at({i, 0})).epsilon(1e-13));
        }
    };
    for (int64_t j = 0; j + 1 < 4; ++j) {
        check_next(slice(c, 1, j, j + 1), slice(c, 1, j + 1, j + 2));
    }
    check_next(slice(c, 1, 3, 4), slice(h, 1, 0, 1));  // boundary
    for (int64_t j = 0; j + 1 < 3; ++j) {
        check_next(slice(h, 1, j, j + 1), slice(h, 1, j + 1, j + 2));
    }
}

TEST_CASE("rollout reports the step at which it blew up") {
    auto k = Tensor::from_vector({1, 1}, {1e200});
    auto x1 = Tensor::from_vector({1, 1}, {1e200});
    CHECK_THROWS_WITH_AS(rollout(k, x1, 2, 2), doctest::Contains("step 1"), NumericError);
    CHECK_THROWS_AS(rollout(k, x1, 0, 2), ShapeError);
}

TEST_SUITE_END();
