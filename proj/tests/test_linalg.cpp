#include <doctest.h>

#include <cmath>

#include "koopkal/linalg.hpp"

using namespace koopkal;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    auto av = a.data(), bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
    return m;
}

double fro_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

Tensor random_spd(int64_t d, Rng& rng, double ridge = 0.5) {
    auto w = Tensor::randn({d, d}, rng);
    auto g = matmul(w, transpose(w));
    return add(g, scalar_mul(Tensor::eye(d), ridge)).detach();
}

// Random matrix with full row rank (rows <= cols keeps that almost sure).
Tensor random_full_row_rank(int64_t rows, int64_t cols, Rng& rng) {
    return Tensor::randn({rows, cols}, rng);
}

}  // namespace

TEST_SUITE_BEGIN("linalg");

TEST_CASE("ridge_pinv of identity is identity") {
    auto p = ridge_pinv(Tensor::eye(3), 0.0);
    CHECK(max_abs_diff(p, Tensor::eye(3)) < 1e-12);
}

TEST_CASE("ridge_pinv of a diagonal matrix inverts the diagonal") {
    auto m = Tensor::from_vector({2, 2}, {2, 0, 0, 4});
    auto p = ridge_pinv(m, 0.0);
    CHECK(p.at({0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.at({1, 1}) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(std::abs(p.at({0, 1})) < 1e-14);
    CHECK(std::abs(p.at({1, 0})) < 1e-14);
}

TEST_CASE("ridge_pinv satisfies the Penrose residual conditions") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(17, seed));
        auto m = random_full_row_rank(4, 6, rng);
        auto p = ridge_pinv(m, 1e-10);
        auto mpm = matmul(matmul(m, p), m);
        auto pmp = matmul(matmul(p, m), p);
        CHECK(max_abs_diff(mpm, m) < 1e-6);
        CHECK(max_abs_diff(pmp, p) < 1e-6);
    }
}

TEST_CASE("ridge_pinv with lambda=0 on rank-deficient input demands a positive lambda") {
    auto m = Tensor::from_vector({2, 2}, {1, 1, 1, 1});
    CHECK_THROWS_WITH_AS(ridge_pinv(m, 0.0), doctest::Contains("positive lambda"), NumericError);
}

TEST_CASE("cholesky of identity is identity") {
    CHECK(max_abs_diff(cholesky(Tensor::eye(2)), Tensor::eye(2)) < 1e-15);
}

TEST_CASE("cholesky matches hand expansion on 2x2") {
    // [[4,2],[2,5]] = L·Lᵀ with L = [[2,0],[1,2]]
    auto a = Tensor::from_vector({2, 2}, {4, 2, 2, 5});
    auto l = cholesky(a);
    CHECK(l.at({0, 0}) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(l.at({1, 0}) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(l.at({1, 1}) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(l.at({0, 1}) == 0.0);
}

TEST_CASE("cholesky of an indefinite matrix reports the failing minor") {
    auto a = Tensor::from_vector({2, 2}, {1, 2, 2, 1});  // eigenvalues 3, -1
    try {
        (void)cholesky(a);
        FAIL("expected PdError");
    } catch (const PdError& e) {
        CHECK(e.minor_index == 2);
    }
}

TEST_CASE("cholesky reconstructs the input within 1e-10 relative") {
    Rng rng(5);
    for (int rep = 0; rep < 5; ++rep) {
        auto a = random_spd(6, rng);
        auto l = cholesky(a);
        auto rec = matmul(l, transpose(l));
        CHECK(max_abs_diff(rec, a) / fro_norm(a) < 1e-10);
    }
}

TEST_CASE("cholesky gradient matches finite differences") {
    for (int64_t d : {2, 4, 6}) {
        Rng rng(derive_seed(23, static_cast<uint64_t>(d)));
        auto a = random_spd(d, rng, 1.0);
        a.set_requires_grad(true);
        auto w = Tensor::randn({d, d}, rng);
        std::vector<NamedParam> params{{"a", a}};
        auto f = [&] { return sum_all(mul(cholesky(a), w)); };
        auto report = finite_difference_check(f, params, 1e-5, 1e-4);
        CHECK(report.all_pass);
    }
}

TEST_CASE("solve_spd with identity returns the right-hand side") {
    Rng rng(9);
    auto b = Tensor::randn({3, 2}, rng);
    CHECK(max_abs_diff(solve_spd(Tensor::eye(3), b), b) < 1e-14);
}

TEST_CASE("solve_spd inverts a diagonal scaling") {
    auto a = Tensor::from_vector({2, 2}, {2, 0, 0, 2});
    auto b = Tensor::from_vector({2, 1}, {4, 6});
    auto x = solve_spd(a, b);
    CHECK(x.at({0, 0}) == doctest::Approx(2.0));
    CHECK(x.at({1, 0}) == doctest::Approx(3.0));
}

TEST_CASE("solve_spd residual stays below 1e-9 on random SPD systems") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(31, seed));
        auto a = random_spd(5, rng);
        auto b = Tensor::randn({5, 3}, rng);
        auto x = solve_spd(a, b);
        auto resid = sub(matmul(a, x), b);
        CHECK(fro_norm(resid) / fro_norm(b) < 1e-9);
    }
}

TEST_CASE("solve_spd agrees with the ridge_pinv route on SPD systems") {
    Rng rng(37);
    auto a = random_spd(4, rng);
    auto b = Tensor::randn({4, 2}, rng);
    auto x1 = solve_spd(a, b);
    auto x2 = matmul(ridge_pinv(a, 0.0), b);
    CHECK(max_abs_diff(x1, x2) < 1e-8);
}

TEST_CASE("solve_spd gradients match finite differences") {
    Rng rng(41);
    auto a = random_spd(3, rng, 1.0);
    auto b = Tensor::randn({3, 2}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto w = Tensor::randn({3, 2}, rng);
    std::vector<NamedParam> params{{"a", a}, {"b", b}};
    auto f = [&] { return sum_all(mul(solve_spd(a, b), w)); };
    auto report = finite_difference_check(f, params, 1e-5, 1e-4);
    CHECK(report.all_pass);
}

TEST_CASE("batched solve_spd matches per-element solves") {
    Rng rng(43);
    std::vector<Tensor> as, bs;
    std::vector<double> a_flat, b_flat;
    for (int t = 0; t < 3; ++t) {
        auto a = random_spd(4, rng);
        auto b = Tensor::randn({4, 2}, rng);
        as.push_back(a);
        bs.push_back(b);
        a_flat.insert(a_flat.end(), a.data().begin(), a.data().end());
        b_flat.insert(b_flat.end(), b.data().begin(), b.data().end());
    }
    auto x = solve_spd(Tensor::from_vector({3, 4, 4}, a_flat),
                       Tensor::from_vector({3, 4, 2}, b_flat));
    for (int t = 0; t < 3; ++t) {
        auto ref = solve_spd(as[t], bs[t]);
        for (int64_t i = 0; i < 4; ++i) {
            for (int64_t j = 0; j < 2; ++j) {
                CHECK(x.at({t, i, j}) == doctest::Approx(ref.at({i, j})).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("symmetrize leaves symmetric input unchanged and averages the rest") {
    auto s = Tensor::from_vector({2, 2}, {1, 3, 3, 2});
    CHECK(max_abs_diff(symmetrize(s), s) == 0.0);

    auto a = Tensor::from_vector({2, 2}, {1, 2, 0, 1});
    auto out = symmetrize(a);
    CHECK(out.at({0, 0}) == 1.0);
    CHECK(out.at({0, 1}) == 1.0);
    CHECK(out.at({1, 0}) == 1.0);
    CHECK(out.at({1, 1}) == 1.0);

    Rng rng(47);
    auto r = symmetrize(Tensor::randn({5, 5}, rng));
    CHECK(max_abs_diff(r, transpose(r)) == 0.0);

    CHECK_THROWS_AS(symmetrize(Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("is_positive_definite distinguishes PD from indefinite") {
    CHECK(is_positive_definite(Tensor::eye(3)).positive_definite);

    auto nearly = Tensor::from_vector({2, 2}, {1, 0, 0, -1e-6});
    auto check = is_positive_definite(nearly);
    CHECK_FALSE(check.positive_definite);
    CHECK(check.min_eigenvalue_estimate == doctest::Approx(-1e-6).epsilon(1e-3));

    Rng rng(53);
    auto spd = random_spd(5, rng);
    auto c2 = is_positive_definite(spd);
    CHECK(c2.positive_definite);
    CHECK(c2.min_eigenvalue_estimate > 0.0);
}

TEST_CASE("SpdMatrix records jitter only when the ladder needed it") {
    auto clean = SpdMatrix::from(Tensor::eye(3));
    CHECK(clean.jitter_applied == 0.0);

    // tiny negative eigenvalue: diag(1, -1e-12) needs a rung of the ladder
    auto wobbly = Tensor::from_vector({2, 2}, {1.0, 0.0, 0.0, -1e-12});
    auto fixed = SpdMatrix::from(wobbly);
    CHECK(fixed.jitter_applied > 0.0);
    CHECK_NOTHROW((void)cholesky(fixed));

    auto hopeless = Tensor::from_vector({2, 2}, {1, 2, 2, 1});
    CHECK_THROWS_AS(SpdMatrix::from(hopeless), PdError);

    auto asym = Tensor::from_vector({2, 2}, {1, 0.5, 0, 1});
    CHECK_THROWS_AS(SpdMatrix::from(asym), ShapeError);
}

TEST_SUITE_END();
