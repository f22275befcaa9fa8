#include <doctest.h>

#include <cmath>
#include <cstring>

#include "koopkal/tensor.hpp"

using namespace koopkal;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool grad = true) {
    Tensor t = Tensor::randn(std::move(shape), rng);
    t.set_requires_grad(grad);
    return t;
}

bool approx_equal(const Tensor& a, const Tensor& b, double tol = 1e-12) {
    if (a.shape() != b.shape()) return false;
    auto av = a.data(), bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) {
        if (std::abs(av[i] - bv[i]) > tol) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity leaves matrix unchanged") {
    auto a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
    auto out = matmul(a, Tensor::eye(2));
    CHECK(approx_equal(out, a));
}

TEST_CASE("softplus(0) equals ln 2") {
    auto out = softplus(Tensor::scalar(0.0));
    CHECK(out.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("transpose of product equals reversed product of transposes") {
    Rng rng(7);
    auto a = Tensor::randn({3, 4}, rng);
    auto b = Tensor::randn({4, 2}, rng);
    auto lhs = transpose(matmul(a, b));
    auto rhs = matmul(transpose(b), transpose(a));
    CHECK(approx_equal(lhs, rhs));
}

TEST_CASE("backward of sum gives ones") {
    auto x = Tensor::from_vector({3}, {5, -1, 2});
    x.set_requires_grad(true);
    sum_all(x).backward();
    auto g = x.grad();
    for (double v : g) CHECK(v == 1.0);
}

TEST_CASE("backward of sum of squares gives 2x") {
    auto x = Tensor::from_vector({3}, {1, 2, 3});
    x.set_requires_grad(true);
    sum_all(mul(x, x)).backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("graph reused in two branches accumulates additively") {
    auto x = Tensor::from_vector({4}, {1, 2, 3, 4});
    x.set_requires_grad(true);
    add(sum_all(x), sum_all(x)).backward();
    for (double v : x.grad()) CHECK(v == 2.0);
}

TEST_CASE("two backward calls accumulate into leaf grads") {
    auto x = Tensor::from_vector({2}, {1, 1});
    x.set_requires_grad(true);
    auto loss = sum_all(x);
    loss.backward();
    loss.backward();
    for (double v : x.grad()) CHECK(v == 2.0);
}

TEST_CASE("backward rejects non-scalar and detached losses") {
    auto x = Tensor::from_vector({2}, {1, 2});
    x.set_requires_grad(true);
    CHECK_THROWS_AS(mul(x, x).backward(), ShapeError);
    CHECK_THROWS_AS(x.backward(), ShapeError);  // leaf: not graph-attached
    auto detached = mul(x, x).detach();
    CHECK_THROWS_AS(sum_all(detached).backward(), ShapeError);
}

TEST_CASE("shape mismatches are reported with dimensions") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b),
                         doctest::Contains("inner dimensions differ"), ShapeError);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), ShapeError);
}

TEST_CASE("broadcasting: scalar, trailing suffix, explicit ones") {
    auto x = Tensor::ones({2, 3, 4});
    CHECK(add(x, Tensor::scalar(1.0)).at({0, 0, 0}) == 2.0);

    // trailing suffix (4) against (2,3,4)
    auto row = Tensor::from_vector({4}, {1, 2, 3, 4});
    auto y = add(x, row);
    CHECK(y.at({1, 2, 3}) == 5.0);

    // explicit size-1 axis after reshape
    auto col = reshape(Tensor::from_vector({3}, {10, 20, 30}), {1, 3, 1});
    auto z = add(x, col);
    CHECK(z.at({0, 1, 0}) == 21.0);

    // non-suffix rank extension must be rejected
    CHECK_THROWS_AS(add(x, Tensor::ones({3})), ShapeError);
}

TEST_CASE("reshape and transpose are bijective on data") {
    Rng rng(3);
    auto a = Tensor::randn({3, 5}, rng);
    auto round1 = reshape(reshape(a, {5, 3}), {3, 5});
    auto round2 = transpose(transpose(a));
    auto av = a.data();
    auto r1 = round1.data(), r2 = round2.data();
    for (size_t i = 0; i < av.size(); ++i) {
        CHECK(std::memcmp(&av[i], &r1[i], 8) == 0);
        CHECK(std::memcmp(&av[i], &r2[i], 8) == 0);
    }
}

TEST_CASE("batched matmul broadcasts a shared 2D operand") {
    Rng rng(11);
    auto w = Tensor::randn({2, 3}, rng);
    auto x = Tensor::randn({4, 3, 5}, rng);
    auto out = matmul(w, x);
    REQUIRE(out.shape() == Shape{4, 2, 5});
    // per-batch result matches unbatched matmul
    for (int64_t t = 0; t < 4; ++t) {
        auto xt = slice(x, 0, t, t + 1);
        auto ref = matmul(w, reshape(xt, {3, 5}));
        for (int64_t i = 0; i < 2; ++i) {
            for (int64_t j = 0; j < 5; ++j) {
                CHECK(out.at({t, i, j}) == doctest::Approx(ref.at({i, j})).epsilon(1e-14));
            }
        }
    }
}

TEST_CASE("non-finite op output raises in full-scan mode") {
    set_finite_check_mode(FiniteCheckMode::All);
    auto big = Tensor::full({2}, 1e6);
    CHECK_THROWS_AS((void)exp(big), NumericError);
}

TEST_CASE("NoGradGuard produces detached outputs") {
    auto x = Tensor::ones({2});
    x.set_requires_grad(true);
    NoGradGuard ng;
    auto y = sum_all(x);
    CHECK(y.node().is_leaf());
}

TEST_CASE("finite_difference_check on x^2 at x=3") {
    auto x = Tensor::from_vector({1}, {3.0});
    x.set_requires_grad(true);
    std::vector<NamedParam> params{{"x", x}};
    auto report = finite_difference_check([&] { return sum_all(mul(x, x)); }, params, 1e-5, 1e-6);
    REQUIRE(report.entries.size() == 1);
    CHECK(report.entries[0].max_rel_err < 1e-8);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("finite_difference_check reports zero error for constant f") {
    auto x = Tensor::from_vector({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    std::vector<NamedParam> params{{"x", x}};
    auto c = Tensor::scalar(5.0);
    auto report = finite_difference_check(
        [&] { return add(sum_all(scalar_mul(x, 0.0)), c); }, params, 1e-5, 1e-6);
    CHECK(report.worst_rel_err == 0.0);
    CHECK(report.all_pass);
}

TEST_CASE("finite_difference_check rejects non-deterministic f") {
    auto x = Tensor::from_vector({1}, {1.0});
    x.set_requires_grad(true);
    std::vector<NamedParam> params{{"x", x}};
    int calls = 0;
    CHECK_THROWS_AS(finite_difference_check(
                        [&] {
                            ++calls;
                            return add(sum_all(x), Tensor::scalar(0.1 * calls));
                        },
                        params, 1e-5, 1e-6),
                    NumericError);
}

TEST_CASE("two-layer tanh MLP gradients match finite differences") {
    Rng rng(42);
    auto w1 = rand_tensor({4, 3}, rng);
    auto b1 = rand_tensor({4, 1}, rng);
    auto w2 = rand_tensor({1, 4}, rng);
    auto b2 = rand_tensor({1, 1}, rng);
    auto x = Tensor::randn({3, 1}, rng);
    std::vector<NamedParam> params{{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
    auto f = [&] {
        auto h = tanh(add(matmul(w1, x), b1));
        return sum_all(add(matmul(w2, h), b2));
    };
    auto report = finite_difference_check(f, params, 1e-5, 1e-4);
    CHECK(report.all_pass);
    CHECK(report.worst_rel_err <= 1e-4);
}

// Property: the backward rule of every primitive matches central finite
// differences on randomized inputs, 100 seeds spread over the op set.
TEST_CASE("every primitive passes randomized gradient checks") {
    const std::vector<OpKind> kinds = {
        OpKind::Matmul, OpKind::Add, OpKind::Sub, OpKind::Mul, OpKind::Div,
        OpKind::ScalarMul, OpKind::Transpose, OpKind::Permute, OpKind::Reshape,
        OpKind::Slice, OpKind::Concat, OpKind::SumAll, OpKind::MeanAll,
        OpKind::Exp, OpKind::Log, OpKind::Tanh, OpKind::Relu, OpKind::Softplus,
        OpKind::Softmax, OpKind::LayerNorm, OpKind::DiagPart, OpKind::DiagEmbed};

    double worst = 0.0;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(derive_seed(991, seed));
        OpKind kind = kinds[seed % kinds.size()];
        std::vector<Tensor> inputs;
        OpAttrs attrs;
        switch (kind) {
            case OpKind::Matmul:
                inputs = {rand_tensor({2, 3, 2}, rng), rand_tensor({2, 4}, rng)};
                break;
            case OpKind::Add:
            case OpKind::Sub:
            case OpKind::Mul:
                inputs = {rand_tensor({2, 3, 4}, rng), rand_tensor({3, 4}, rng)};
                break;
            case OpKind::Div: {
                auto denom = Tensor::randn({2, 3, 4}, rng);
                for (auto& v : denom.data_mut()) v = std::abs(v) + 0.5;
                denom.set_requires_grad(true);
                inputs = {rand_tensor({2, 3, 4}, rng), denom};
                break;
            }
            case OpKind::ScalarMul:
                inputs = {rand_tensor({3, 4}, rng)};
                attrs.scalar = rng.uniform(-2.0, 2.0);
                break;
            case OpKind::Transpose:
                inputs = {rand_tensor({3, 4}, rng)};
                break;
            case OpKind::Permute:
                inputs = {rand_tensor({2, 3, 4}, rng)};
                attrs.perm = {2, 0, 1};
                break;
            case OpKind::Reshape:
                inputs = {rand_tensor({3, 4}, rng)};
                attrs.shape = {2, 6};
                break;
            case OpKind::Slice:
                inputs = {rand_tensor({3, 5}, rng)};
                attrs.axis = 1;
                attrs.start = 1;
                attrs.stop = 4;
                break;
            case OpKind::Concat:
                inputs = {rand_tensor({2, 3}, rng), rand_tensor({2, 2}, rng)};
                attrs.axis = 1;
                break;
            case OpKind::SumAll:
            case OpKind::MeanAll:
            case OpKind::Tanh:
            case OpKind::Relu:
            case OpKind::Softplus:
                inputs = {rand_tensor({3, 4}, rng)};
                break;
            case OpKind::Exp:
                inputs = {rand_tensor({3, 4}, rng)};
                break;
            case OpKind::Log: {
                auto pos = Tensor::randn({3, 4}, rng);
                for (auto& v : pos.data_mut()) v = std::abs(v) + 0.5;
                pos.set_requires_grad(true);
                inputs = {pos};
                break;
            }
            case OpKind::Softmax:
                inputs = {rand_tensor({2, 3, 4}, rng)};
                attrs.axis = 2;
                break;
            case OpKind::LayerNorm:
                inputs = {rand_tensor({3, 6}, rng)};
                break;
            case OpKind::DiagPart:
                inputs = {rand_tensor({2, 3, 3}, rng)};
                break;
            case OpKind::DiagEmbed:
                inputs = {rand_tensor({2, 3}, rng)};
                break;
        }

        Tensor probe = apply_primitive(kind, inputs, attrs);
        Tensor weights = Tensor::randn(probe.shape(), rng);
        std::vector<NamedParam> params;
        for (size_t i = 0; i < inputs.size(); ++i) {
            params.push_back({std::string(op_kind_name(kind)) + "#" + std::to_string(i), inputs[i]});
        }
        auto f = [&] { return sum_all(mul(apply_primitive(kind, inputs, attrs), weights)); };
        auto report = finite_difference_check(f, params, 1e-6, 1e-4);
        worst = std::max(worst, report.worst_rel_err);
        if (!report.all_pass) {
            CAPTURE(op_kind_name(kind));
            CAPTURE(seed);
            CHECK(report.all_pass);
        }
    }
    CHECK(worst <= 1e-4);
}

TEST_SUITE_END();
