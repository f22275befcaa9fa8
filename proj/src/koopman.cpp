#include "koopkal/koopman.hpp"

#include <cmath>

#include "koopkal/linalg.hpp"

namespace koopkal {

MeasurementMlp MeasurementMlp::init(int64_t dim, Rng& rng) {
    const int64_t h = 2 * dim;
    MeasurementMlp m;
    m.w1 = Tensor::randn({h, dim}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    m.b1 = Tensor::zeros({h});
    m.w2 = Tensor::randn({h, h}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(h)));
    m.b2 = Tensor::zeros({h});
    m.w3 = Tensor::randn({dim, h}, rng, 0.0, 1e-2 / std::sqrt(static_cast<double>(h)));
    m.b3 = Tensor::zeros({dim});
    for (Tensor* t : {&m.w1, &m.b1, &m.w2, &m.b2, &m.w3, &m.b3}) t->set_requires_grad(true);
    return m;
}

Tensor MeasurementMlp::apply(const Tensor& tokens) const {
    if (tokens.dim() != 3 || tokens.shape()[1] != w1.shape()[1]) {
        throw ShapeError("measurement: tokens " + shape_str(tokens.shape()) +
                         " do not match dimension " + std::to_string(w1.shape()[1]));
    }
    auto h1 = tanh(add(matmul(w1, tokens), reshape(b1, {1, b1.numel(), 1})));
    auto h2 = tanh(add(matmul(w2, h1), reshape(b2, {1, b2.numel(), 1})));
    auto branch = add(matmul(w3, h2), reshape(b3, {1, b3.numel(), 1}));
    return add(tokens, branch);
}

void MeasurementMlp::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".b2", b2});
    out.push_back({prefix + ".w3", w3});
    out.push_back({prefix + ".b3", b3});
}

Tensor measure(const MeasurementMlp& psi, const Tensor& tokens) { return psi.apply(tokens); }

Tensor fit_local_operator(const Tensor& x_star, double lambda) {
    if (x_star.dim() != 3) {
        throw ShapeError("fit_local_operator: expected batch×d×n tokens, got " +
                         shape_str(x_star.shape()));
    }
    const int64_t n = x_star.shape()[2];
    if (n < 2) {
        throw ShapeError("fit_local_operator: need at least 2 tokens for a snapshot pair, got " +
                         std::to_string(n));
    }
    auto back = slice(x_star, 2, 0, n - 1);
    auto fore = slice(x_star, 2, 1, n);
    return matmul(fore, ridge_pinv(back, lambda));
}

std::pair<Tensor, Tensor> rollout(const Tensor& k, const Tensor& x1, int64_t n, int64_t m) {
    if (n < 1 || m < 1) {
        throw ShapeError("rollout: need n >= 1 and m >= 1");
    }
    std::vector<Tensor> context, horizon;
    context.reserve(n);
    horizon.reserve(m);
    Tensor col = x1;
    context.push_back(col);
    for (int64_t step = 1; step < n + m; ++step) {
        col = matmul(k, col);
        if (!col.all_finite()) {
            throw NumericError("rollout: non-finite value at step " + std::to_string(step) +
                               " (operator may be unstable)");
        }
        if (step < n) {
            context.push_back(col);
        } else {
            horizon.push_back(col);
        }
    }
    auto x_hat_c = n == 1 ? context[0] : concat(context, -1);
    auto x_hat_h = m == 1 ? horizon[0] : concat(horizon, -1);
    return {x_hat_c, x_hat_h};
}

}  // namespace koopkal
