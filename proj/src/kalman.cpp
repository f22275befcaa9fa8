#include "koopkal/kalman.hpp"

#include <cmath>

namespace koopkal {

namespace {

int64_t pick_heads(int64_t dim) {
    for (int64_t h : {4, 2}) {
        if (dim % h == 0) return h;
    }
    return 1;
}

Tensor linear_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
    // x: batch×n×d_in, w: d_in×d_out, bias broadcast over the trailing axis
    return add(matmul(x, w), b);
}

}  // namespace

IntegratorNet IntegratorNet::init(int64_t dim, int64_t n_in, int64_t m_out, Rng& rng) {
    IntegratorNet net;
    net.heads = pick_heads(dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    const double small = 1e-3;

    net.ln1_g = Tensor::ones({dim});
    net.ln1_b = Tensor::zeros({dim});
    net.wq = Tensor::randn({dim, dim}, rng, 0.0, scale);
    net.bq = Tensor::zeros({dim});
    net.wk = Tensor::randn({dim, dim}, rng, 0.0, scale);
    net.bk = Tensor::zeros({dim});
    net.wv = Tensor::randn({dim, dim}, rng, 0.0, scale);
    net.bv = Tensor::zeros({dim});
    net.wo = Tensor::randn({dim, dim}, rng, 0.0, small * scale);
    net.bo = Tensor::zeros({dim});
    net.ln2_g = Tensor::ones({dim});
    net.ln2_b = Tensor::zeros({dim});
    net.ff1_w = Tensor::randn({dim, 4 * dim}, rng, 0.0, scale);
    net.ff1_b = Tensor::zeros({4 * dim});
    net.ff2_w = Tensor::randn({4 * dim, dim}, rng, 0.0, small / std::sqrt(4.0 * dim));
    net.ff2_b = Tensor::zeros({dim});

    std::vector<double> map(n_in * m_out);
    for (int64_t i = 0; i < n_in; ++i) {
        for (int64_t j = 0; j < m_out; ++j) {
            map[i * m_out + j] = (i == j ? 1.0 : 0.0) + rng.normal(0.0, small);
        }
    }
    net.map_w = Tensor::from_vector({n_in, m_out}, std::move(map));
    net.map_b = Tensor::zeros({m_out});

    for (Tensor* t : {&net.ln1_g, &net.ln1_b, &net.wq, &net.bq, &net.wk, &net.bk, &net.wv,
                      &net.bv, &net.wo, &net.bo, &net.ln2_g, &net.ln2_b, &net.ff1_w, &net.ff1_b,
                      &net.ff2_w, &net.ff2_b, &net.map_w, &net.map_b}) {
        t->set_requires_grad(true);
    }
    return net;
}

Tensor IntegratorNet::apply(const Tensor& x_res) const {
    if (x_res.dim() != 3) {
        throw ShapeError("integrator: expected batch×d×n input, got " + shape_str(x_res.shape()));
    }
    const int64_t batch = x_res.shape()[0];
    const int64_t dim = x_res.shape()[1];
    const int64_t n_tok = x_res.shape()[2];
    if (dim != wq.shape()[0]) {
        throw ShapeError("integrator: token dimension " + std::to_string(dim) +
                         " does not match network dimension " + std::to_string(wq.shape()[0]));
    }
    if (n_tok != map_w.shape()[0]) {
        throw ShapeError("integrator: token count " + std::to_string(n_tok) +
                         " does not match map input " + std::to_string(map_w.shape()[0]));
    }
    const int64_t dh = dim / heads;
    // wide normalization epsilon: the first residual token is structurally
    // zero (the rollout's first column reproduces x1 exactly), and a sharp
    // epsilon makes the norm of a zero token badly conditioned
    const double ln_eps = 1e-2;
    auto split_heads = [&](const Tensor& t) {
        auto r = reshape(t, {batch, n_tok, heads, dh});
        return reshape(permute(r, {0, 2, 1, 3}), {batch * heads, n_tok, dh});
    };

    auto xt = permute(x_res, {0, 2, 1});  // token-major: batch×n×d
    auto a_in = add(mul(layer_norm(xt, ln_eps), ln1_g), ln1_b);
    auto qh = split_heads(linear_rows(a_in, wq, bq));
    auto kh = split_heads(linear_rows(a_in, wk, bk));
    auto vh = split_heads(linear_rows(a_in, wv, bv));
    auto scores = scalar_mul(matmul(qh, permute(kh, {0, 2, 1})),
                             1.0 / std::sqrt(static_cast<double>(dh)));
    auto ctx = matmul(softmax(scores, 2), vh);
    auto merged = reshape(permute(reshape(ctx, {batch, heads, n_tok, dh}), {0, 2, 1, 3}),
                          {batch, n_tok, dim});
    auto x1 = add(xt, linear_rows(merged, wo, bo));

    auto f_in = add(mul(layer_norm(x1, ln_eps), ln2_g), ln2_b);
    auto ff = linear_rows(relu(linear_rows(f_in, ff1_w, ff1_b)), ff2_w, ff2_b);
    auto x2 = add(x1, ff);

    auto back = permute(x2, {0, 2, 1});  // batch×d×n
    return add(matmul(back, map_w), map_b);
}

void IntegratorNet::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".ln1_g", ln1_g});
    out.push_back({prefix + ".ln1_b", ln1_b});
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".bq", bq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".bk", bk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".bv", bv});
    out.push_back({prefix + ".wo", wo});
    out.push_back({prefix + ".bo", bo});
    out.push_back({prefix + ".ln2_g", ln2_g});
    out.push_back({prefix + ".ln2_b", ln2_b});
    out.push_back({prefix + ".ff1_w", ff1_w});
    out.push_back({prefix + ".ff1_b", ff1_b});
    out.push_back({prefix + ".ff2_w", ff2_w});
    out.push_back({prefix + ".ff2_b", ff2_b});
    out.push_back({prefix + ".map_w", map_w});
    out.push_back({prefix + ".map_b", map_b});
}

double identity_diag_raw() { return std::log(std::exp(1.0) - 1.0); }

KalmanParams KalmanParams::init(int64_t dim) {
    KalmanParams p;
    p.a = Tensor::eye(dim);
    p.b = Tensor::eye(dim);
    p.h = Tensor::eye(dim);
    std::vector<double> raw(dim * dim, 0.0);
    for (int64_t i = 0; i < dim; ++i) raw[i * dim + i] = identity_diag_raw();
    p.lq_raw = Tensor::from_vector({dim, dim}, raw);
    p.lr_raw = Tensor::from_vector({dim, dim}, raw);
    p.p0 = Tensor::eye(dim);
    for (Tensor* t : {&p.a, &p.b, &p.h, &p.lq_raw, &p.lr_raw}) t->set_requires_grad(true);
    return p;
}

namespace {

// strict lower part of raw, plus softplus of the raw diagonal
Tensor factor_from_raw(const Tensor& raw) {
    const int64_t d = raw.shape()[0];
    std::vector<double> mask(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < i; ++j) mask[i * d + j] = 1.0;
    }
    auto strict = mul(raw, Tensor::from_vector({d, d}, std::move(mask)));
    return add(strict, diag_embed(softplus(diag_part(raw))));
}

}  // namespace

Tensor KalmanParams::chol_q() const { return factor_from_raw(lq_raw); }
Tensor KalmanParams::chol_r() const { return factor_from_raw(lr_raw); }

void KalmanParams::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".a", a});
    out.push_back({prefix + ".b", b});
    out.push_back({prefix + ".h", h});
    out.push_back({prefix + ".lq_raw", lq_raw});
    out.push_back({prefix + ".lr_raw", lr_raw});
}

std::pair<Tensor, SpdMatrix> predict_step(const KalmanState& state, const Tensor& u,
                                          const KalmanParams& params) {
    auto z_hat = add(matmul(params.a, state.z), matmul(params.b, u));
    auto p_hat = symmetrize(add(matmul(matmul(params.a, state.p.mat), transpose(params.a)),
                                params.q()));
    if (!z_hat.all_finite() || !p_hat.all_finite()) {
        throw NumericError("predict_step: non-finite value at step " +
                           std::to_string(state.step + 1));
    }
    return {z_hat, SpdMatrix::from(p_hat)};
}

Tensor joseph_covariance(const Tensor& p_hat, const Tensor& gain, const Tensor& h,
                         const Tensor& r) {
    const int64_t d = p_hat.shape()[0];
    auto open_loop = sub(Tensor::eye(d), matmul(gain, h));
    auto state_term = matmul(matmul(open_loop, p_hat), transpose(open_loop));
    auto noise_term = matmul(matmul(gain, r), transpose(gain));
    return add(state_term, noise_term);
}

KalmanState update_step(const Tensor& z_hat, const SpdMatrix& p_hat, const Tensor& obs,
                        const KalmanParams& params, int64_t step) {
    auto r = params.r();
    auto innovation_cov =
        symmetrize(add(matmul(matmul(params.h, p_hat.mat), transpose(params.h)), r));
    // K = P̂Hᵀ S⁻¹ = (S⁻¹ H P̂)ᵀ, P̂ symmetric
    Tensor gain;
    try {
        gain = transpose(solve_spd(innovation_cov, matmul(params.h, p_hat.mat)));
    } catch (const PdError& e) {
        throw PdError("update_step: innovation covariance not positive definite at step " +
                          std::to_string(step) + " (leading minor " +
                          std::to_string(e.minor_index) + ")",
                      e.minor_index);
    }
    auto residual = sub(obs, matmul(params.h, z_hat));
    auto z = add(z_hat, matmul(gain, residual));
    auto p = symmetrize(joseph_covariance(p_hat.mat, gain, params.h, r));
    if (!z.all_finite()) {
        throw NumericError("update_step: non-finite state at step " + std::to_string(step));
    }
    return KalmanState{z, SpdMatrix::from(p), step};
}

FilterResult run_filter(const Tensor& z0, const Tensor& u, const Tensor& x_hat_h,
                        const KalmanParams& params) {
    if (u.shape() != x_hat_h.shape()) {
        throw ShapeError("run_filter: control " + shape_str(u.shape()) +
                         " and observations " + shape_str(x_hat_h.shape()) + " differ");
    }
    const int64_t m = u.shape()[u.dim() - 1];
    const int64_t d = params.dim();

    KalmanState state{z0, SpdMatrix::from(Tensor::eye(d)), 0};
    std::vector<Tensor> states;
    states.reserve(m);
    FilterResult result;
    result.covariances.reserve(m);
    for (int64_t k = 0; k < m; ++k) {
        auto u_k = slice(u, -1, k, k + 1);
        auto obs_k = slice(x_hat_h, -1, k, k + 1);
        auto [z_hat, p_hat] = predict_step(state, u_k, params);
        state = update_step(z_hat, p_hat, obs_k, params, k + 1);
        states.push_back(state.z);
        result.covariances.push_back(state.p);
    }
    result.states = m == 1 ? states[0] : concat(states, -1);
    return result;
}

Tensor skip_connect(const Tensor& z, const Tensor& u) {
    if (z.shape() != u.shape()) {
        throw ShapeError("skip_connect: shapes differ, " + shape_str(z.shape()) + " vs " +
                         shape_str(u.shape()));
    }
    return add(z, u);
}

}  // namespace koopkal
