#include "koopkal/vae.hpp"

#include <cmath>

#include "koopkal/kalman.hpp"

namespace koopkal {

DecoderHead DecoderHead::init(int64_t dim, int64_t out_dim, Rng& rng, bool sigma_head) {
    const int64_t h = 2 * dim;
    DecoderHead head;
    head.w1 = Tensor::randn({h, dim}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    head.b1 = Tensor::zeros({h});
    head.w2 = Tensor::randn({h, h}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(h)));
    head.b2 = Tensor::zeros({h});
    head.w3 = Tensor::randn({out_dim, h}, rng, 0.0, 1e-2 / std::sqrt(static_cast<double>(h)));
    head.b3 = sigma_head ? Tensor::full({out_dim}, identity_diag_raw()) : Tensor::zeros({out_dim});
    const double skip_scale = sigma_head ? 1e-3 : 1.0 / std::sqrt(static_cast<double>(dim));
    head.skip_w = Tensor::randn({out_dim, dim}, rng, 0.0, skip_scale);
    for (Tensor* t : {&head.w1, &head.b1, &head.w2, &head.b2, &head.w3, &head.b3, &head.skip_w}) {
        t->set_requires_grad(true);
    }
    return head;
}

Tensor DecoderHead::apply(const Tensor& tokens) const {
    if (tokens.dim() != 3 || tokens.shape()[1] != w1.shape()[1]) {
        throw ShapeError("decoder head: tokens " + shape_str(tokens.shape()) +
                         " do not match input dimension " + std::to_string(w1.shape()[1]));
    }
    auto h1 = tanh(add(matmul(w1, tokens), reshape(b1, {1, b1.numel(), 1})));
    auto h2 = tanh(add(matmul(w2, h1), reshape(b2, {1, b2.numel(), 1})));
    auto branch = add(matmul(w3, h2), reshape(b3, {1, b3.numel(), 1}));
    return add(branch, matmul(skip_w, tokens));
}

void DecoderHead::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".b2", b2});
    out.push_back({prefix + ".w3", w3});
    out.push_back({prefix + ".b3", b3});
    out.push_back({prefix + ".skip_w", skip_w});
}

Tensor resample(const VariationalPosterior& posterior, const Tensor& eps) {
    if (eps.shape() != posterior.means.shape()) {
        throw ShapeError("resample: noise " + shape_str(eps.shape()) +
                         " does not match posterior means " + shape_str(posterior.means.shape()));
    }
    const int64_t m = posterior.means.shape()[posterior.means.dim() - 1];
    if (static_cast<int64_t>(posterior.covariances.size()) != m) {
        throw ShapeError("resample: covariance count " +
                         std::to_string(posterior.covariances.size()) +
                         " does not match token count " + std::to_string(m));
    }
    std::vector<Tensor> columns;
    columns.reserve(m);
    for (int64_t k = 0; k < m; ++k) {
        auto l = cholesky(posterior.covariances[k]);
        auto eps_k = slice(eps, -1, k, k + 1);
        auto mean_k = slice(posterior.means, -1, k, k + 1);
        columns.push_back(add(mean_k, matmul(l, eps_k)));
    }
    return m == 1 ? columns[0] : concat(columns, -1);
}

DecodedGaussian decode(const DecoderHeads& heads, const Tensor& z_sample,
                       const WindowBatch& batch) {
    const int64_t vars = batch.vars();
    auto mu_tokens = heads.mu.apply(z_sample);
    auto mu_std = unpatchify(mu_tokens, vars);
    auto sigma_raw = unpatchify(heads.sigma.apply(z_sample), vars);
    auto sigma_std = scalar_add(softplus(sigma_raw), kSigmaFloor);
    DecodedGaussian out;
    out.mu = destandardize(mu_std, batch.mean, batch.std);
    out.sigma = scale_by_std(sigma_std, batch.std);
    return out;
}

Tensor reconstruct_context(const DecoderHead& mu_head, const Tensor& x_hat_c,
                           const WindowBatch& batch) {
    auto tokens = mu_head.apply(x_hat_c);
    auto rec_std = unpatchify(tokens, batch.vars());
    return destandardize(rec_std, batch.mean, batch.std);
}

Tensor gaussian_nll(const Tensor& y, const Tensor& mu, const Tensor& sigma) {
    if (y.shape() != mu.shape() || y.shape() != sigma.shape()) {
        throw ShapeError("gaussian_nll: shapes differ, y " + shape_str(y.shape()) + ", mu " +
                         shape_str(mu.shape()) + ", sigma " + shape_str(sigma.shape()));
    }
    for (double s : sigma.data()) {
        if (!(s > 0.0)) throw NumericError("gaussian_nll: sigma must be strictly positive");
    }
    const double half_log_2pi = 0.5 * std::log(2.0 * 3.14159265358979323846);
    const int64_t batch = y.dim() >= 1 ? y.shape()[0] : 1;
    const double per_batch = static_cast<double>(y.numel()) / static_cast<double>(batch);
    auto log_sigma = log(sigma);
    auto diff = sub(y, mu);
    auto quad = mul(mul(diff, diff), scalar_mul(exp(scalar_mul(log_sigma, -2.0)), 0.5));
    auto summed = sum_all(add(log_sigma, quad));
    return scalar_add(scalar_mul(summed, 1.0 / static_cast<double>(batch)),
                      per_batch * half_log_2pi);
}

Tensor kl_to_standard_normal(const Tensor& z_prime, const std::vector<SpdMatrix>& covariances) {
    const int64_t batch = z_prime.shape()[0];
    const int64_t d = z_prime.shape()[1];
    Tensor shared = Tensor::scalar(0.0);
    for (const auto& p : covariances) {
        if (p.dim() != d) {
            throw ShapeError("kl: covariance dimension " + std::to_string(p.dim()) +
                             " does not match state dimension " + std::to_string(d));
        }
        auto l = cholesky(p);
        auto log_det = scalar_mul(sum_all(log(diag_part(l))), 2.0);
        auto trace = sum_all(diag_part(p.mat));
        shared = add(shared, sub(trace, log_det));
    }
    const double m = static_cast<double>(covariances.size());
    auto zz = scalar_mul(sum_all(mul(z_prime, z_prime)), 1.0 / static_cast<double>(batch));
    return scalar_mul(scalar_add(add(shared, zz), -m * static_cast<double>(d)), 0.5);
}

LossBreakdown total_loss(const Tensor& y, const DecodedGaussian& forecast,
                         const Tensor& z_prime, const std::vector<SpdMatrix>& covariances,
                         const Tensor& x, const Tensor& x_rec, double beta_kl,
                         double lambda_rec) {
    if (beta_kl < 0.0 || lambda_rec < 0.0) {
        throw ShapeError("total_loss: loss weights must be nonnegative");
    }
    auto nll = gaussian_nll(y, forecast.mu, forecast.sigma);
    auto kl = kl_to_standard_normal(z_prime, covariances);
    auto diff = sub(x, x_rec);
    const int64_t batch = x.shape()[0];
    auto rec = scalar_mul(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(batch));

    LossBreakdown out;
    out.nll = nll.item();
    out.kl = kl.item();
    out.rec = rec.item();
    out.total = add(nll, add(scalar_mul(kl, beta_kl), scalar_mul(rec, lambda_rec)));
    return out;
}

}  // namespace koopkal
