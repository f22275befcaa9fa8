#pragma once

#include <vector>

#include "koopkal/linalg.hpp"
#include "koopkal/tensor.hpp"
#include "koopkal/tokenizer.hpp"

namespace koopkal {

// Product of per-token Gaussians N(z'_k, P_k) in measurement space. The
// covariances come out of the filter recursion, which never touches the
// data, so one list serves the whole batch.
struct VariationalPosterior {
    Tensor means;                        // batch×d×m
    std::vector<SpdMatrix> covariances;  // m entries
};

// Token-space head mirroring the measurement MLP (two tanh layers of width
// 2d) with a learnable linear bypass, mapping d → out_dim per token.
struct DecoderHead {
    Tensor w1, b1;    // 2d×d, 2d
    Tensor w2, b2;    // 2d×2d, 2d
    Tensor w3, b3;    // out×2d, out
    Tensor skip_w;    // out×d

    static DecoderHead init(int64_t dim, int64_t out_dim, Rng& rng, bool sigma_head);
    Tensor apply(const Tensor& tokens) const;  // batch×d×m -> batch×out×m
    void collect(std::vector<NamedParam>& out, const std::string& prefix) const;
};

struct DecoderHeads {
    DecoderHead mu;
    DecoderHead sigma;
};

constexpr double kSigmaFloor = 1e-6;

// Reparameterized draw: z_k = z'_k + chol(P_k)·ε_k per token. With eps
// supplied the map is deterministic and differentiable in (Z', P).
Tensor resample(const VariationalPosterior& posterior, const Tensor& eps);

struct DecodedGaussian {
    Tensor mu;     // batch×N×L, original scale
    Tensor sigma;  // batch×N×L, strictly positive
};

// Head outputs un-patched back to the original layout and de-standardized
// with the window statistics; sigma passes through softplus plus the floor
// and scales with the window std.
DecodedGaussian decode(const DecoderHeads& heads, const Tensor& z_sample,
                       const WindowBatch& batch);

// Mean-head decoding of the operator reconstruction over the n context
// tokens: batch×N×T, de-standardized.
Tensor reconstruct_context(const DecoderHead& mu_head, const Tensor& x_hat_c,
                           const WindowBatch& batch);

// Mean over the batch of the summed per-coordinate Gaussian negative log
// likelihood ½log(2π) + log σ + (y−μ)²/(2σ²).
Tensor gaussian_nll(const Tensor& y, const Tensor& mu, const Tensor& sigma);

// KL(q ‖ N(0,I)) summed over tokens, batch-averaged; log det through the
// Cholesky diagonal.
Tensor kl_to_standard_normal(const Tensor& z_prime, const std::vector<SpdMatrix>& covariances);

struct LossBreakdown {
    Tensor total;
    double nll = 0.0;
    double kl = 0.0;
    double rec = 0.0;
};

LossBreakdown total_loss(const Tensor& y, const DecodedGaussian& forecast,
                         const Tensor& z_prime, const std::vector<SpdMatrix>& covariances,
                         const Tensor& x, const Tensor& x_rec, double beta_kl,
                         double lambda_rec);

}  // namespace koopkal
