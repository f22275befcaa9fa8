#pragma once

#include <utility>
#include <vector>

#include "koopkal/linalg.hpp"
#include "koopkal/tensor.hpp"

namespace koopkal {

// Residual integrator: one pre-norm self-attention block with feed-forward
// over the n residual tokens, then a learnable linear map along the token
// axis from n to m control tokens. Output/feed-forward projections start
// near zero and the token map near identity, so the block begins as an
// approximate pass-through while every weight still receives gradient.
struct IntegratorNet {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor ff1_w, ff1_b, ff2_w, ff2_b;
    Tensor map_w, map_b;  // n×m, m
    int64_t heads = 1;

    static IntegratorNet init(int64_t dim, int64_t n_in, int64_t m_out, Rng& rng);
    Tensor apply(const Tensor& x_res) const;  // batch×d×n -> batch×d×m
    void collect(std::vector<NamedParam>& out, const std::string& prefix) const;
};

// Learnable linear-Gaussian state-space model. Q and R are kept SPD by
// construction: lower-triangular factors whose diagonals live as raw
// values behind a softplus. Raw diagonals start at softplus⁻¹(1) so both
// covariances begin as exact identities.
struct KalmanParams {
    Tensor a, b, h;           // d×d transition / control / observation
    Tensor lq_raw, lr_raw;    // d×d raw factor storage
    Tensor p0;                // d×d initial covariance (identity, fixed)

    static KalmanParams init(int64_t dim);
    int64_t dim() const { return a.shape()[0]; }

    Tensor chol_q() const;  // L_Q with positive diagonal
    Tensor chol_r() const;
    Tensor q() const { return matmul(chol_q(), transpose(chol_q())); }
    Tensor r() const { return matmul(chol_r(), transpose(chol_r())); }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) const;
};

// Raw value softplus⁻¹(1) = ln(e − 1); diagonal seed for identity Q/R.
double identity_diag_raw();

struct KalmanState {
    Tensor z;     // d×1 or batch×d×1
    SpdMatrix p;  // d×d, shared across the batch (the covariance recursion
                  // never touches the data)
    int64_t step = 0;
};

// ẑ = A·z + B·u, P̂ = A·P·Aᵀ + Q (symmetrized).
std::pair<Tensor, SpdMatrix> predict_step(const KalmanState& state, const Tensor& u,
                                          const KalmanParams& params);

// Gain through an SPD solve, state correction, then the dual-form
// covariance (I−KH)P̂(I−KH)ᵀ + KRKᵀ followed by ½(P+Pᵀ).
KalmanState update_step(const Tensor& z_hat, const SpdMatrix& p_hat, const Tensor& obs,
                        const KalmanParams& params, int64_t step);

// The dual-form covariance itself (before symmetrization); exposed for the
// equivalence suites.
Tensor joseph_covariance(const Tensor& p_hat, const Tensor& gain, const Tensor& h,
                         const Tensor& r);

struct FilterResult {
    Tensor states;                      // d×m or batch×d×m post-update states
    std::vector<SpdMatrix> covariances; // m entries
};

// Iterates predict/update over the m tokens with z₀ given and P₀ = I,
// treating the columns of x_hat_h as the observations. Fully
// graph-attached. Errors are annotated with the failing step.
FilterResult run_filter(const Tensor& z0, const Tensor& u, const Tensor& x_hat_h,
                        const KalmanParams& params);

Tensor skip_connect(const Tensor& z, const Tensor& u);

}  // namespace koopkal
