#pragma once

#include "koopkal/tensor.hpp"

namespace koopkal {

// Symmetric positive-definite matrix wrapper. Construction verifies
// symmetry and probes a Cholesky factorization through the jitter ladder
// {0, 1e-10, 1e-8, 1e-6}·mean(diag), recording whatever jitter was needed.
// A nonzero jitter_applied is a visible sign the source computation is
// degrading.
struct SpdMatrix {
    Tensor mat;  // d×d, possibly graph-attached
    double jitter_applied = 0.0;

    static SpdMatrix from(Tensor a, double sym_tol = 1e-12);
    int64_t dim() const { return mat.shape()[0]; }
};

// ½(A + Aᵀ) over the last two axes; output is exactly symmetric.
Tensor symmetrize(const Tensor& a);

// Lower-triangular L with A = L·Lᵀ. Differentiable. The SpdMatrix overload
// honors the recorded jitter; the Tensor overload factors as-is and throws
// PdError (with the failing leading minor) if A is not positive definite.
Tensor cholesky(const SpdMatrix& a);
Tensor cholesky(const Tensor& a);

// X with A·X = B, via Cholesky. A: (d,d) or (batch,d,d); B: matching rank.
// Differentiable in both arguments.
Tensor solve_spd(const SpdMatrix& a, const Tensor& b);
Tensor solve_spd(const Tensor& a, const Tensor& b);

// Ridge-regularized right pseudoinverse Mᵀ(MMᵀ + λI)⁻¹ of an a×b (or
// batch×a×b) matrix. Converges to the Moore-Penrose inverse as λ→0 on
// full-row-rank input and stays differentiable for λ>0.
Tensor ridge_pinv(const Tensor& m, double lambda);

struct PdCheck {
    bool positive_definite = false;
    double min_eigenvalue_estimate = 0.0;
};

// Diagnostic: true iff a jitter-free Cholesky succeeds; the eigenvalue
// estimate comes from a short shifted power iteration.
PdCheck is_positive_definite(const Tensor& a, double sym_tol = 1e-8);

}  // namespace koopkal
