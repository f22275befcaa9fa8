#include "koopkal/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace koopkal {

namespace {

// Cholesky of the d×d matrix at `a` (lower triangle read), with `jitter`
// added to the diagonal. Returns 0 on success or the 1-based leading minor
// index at which the pivot failed.
int chol_raw(const double* a, double* L, int64_t d, double jitter) {
    std::fill(L, L + d * d, 0.0);
    for (int64_t j = 0; j < d; ++j) {
        double diag = a[j * d + j] + jitter;
        for (int64_t k = 0; k < j; ++k) diag -= L[j * d + k] * L[j * d + k];
        if (!(diag > 0.0) || !std::isfinite(diag)) return static_cast<int>(j + 1);
        const double ljj = std::sqrt(diag);
        L[j * d + j] = ljj;
        for (int64_t i = j + 1; i < d; ++i) {
            double s = a[i * d + j] + (i == j ? jitter : 0.0);
            for (int64_t k = 0; k < j; ++k) s -= L[i * d + k] * L[j * d + k];
            L[i * d + j] = s / ljj;
        }
    }
    return 0;
}

// L z = b, b and z column-major free: here b is d×k row-major.
void forward_subst(const double* L, double* b, int64_t d, int64_t k) {
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t c = 0; c < k; ++c) {
            double s = b[i * k + c];
            for (int64_t j = 0; j < i; ++j) s -= L[i * d + j] * b[j * k + c];
            b[i * k + c] = s / L[i * d + i];
        }
    }
}

// Lᵀ z = b
void back_subst(const double* L, double* b, int64_t d, int64_t k) {
    for (int64_t i = d - 1; i >= 0; --i) {
        for (int64_t c = 0; c < k; ++c) {
            double s = b[i * k + c];
            for (int64_t j = i + 1; j < d; ++j) s -= L[j * d + i] * b[j * k + c];
            b[i * k + c] = s / L[i * d + i];
        }
    }
}

void require_square(const Shape& s, const char* op) {
    if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
        throw ShapeError(std::string(op) + ": expected square matrix dims, got " + shape_str(s));
    }
}

// Pullback of the Cholesky factorization (unblocked level-2 form): given
// the gradient w.r.t. L, produces the symmetric gradient w.r.t. A.
std::vector<double> chol_backward_dense(const std::vector<double>& L,
                                        const std::vector<double>& Lbar_in, int64_t d) {
    // only the lower triangle of L is real output; drop any stray upper grads
    std::vector<double> P(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j <= i; ++j) P[i * d + j] = Lbar_in[i * d + j];
    }
    // M = Lᵀ P
    std::vector<double> M(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (int64_t k = 0; k < d; ++k) s += L[k * d + i] * P[k * d + j];
            M[i * d + j] = s;
        }
    }
    // S = Φ(M) + Φ(M)ᵀ with Φ = lower triangle, halved diagonal
    std::vector<double> S(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < i; ++j) {
            S[i * d + j] += M[i * d + j];
            S[j * d + i] += M[i * d + j];
        }
        S[i * d + i] = M[i * d + i];
    }
    // Ā = ½ L⁻ᵀ S L⁻¹, computed with two triangular solves
    back_subst(L.data(), S.data(), d, d);  // S ← L⁻ᵀ S
    // transpose, solve again, transpose back: Ā = ½ (L⁻ᵀ (L⁻ᵀ S)ᵀ)ᵀ
    std::vector<double> T(d * d);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < d; ++j) T[j * d + i] = S[i * d + j];
    }
    back_subst(L.data(), T.data(), d, d);
    std::vector<double> A_bar(d * d);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < d; ++j) A_bar[i * d + j] = 0.5 * T[j * d + i];
    }
    return A_bar;
}

}  // namespace

Tensor symmetrize(const Tensor& a) {
    require_square(a.shape(), "symmetrize");
    return scalar_mul(add(a, transpose(a)), 0.5);
}

SpdMatrix SpdMatrix::from(Tensor a, double sym_tol) {
    require_square(a.shape(), "SpdMatrix");
    if (a.shape().size() != 2) throw ShapeError("SpdMatrix: expected rank-2 input");
    const int64_t d = a.shape()[0];
    auto v = a.data();
    double asym = 0.0, diag_mean = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        diag_mean += v[i * d + i];
        for (int64_t j = 0; j < i; ++j) {
            asym = std::max(asym, std::abs(v[i * d + j] - v[j * d + i]));
        }
    }
    if (asym > sym_tol) {
        throw ShapeError("SpdMatrix: input asymmetric by " + std::to_string(asym));
    }
    diag_mean /= static_cast<double>(d);
    const double scale = diag_mean > 0.0 ? diag_mean : 1.0;

    std::vector<double> L(d * d);
    int bad = 0;
    for (double mult : {0.0, 1e-10, 1e-8, 1e-6}) {
        const double jitter = mult * scale;
        bad = chol_raw(v.data(), L.data(), d, jitter);
        if (bad == 0) {
            SpdMatrix out;
            out.mat = std::move(a);
            out.jitter_applied = jitter;
            return out;
        }
    }
    throw PdError("SpdMatrix: not positive definite even after jitter ladder (leading minor " +
                      std::to_string(bad) + ")",
                  bad);
}

namespace {

// Implementation shared by the cholesky overloads; `sym` must be exactly
// symmetric.
Tensor cholesky_impl(const Tensor& sym, double jitter) {
    const auto& an = sym.node();
    if (an.shape.size() != 2) throw ShapeError("cholesky: expected rank-2 input");
    const int64_t d = an.shape[0];
    std::vector<double> L(d * d);
    int bad = chol_raw(an.value.data(), L.data(), d, jitter);
    if (bad != 0) {
        throw PdError("cholesky: matrix is not positive definite (leading minor " +
                          std::to_string(bad) + ")",
                      bad);
    }
    std::vector<double> Lcopy = L;
    auto backward = [L = std::move(Lcopy), d](TensorNode& self) {
        auto A_bar = chol_backward_dense(L, self.grad, d);
        auto& gp = self.parents[0]->grad_buf();
        for (int64_t i = 0; i < d * d; ++i) gp[i] += A_bar[i];
    };
    auto node = std::make_shared<TensorNode>();
    node->shape = an.shape;
    node->value = std::move(L);
    node->op = "cholesky";
    if (grad_enabled() && an.requires_grad) {
        node->requires_grad = true;
        node->parents = {sym.node_ptr()};
        node->backward_fn = std::move(backward);
    }
    return Tensor::wrap(std::move(node));
}

Tensor solve_spd_impl(const Tensor& sym_a, const Tensor& b) {
    const auto& an = sym_a.node();
    const auto& bn = b.node();
    require_square(an.shape, "solve_spd");
    const bool batched = an.shape.size() == 3;
    if (!batched && an.shape.size() != 2) {
        throw ShapeError("solve_spd: A must be rank 2 or 3, got " + shape_str(an.shape));
    }
    if (bn.shape.size() != an.shape.size()) {
        throw ShapeError("solve_spd: A " + shape_str(an.shape) + " and B " + shape_str(bn.shape) +
                         " must have equal rank");
    }
    const int64_t d = an.shape[an.shape.size() - 1];
    const int64_t k = bn.shape[bn.shape.size() - 1];
    const int64_t batch = batched ? an.shape[0] : 1;
    if (bn.shape[bn.shape.size() - 2] != d || (batched && bn.shape[0] != batch)) {
        throw ShapeError("solve_spd: B shape " + shape_str(bn.shape) + " incompatible with A " +
                         shape_str(an.shape));
    }

    std::vector<double> factors(batch * d * d);
    std::vector<double> x = bn.value;
    for (int64_t t = 0; t < batch; ++t) {
        double* L = factors.data() + t * d * d;
        int bad = chol_raw(an.value.data() + t * d * d, L, d, 0.0);
        if (bad != 0) {
            throw PdError("solve_spd: matrix is not positive definite (leading minor " +
                              std::to_string(bad) + ")",
                          bad);
        }
        double* xt = x.data() + t * d * k;
        forward_subst(L, xt, d, k);
        back_subst(L, xt, d, k);
    }

    auto backward = [factors = std::move(factors), x_vals = x, batch, d, k](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // B̄ = A⁻¹·Ḡ (A symmetric), Ā = −B̄·Xᵀ
        std::vector<double> bbar = self.grad;
        for (int64_t t = 0; t < batch; ++t) {
            const double* L = factors.data() + t * d * d;
            double* g = bbar.data() + t * d * k;
            forward_subst(L, g, d, k);
            back_subst(L, g, d, k);
        }
        if (pb.requires_grad) {
            auto& gb = pb.grad_buf();
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += bbar[i];
        }
        if (pa.requires_grad) {
            auto& ga = pa.grad_buf();
            for (int64_t t = 0; t < batch; ++t) {
                const double* bb = bbar.data() + t * d * k;
                const double* xv = x_vals.data() + t * d * k;
                double* g = ga.data() + t * d * d;
                for (int64_t i = 0; i < d; ++i) {
                    for (int64_t j = 0; j < d; ++j) {
                        double s = 0.0;
                        for (int64_t c = 0; c < k; ++c) s += bb[i * k + c] * xv[j * k + c];
                        g[i * d + j] -= s;
                    }
                }
            }
        }
    };

    auto node = std::make_shared<TensorNode>();
    node->shape = bn.shape;
    node->value = std::move(x);
    node->op = "solve_spd";
    if (grad_enabled() && (an.requires_grad || bn.requires_grad)) {
        node->requires_grad = true;
        node->parents = {sym_a.node_ptr(), b.node_ptr()};
        node->backward_fn = std::move(backward);
    }
    return Tensor::wrap(std::move(node));
}

}  // namespace

Tensor cholesky(const SpdMatrix& a) { return cholesky_impl(symmetrize(a.mat), a.jitter_applied); }

Tensor cholesky(const Tensor& a) { return cholesky_impl(symmetrize(a), 0.0); }

Tensor solve_spd(const SpdMatrix& a, const Tensor& b) {
    return solve_spd_impl(symmetrize(a.mat), b);
}

Tensor solve_spd(const Tensor& a, const Tensor& b) { return solve_spd_impl(symmetrize(a), b); }

Tensor ridge_pinv(const Tensor& m, double lambda) {
    if (lambda < 0.0) throw ShapeError("ridge_pinv: lambda must be nonnegative");
    const auto& mn = m.node();
    if (mn.shape.size() != 2 && mn.shape.size() != 3) {
        throw ShapeError("ridge_pinv: expected rank 2 or 3 input, got " + shape_str(mn.shape));
    }
    if (mn.numel() == 0) throw ShapeError("ridge_pinv: empty input");
    const int64_t a = mn.shape[mn.shape.size() - 2];
    Tensor gram = matmul(m, transpose(m));
    if (lambda > 0.0) {
        gram = add(gram, scalar_mul(Tensor::eye(a), lambda));
    } else {
        // With no ridge, an ill-conditioned Gram matrix can still pass a raw
        // Cholesky on rounding noise; probe the factor's pivot spread.
        const Tensor gram_sym = symmetrize(gram);
        auto gv = gram_sym.data();
        const int64_t batch = gram.dim() == 3 ? gram.shape()[0] : 1;
        std::vector<double> L(a * a);
        for (int64_t t = 0; t < batch; ++t) {
            int bad = chol_raw(gv.data() + t * a * a, L.data(), a, 0.0);
            double lmin = 1e300, lmax = 0.0;
            if (bad == 0) {
                for (int64_t i = 0; i < a; ++i) {
                    lmin = std::min(lmin, L[i * a + i]);
                    lmax = std::max(lmax, L[i * a + i]);
                }
            }
            const double eps = 2.220446049250313e-16;
            if (bad != 0 || (lmin / lmax) * (lmin / lmax) <= 64.0 * static_cast<double>(a) * eps) {
                throw NumericError(
                    "ridge_pinv: MMᵀ is rank deficient with lambda=0; pass a positive lambda");
            }
        }
    }
    return transpose(solve_spd(gram, m));
}

PdCheck is_positive_definite(const Tensor& a, double sym_tol) {
    require_square(a.shape(), "is_positive_definite");
    if (a.shape().size() != 2) throw ShapeError("is_positive_definite: expected rank-2 input");
    const int64_t d = a.shape()[0];
    auto v = a.data();
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < i; ++j) {
            if (std::abs(v[i * d + j] - v[j * d + i]) > sym_tol) {
                throw ShapeError("is_positive_definite: input is not symmetric within tolerance");
            }
        }
    }
    PdCheck out;
    std::vector<double> L(d * d);
    out.positive_definite = chol_raw(v.data(), L.data(), d, 0.0) == 0;

    // min eigenvalue ≈ σ − λ_max(σI − A), σ a Gershgorin bound on |λ|
    double sigma = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        double row = 0.0;
        for (int64_t j = 0; j < d; ++j) row += std::abs(v[i * d + j]);
        sigma = std::max(sigma, row);
    }
    if (sigma == 0.0) {
        out.min_eigenvalue_estimate = 0.0;
        return out;
    }
    std::vector<double> x(d, 1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<double> y(d);
    double mu = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
        for (int64_t i = 0; i < d; ++i) {
            double s = sigma * x[i];
            for (int64_t j = 0; j < d; ++j) s -= v[i * d + j] * x[j];
            y[i] = s;
        }
        double norm = 0.0;
        for (double t : y) norm += t * t;
        norm = std::sqrt(norm);
        if (norm == 0.0) break;
        mu = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            x[i] = y[i] / norm;
        }
        // Rayleigh quotient of σI − A at x
        for (int64_t i = 0; i < d; ++i) {
            double s = sigma * x[i];
            for (int64_t j = 0; j < d; ++j) s -= v[i * d + j] * x[j];
            mu += x[i] * s;
        }
    }
    out.min_eigenvalue_estimate = sigma - mu;
    return out;
}

}  // namespace koopkal
