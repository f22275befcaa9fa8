#pragma once

#include <utility>

#include "koopkal/tensor.hpp"

namespace koopkal {

// Measurement function: a d→d residual MLP (two tanh hidden layers of
// width 2d) whose last layer starts as small noise, so the map begins as a
// small perturbation of the identity and the measurement space starts
// where the embedding space is.
struct MeasurementMlp {
    Tensor w1, b1;  // 2d×d, 2d
    Tensor w2, b2;  // 2d×2d, 2d
    Tensor w3, b3;  // d×2d, d

    static MeasurementMlp init(int64_t dim, Rng& rng);
    Tensor apply(const Tensor& tokens) const;  // batch×d×n -> batch×d×n
    void collect(std::vector<NamedParam>& out, const std::string& prefix) const;
};

// Effective operator: data-driven local part (recomputed every forward
// pass, per batch element) plus a learnable shared global part.
struct KoopmanOperator {
    Tensor k_loc;  // batch×d×d, graph-attached, never a parameter
    Tensor k_glo;  // d×d, learnable, zero-initialized

    Tensor combined() const { return add(k_loc, k_glo); }
};

Tensor measure(const MeasurementMlp& psi, const Tensor& tokens);

// One-step operator fit: drop the last token for the snapshot matrix, the
// first for its forward shift, and solve the ridge least squares
// K = X_fore · pinv_λ(X_back) per batch element.
Tensor fit_local_operator(const Tensor& x_star, double lambda);

// Iterated application of K starting from x1 (never an explicit matrix
// power): n reconstruction columns (the first equals x1) followed by m
// horizon columns. Throws NumericError naming the step if the iteration
// leaves the finite range.
std::pair<Tensor, Tensor> rollout(const Tensor& k, const Tensor& x1, int64_t n, int64_t m);

}  // namespace koopkal
