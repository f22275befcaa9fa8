#pragma once

#include "koopkal/tensor.hpp"

namespace koopkal {

// One batch of forecasting windows in the original data scale, with the
// per-window per-variable context statistics used for standardization.
// std entries are floored at 1e-8.
struct WindowBatch {
    Tensor context;  // batch×N×T
    Tensor target;   // batch×N×L
    Tensor mean;     // batch×N×1, zeros when standardization is off
    Tensor std;      // batch×N×1, ones when standardization is off

    int64_t batch_size() const { return context.shape()[0]; }
    int64_t vars() const { return context.shape()[1]; }
    int64_t context_len() const { return context.shape()[2]; }
    int64_t horizon_len() const { return target.shape()[2]; }
};

struct TokenSequence {
    Tensor tokens;  // batch×d×n
    int64_t patch_size = 0;
    int64_t token_count = 0;
};

// Context-only statistics; the target never contaminates them.
void compute_window_stats(WindowBatch& batch);

Tensor standardize(const Tensor& x, const Tensor& mean, const Tensor& std);
Tensor destandardize(const Tensor& x, const Tensor& mean, const Tensor& std);
Tensor scale_by_std(const Tensor& x, const Tensor& std);

// batch×N×T -> batch×(N·s)×n with n = T/s. Column i stacks all N
// variables over the s consecutive steps of patch i (variable-major).
Tensor patchify(const Tensor& x, int64_t patch_size);

// Exact inverse of patchify: batch×(N·s)×n -> batch×N×(n·s).
Tensor unpatchify(const Tensor& tokens, int64_t vars);

// Linear projection of flattened patches into the d-dimensional token
// space: each column maps to W·col + b.
Tensor embed(const Tensor& flat_patches, const Tensor& w, const Tensor& b);

}  // namespace koopkal
