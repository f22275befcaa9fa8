#include "koopkal/tokenizer.hpp"

#include <cmath>

namespace koopkal {

namespace {

void require_rank3(const Tensor& t, const char* op) {
    if (t.dim() != 3) {
        throw ShapeError(std::string(op) + ": expected batch×rows×cols input, got " +
                         shape_str(t.shape()));
    }
}

}  // namespace

void compute_window_stats(WindowBatch& batch) {
    require_rank3(batch.context, "compute_window_stats");
    const int64_t b = batch.batch_size();
    const int64_t n = batch.vars();
    const int64_t t = batch.context_len();
    std::vector<double> mean(b * n), std_(b * n);
    auto x = batch.context.data();
    for (int64_t i = 0; i < b * n; ++i) {
        const double* row = x.data() + i * t;
        double m = 0.0;
        for (int64_t j = 0; j < t; ++j) m += row[j];
        m /= static_cast<double>(t);
        double v = 0.0;
        for (int64_t j = 0; j < t; ++j) v += (row[j] - m) * (row[j] - m);
        v /= static_cast<double>(t);
        mean[i] = m;
        std_[i] = std::max(std::sqrt(v), 1e-8);
    }
    batch.mean = Tensor::from_vector({b, n, 1}, std::move(mean));
    batch.std = Tensor::from_vector({b, n, 1}, std::move(std_));
}

Tensor standardize(const Tensor& x, const Tensor& mean, const Tensor& std) {
    return div(sub(x, mean), std);
}

Tensor destandardize(const Tensor& x, const Tensor& mean, const Tensor& std) {
    return add(mul(x, std), mean);
}

Tensor scale_by_std(const Tensor& x, const Tensor& std) { return mul(x, std); }

Tensor patchify(const Tensor& x, int64_t patch_size) {
    require_rank3(x, "patchify");
    const int64_t b = x.shape()[0], n_vars = x.shape()[1], t = x.shape()[2];
    if (patch_size <= 0 || t % patch_size != 0) {
        throw ShapeError("patchify: context length " + std::to_string(t) +
                         " is not divisible by patch size " + std::to_string(patch_size));
    }
    const int64_t n_tok = t / patch_size;
    auto split = reshape(x, {b, n_vars, n_tok, patch_size});
    auto swapped = permute(split, {0, 1, 3, 2});
    return reshape(swapped, {b, n_vars * patch_size, n_tok});
}

Tensor unpatchify(const Tensor& tokens, int64_t vars) {
    require_rank3(tokens, "unpatchify");
    const int64_t b = tokens.shape()[0], flat = tokens.shape()[1], n_tok = tokens.shape()[2];
    if (vars <= 0 || flat % vars != 0) {
        throw ShapeError("unpatchify: token length " + std::to_string(flat) +
                         " is not divisible by variable count " + std::to_string(vars));
    }
    const int64_t patch_size = flat / vars;
    auto split = reshape(tokens, {b, vars, patch_size, n_tok});
    auto swapped = permute(split, {0, 1, 3, 2});
    return reshape(swapped, {b, vars, n_tok * patch_size});
}

Tensor embed(const Tensor& flat_patches, const Tensor& w, const Tensor& b) {
    require_rank3(flat_patches, "embed");
    if (w.dim() != 2 || w.shape()[1] != flat_patches.shape()[1]) {
        throw ShapeError("embed: projection " + shape_str(w.shape()) +
                         " incompatible with patches " + shape_str(flat_patches.shape()));
    }
    if (b.numel() != w.shape()[0]) {
        throw ShapeError("embed: bias length " + std::to_string(b.numel()) +
                         " does not match output dim " + std::to_string(w.shape()[0]));
    }
    return add(matmul(w, flat_patches), reshape(b, {1, w.shape()[0], 1}));
}

}  // namespace koopkal
