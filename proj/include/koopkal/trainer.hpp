#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "koopkal/data.hpp"
#include "koopkal/kalman.hpp"
#include "koopkal/koopman.hpp"
#include "koopkal/metrics.hpp"
#include "koopkal/tokenizer.hpp"
#include "koopkal/vae.hpp"

namespace koopkal {

struct Hyper {
    int64_t n_vars = 0;
    int64_t context_len = 96;
    int64_t horizon_len = 96;
    int64_t patch_size = 16;
    int64_t latent_dim = 32;

    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 5.0;

    double beta_kl = 1.0;
    double lambda_rec = 1.0;
    double ridge_lambda = 1e-6;

    int64_t batch_size = 32;
    int64_t epochs = 100;
    int64_t train_stride = 1;
    int64_t val_samples = 32;
    int64_t eval_samples = 100;
    bool standardize = true;
    uint64_t seed = 0;

    int64_t token_count() const { return context_len / patch_size; }
    int64_t horizon_tokens() const { return horizon_len / patch_size; }
    void validate() const;
};

// Every learnable tensor of the pipeline plus the hyperparameters that fix
// the shapes. Parameters appear exactly once in the registry, under stable
// names.
struct ModelBundle {
    Hyper hyper;
    Tensor embed_w, embed_b;
    MeasurementMlp psi;
    Tensor k_glo;
    IntegratorNet integrator;
    KalmanParams kalman;
    DecoderHeads heads;

    static ModelBundle init(const Hyper& hyper);
    std::vector<NamedParam> parameters();
    ModelBundle clone() const;
};

// Wiring switches used only by test configurations and comparisons; the
// model itself always runs with everything on and the mixed operator.
struct VariantConfig {
    enum class Operator { Mixed, LocalOnly, GlobalOnly };
    bool use_integrator = true;
    bool use_skip = true;
    bool use_control = true;
    Operator op = Operator::Mixed;
};

struct Diagnostics {
    double u_norm_mean = 0.0;      // batch-mean Frobenius norm of the control tokens
    double k_spectral_max = 0.0;   // largest singular-value estimate of K in the batch
};

struct EncodeResult {
    VariationalPosterior posterior;
    Tensor x_hat_c;  // batch×d×n operator reconstruction in measurement space
    Diagnostics diagnostics;
};

struct ForwardResult {
    LossBreakdown loss;
    DecodedGaussian forecast;
    Diagnostics diagnostics;
};

// Context window through the whole encoder: tokens, measurement, operator
// fit, rollout, residual integration, filtering, skip connection.
EncodeResult encode_window(const ModelBundle& bundle, const WindowBatch& batch,
                           const VariantConfig& variant = {});

// Full training pass: encode, reparameterized sample with the supplied
// noise, decode, losses.
ForwardResult forward_pass(const ModelBundle& bundle, const WindowBatch& batch,
                           const Tensor& noise, const VariantConfig& variant = {});

struct AdamState {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t step_count = 0;
    std::vector<std::vector<double>> m, v;  // aligned with the parameter registry

    static AdamState init(const std::vector<NamedParam>& params, double lr, double beta1,
                          double beta2, double eps);
};

// Textbook update with bias correction; every parameter must carry a grad.
void adam_step(AdamState& state, std::vector<NamedParam>& params);

// Global-norm clip; returns the pre-clip norm.
double clip_gradients(std::vector<NamedParam>& params, double max_norm);

struct EpochRecord {
    int64_t epoch = 0;
    double loss = 0.0, nll = 0.0, kl = 0.0, rec = 0.0;
    double val_crps = 0.0;
    double u_norm = 0.0, k_spectral = 0.0, grad_norm = 0.0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    int64_t best_epoch = -1;
    double best_val_crps = 0.0;
};

struct TrainResult {
    TrainReport report;
    ModelBundle best;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Runs hyper.epochs epochs (starting at start_epoch when resuming) with
// deterministic per-epoch shuffling and noise streams derived from the
// seed, so a resumed run reproduces the uninterrupted one bit for bit.
TrainResult train(ModelBundle& bundle, const SeriesDataset& dataset, AdamState& adam,
                  int64_t start_epoch = 0, const EpochCallback& on_epoch = nullptr,
                  const VariantConfig& variant = {});

// S sample paths of one window's predictive distribution (original scale).
SampleForecast sample_forecast(const ModelBundle& bundle, const SeriesDataset& dataset,
                               const WindowSpec& window, int64_t n_samples, uint64_t seed,
                               const VariantConfig& variant = {});

struct SplitMetrics {
    double crps_mean = 0.0;
    double crps_normalized = 0.0;
    double nmae = 0.0;
    std::vector<double> per_step_crps;  // horizon_len entries, pooled over vars/windows
    int64_t window_count = 0;
};

// Non-overlapping (stride = L) windows of the split, pooled ProbTS-style:
// sums over every coordinate of every window before normalizing.
SplitMetrics evaluate_split(const ModelBundle& bundle, const SeriesDataset& dataset, Split split,
                            int64_t n_samples, uint64_t seed, int threads = 0,
                            const VariantConfig& variant = {});

// ---- checkpointing ----

struct TrainProgress {
    int64_t next_epoch = 0;
    int64_t best_epoch = -1;
    double best_val_crps = 0.0;
};

// Writes <prefix>.json (manifest: names, shapes, offsets, checksums,
// hyperparameters, format version) and <prefix>.bin (little-endian float64
// blob). Round trips are byte-identical.
void save_checkpoint(const ModelBundle& bundle, const std::string& path_prefix,
                     const AdamState* adam = nullptr, const TrainProgress* progress = nullptr);

struct LoadedCheckpoint {
    ModelBundle bundle;
    std::optional<AdamState> adam;
    TrainProgress progress;
};

LoadedCheckpoint load_checkpoint(const std::string& path_prefix);

}  // namespace koopkal
