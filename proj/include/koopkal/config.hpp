#pragma once

#include <string>

#include "koopkal/data.hpp"
#include "koopkal/trainer.hpp"

namespace koopkal {

// Full description of a run: where the data comes from, the model
// geometry, and the optimization/evaluation settings. Parsed from a plain
// key = value file; every key can also be set from the command line.
struct RunConfig {
    // data source
    std::string data_kind = "synth_linear";  // csv | synth_linear | synth_vanderpol | synth_sine
    std::string csv_path;
    bool csv_has_timestamp = false;
    int64_t synth_state_dim = 4;
    int64_t synth_vars = 4;
    int64_t synth_steps = 2000;
    double synth_noise = 0.05;
    uint64_t synth_seed = 1;
    double train_fraction = 0.7;
    double val_fraction = 0.1;

    // model + optimization (patch_size 0 resolves to 16 for T >= 96, 8 for
    // shorter contexts)
    int64_t context_len = 96;
    int64_t horizon_len = 96;
    int64_t patch_size = 0;
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
    bool standardize = true;

    // run
    uint64_t seed = 0;
    int64_t samples = 100;
    int64_t val_samples = 32;
    std::string out_dir = "runs/default";

    static RunConfig from_file(const std::string& path);
    void validate() const;
    Hyper to_hyper(int64_t n_vars) const;
    SeriesDataset load_dataset() const;
    std::string echo() const;  // canonical key = value rendering
};

}  // namespace koopkal
