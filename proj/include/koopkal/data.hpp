#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "koopkal/tensor.hpp"
#include "koopkal/tokenizer.hpp"

namespace koopkal {

enum class Split { Train, Val, Test };

const char* split_name(Split s);

// Multivariate series in variable-major layout with chronological,
// non-overlapping split boundaries. Immutable after construction.
struct SeriesDataset {
    std::vector<double> values;  // vars × steps, row-major
    std::vector<std::string> variable_names;
    std::string frequency = "unknown";
    double train_fraction = 0.7;
    double val_fraction = 0.1;

    int64_t vars() const { return static_cast<int64_t>(variable_names.size()); }
    int64_t steps() const {
        return variable_names.empty() ? 0
                                      : static_cast<int64_t>(values.size()) / vars();
    }
    double value(int64_t var, int64_t t) const { return values[var * steps() + t]; }

    // [begin, end) of the requested chronological split
    std::pair<int64_t, int64_t> split_range(Split split) const;
};

// Comma-separated numeric columns, optional header row, optional leading
// timestamp column (ignored for modeling). NaN cells, ragged rows, and
// non-numeric data cells are rejected with their line number.
SeriesDataset load_csv(const std::string& path, bool has_timestamp_column);

// Decimal serialization at 17 significant digits, so a load of the written
// file reproduces every value bit for bit.
void write_csv(const SeriesDataset& ds, const std::string& path);

struct WindowSpec {
    int64_t start = 0;  // context [start, start+T), target [start+T, start+T+L)
};

// All windows of the split, stride-stepped, never crossing the split
// boundary on either side.
std::vector<WindowSpec> make_windows(const SeriesDataset& ds, int64_t context_len,
                                     int64_t horizon_len, int64_t stride, Split split);

WindowBatch assemble_batch(const SeriesDataset& ds, std::span<const WindowSpec> windows,
                           int64_t context_len, int64_t horizon_len, bool standardize);

// Ground-truth generator of a linear-Gaussian state-space series; knowing
// it makes the exact posterior predictive computable in tests.
struct LinearGaussianSystem {
    std::vector<double> transition;  // d×d, spectral radius < 1
    std::vector<double> noise_chol;  // d×d lower factor of the process noise
    std::vector<double> readout;     // vars×d
    std::vector<double> x0;          // d
    int64_t d_state = 0;
    int64_t n_vars = 0;
};

struct LinearGaussianData {
    SeriesDataset dataset;
    LinearGaussianSystem system;
};

// x_{t+1} = M x_t + L_w·η_t observed through y_t = C x_t. The transition is
// drawn, rescaled toward the target spectral radius, and verified stable.
LinearGaussianData synth_linear_gaussian(int64_t d_state, int64_t n_vars, int64_t steps,
                                         uint64_t seed, double noise_scale = 0.05,
                                         double spectral_radius = 0.9);

// Same simulation from explicit generator parameters.
SeriesDataset simulate_linear_gaussian(const LinearGaussianSystem& system, int64_t steps,
                                       uint64_t seed);

enum class NonlinearKind { VanDerPol, SineMixtureDrift };

struct NonlinearOptions {
    double vdp_mu = 2.0;   // Van der Pol damping; 0 reduces to a harmonic oscillator
    double vdp_dt = 0.01;  // Euler step
    int64_t period = 48;   // sine mixture base period in samples
};

// Deterministic given the seed. For the sine mixture the slow drift term
// scales with `noise`, so noise = 0 is exactly periodic.
SeriesDataset synth_nonlinear(NonlinearKind kind, int64_t n_vars, int64_t steps, double noise,
                              uint64_t seed, const NonlinearOptions& options = {});

}  // namespace koopkal
