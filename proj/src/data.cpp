#include "koopkal/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

namespace koopkal {

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

std::pair<int64_t, int64_t> SeriesDataset::split_range(Split split) const {
    const int64_t n = steps();
    const int64_t train_end = static_cast<int64_t>(std::floor(train_fraction * n));
    const int64_t val_end =
        train_end + static_cast<int64_t>(std::floor(val_fraction * n));
    switch (split) {
        case Split::Train: return {0, train_end};
        case Split::Val: return {train_end, val_end};
        case Split::Test: return {val_end, n};
    }
    return {0, 0};
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_cells(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

bool parse_double(const std::string& cell, double& out) {
    if (cell.empty()) return false;
    char* end = nullptr;
    out = std::strtod(cell.c_str(), &end);
    return end == cell.c_str() + cell.size();
}

}  // namespace

SeriesDataset load_csv(const std::string& path, bool has_timestamp_column) {
    std::ifstream in(path);
    if (!in) throw ParseError("load_csv: cannot open '" + path + "'", 0);

    std::string line;
    int64_t line_no = 0;
    std::vector<std::string> names;
    std::vector<std::vector<double>> rows;  // time-major
    int64_t expected_cells = -1;
    bool saw_header = false;

    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto cells = split_cells(line);
        const int64_t first_data = has_timestamp_column ? 1 : 0;

        if (rows.empty() && !saw_header) {
            // header detection: any non-numeric data cell makes this a header
            bool numeric = true;
            double tmp;
            for (size_t i = first_data; i < cells.size(); ++i) {
                if (!parse_double(cells[i], tmp)) {
                    numeric = false;
                    break;
                }
            }
            if (!numeric) {
                saw_header = true;
                for (size_t i = first_data; i < cells.size(); ++i) names.push_back(cells[i]);
                expected_cells = static_cast<int64_t>(cells.size());
                continue;
            }
        }

        if (expected_cells < 0) expected_cells = static_cast<int64_t>(cells.size());
        if (static_cast<int64_t>(cells.size()) != expected_cells) {
            throw ParseError("load_csv: ragged row, expected " + std::to_string(expected_cells) +
                                 " cells, got " + std::to_string(cells.size()),
                             line_no);
        }
        std::vector<double> row;
        row.reserve(cells.size() - first_data);
        for (size_t i = first_data; i < cells.size(); ++i) {
            double v;
            if (!parse_double(cells[i], v)) {
                throw ParseError("load_csv: non-numeric cell '" + cells[i] + "'", line_no);
            }
            if (std::isnan(v)) {
                throw ParseError("load_csv: NaN value rejected", line_no);
            }
            if (std::isinf(v)) {
                throw ParseError("load_csv: infinite value rejected", line_no);
            }
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }

    if (rows.empty()) throw ParseError("load_csv: no data rows in '" + path + "'", line_no);

    const int64_t n_vars = static_cast<int64_t>(rows[0].size());
    if (names.empty()) {
        for (int64_t v = 0; v < n_vars; ++v) names.push_back("var" + std::to_string(v));
    }
    if (static_cast<int64_t>(names.size()) != n_vars) {
        throw ParseError("load_csv: header names " + std::to_string(names.size()) +
                             " do not match data columns " + std::to_string(n_vars),
                         1);
    }

    SeriesDataset ds;
    ds.variable_names = std::move(names);
    const int64_t n_steps = static_cast<int64_t>(rows.size());
    ds.values.resize(n_vars * n_steps);
    for (int64_t t = 0; t < n_steps; ++t) {
        for (int64_t v = 0; v < n_vars; ++v) ds.values[v * n_steps + t] = rows[t][v];
    }
    return ds;
}

void write_csv(const SeriesDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("write_csv: cannot open '" + path + "' for writing", 0);
    for (int64_t v = 0; v < ds.vars(); ++v) {
        out << (v ? "," : "") << ds.variable_names[v];
    }
    out << "\n";
    char buf[40];
    for (int64_t t = 0; t < ds.steps(); ++t) {
        for (int64_t v = 0; v < ds.vars(); ++v) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.value(v, t));
            out << (v ? "," : "") << buf;
        }
        out << "\n";
    }
}

std::vector<WindowSpec> make_windows(const SeriesDataset& ds, int64_t context_len,
                                     int64_t horizon_len, int64_t stride, Split split) {
    if (context_len <= 0 || horizon_len <= 0 || stride <= 0) {
        throw ShapeError("make_windows: context, horizon, and stride must be positive");
    }
    auto [begin, end] = ds.split_range(split);
    const int64_t len = end - begin;
    const int64_t need = context_len + horizon_len;
    if (need > len) {
        throw ShapeError("make_windows: window needs " + std::to_string(need) +
                         " steps but the " + split_name(split) + " split has " +
                         std::to_string(len));
    }
    std::vector<WindowSpec> out;
    for (int64_t start = begin; start + need <= end; start += stride) {
        out.push_back({start});
    }
    return out;
}

WindowBatch assemble_batch(const SeriesDataset& ds, std::span<const WindowSpec> windows,
                           int64_t context_len, int64_t horizon_len, bool standardize) {
    if (windows.empty()) throw ShapeError("assemble_batch: no windows");
    const int64_t b = static_cast<int64_t>(windows.size());
    const int64_t n = ds.vars();
    std::vector<double> ctx(b * n * context_len), tgt(b * n * horizon_len);
    for (int64_t w = 0; w < b; ++w) {
        const int64_t start = windows[w].start;
        if (start < 0 || start + context_len + horizon_len > ds.steps()) {
            throw ShapeError("assemble_batch: window at " + std::to_string(start) +
                             " exceeds the series");
        }
        for (int64_t v = 0; v < n; ++v) {
            for (int64_t t = 0; t < context_len; ++t) {
                ctx[(w * n + v) * context_len + t] = ds.value(v, start + t);
            }
            for (int64_t t = 0; t < horizon_len; ++t) {
                tgt[(w * n + v) * horizon_len + t] = ds.value(v, start + context_len + t);
            }
        }
    }
    WindowBatch batch;
    batch.context = Tensor::from_vector({b, n, context_len}, std::move(ctx));
    batch.target = Tensor::from_vector({b, n, horizon_len}, std::move(tgt));
    if (standardize) {
        compute_window_stats(batch);
    } else {
        batch.mean = Tensor::zeros({b, n, 1});
        batch.std = Tensor::ones({b, n, 1});
    }
    return batch;
}

namespace {

// crude spectral radius estimate from iterated growth
double spectral_radius_estimate(const std::vector<double>& m, int64_t d, Rng& rng) {
    std::vector<double> x(d), y(d);
    for (auto& v : x) v = rng.normal();
    double norm = 1.0;
    const int iters = 200;
    double log_growth = 0.0;
    for (int it = 0; it < iters; ++it) {
        for (int64_t i = 0; i < d; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += m[i * d + j] * x[j];
            y[i] = s;
        }
        norm = 0.0;
        for (double v : y) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0;
        log_growth += std::log(norm);
        for (int64_t i = 0; i < d; ++i) x[i] = y[i] / norm;
    }
    return std::exp(log_growth / iters);
}

}  // namespace

SeriesDataset simulate_linear_gaussian(const LinearGaussianSystem& system, int64_t steps,
                                       uint64_t seed) {
    const int64_t d = system.d_state;
    const int64_t n = system.n_vars;
    Rng rng(derive_seed(seed, 0xda7a));
    std::vector<double> x = system.x0, next(d), eta(d);
    SeriesDataset ds;
    for (int64_t v = 0; v < n; ++v) ds.variable_names.push_back("y" + std::to_string(v));
    ds.frequency = "synthetic";
    ds.values.resize(n * steps);
    for (int64_t t = 0; t < steps; ++t) {
        for (int64_t v = 0; v < n; ++v) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += system.readout[v * d + j] * x[j];
            ds.values[v * steps + t] = s;
        }
        for (auto& e : eta) e = rng.normal();
        for (int64_t i = 0; i < d; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += system.transition[i * d + j] * x[j];
            for (int64_t j = 0; j <= i; ++j) s += system.noise_chol[i * d + j] * eta[j];
            next[i] = s;
        }
        x = next;
    }
    return ds;
}

LinearGaussianData synth_linear_gaussian(int64_t d_state, int64_t n_vars, int64_t steps,
                                         uint64_t seed, double noise_scale,
                                         double spectral_radius) {
    Rng rng(derive_seed(seed, 0x11b3a2));
    LinearGaussianSystem sys;
    sys.d_state = d_state;
    sys.n_vars = n_vars;
    sys.transition.resize(d_state * d_state);
    for (auto& v : sys.transition) v = rng.normal();
    double rho = spectral_radius_estimate(sys.transition, d_state, rng);
    if (rho > 0.0) {
        for (auto& v : sys.transition) v *= spectral_radius / rho;
    }
    rho = spectral_radius_estimate(sys.transition, d_state, rng);
    if (rho >= 1.0) {
        // verification failed: clamp hard and re-check
        for (auto& v : sys.transition) v *= 0.9 / rho;
        rho = spectral_radius_estimate(sys.transition, d_state, rng);
        if (rho >= 1.0) throw NumericError("synth_linear_gaussian: could not stabilize system");
    }

    sys.noise_chol.assign(d_state * d_state, 0.0);
    for (int64_t i = 0; i < d_state; ++i) sys.noise_chol[i * d_state + i] = noise_scale;

    sys.readout.resize(n_vars * d_state);
    for (auto& v : sys.readout) v = rng.normal();

    sys.x0.resize(d_state);
    for (auto& v : sys.x0) v = rng.normal();

    LinearGaussianData out;
    out.system = sys;
    out.dataset = simulate_linear_gaussian(sys, steps, seed);
    return out;
}

SeriesDataset synth_nonlinear(NonlinearKind kind, int64_t n_vars, int64_t steps, double noise,
                              uint64_t seed, const NonlinearOptions& options) {
    Rng rng(derive_seed(seed, 0x5eed));
    SeriesDataset ds;
    for (int64_t v = 0; v < n_vars; ++v) ds.variable_names.push_back("x" + std::to_string(v));
    ds.frequency = "synthetic";
    ds.values.resize(n_vars * steps);

    if (kind == NonlinearKind::VanDerPol) {
        // one oscillator per variable pair; odd trailing variable takes the
        // position of an extra oscillator
        const int64_t n_osc = (n_vars + 1) / 2;
        std::vector<double> x(n_osc), v(n_osc);
        for (int64_t o = 0; o < n_osc; ++o) {
            x[o] = rng.uniform(0.5, 2.0);
            v[o] = rng.uniform(-1.0, 1.0);
        }
        const double h = options.vdp_dt;
        const double mu = options.vdp_mu;
        for (int64_t t = 0; t < steps; ++t) {
            for (int64_t var = 0; var < n_vars; ++var) {
                const int64_t o = var / 2;
                const double val = (var % 2 == 0) ? x[o] : v[o];
                ds.values[var * steps + t] = val + noise * rng.normal();
            }
            for (int64_t o = 0; o < n_osc; ++o) {
                const double nx = x[o] + h * v[o];
                const double nv = v[o] + h * (mu * (1.0 - x[o] * x[o]) * v[o] - x[o]);
                x[o] = nx;
                v[o] = nv;
            }
        }
        return ds;
    }

    // sine mixture with a slow drift; the drift amplitude rides on `noise`
    // so the noiseless series is exactly periodic
    const double period = static_cast<double>(options.period);
    const double two_pi = 2.0 * 3.14159265358979323846;
    for (int64_t var = 0; var < n_vars; ++var) {
        // base-period component plus one higher harmonic, so the mixture's
        // fundamental period is exactly `period`
        const int64_t k1 = 1;
        const int64_t k2 = 2 + static_cast<int64_t>(rng.below(5));
        const double a1 = rng.uniform(0.5, 1.5);
        const double a2 = rng.uniform(0.2, 0.8);
        const double phi1 = rng.uniform(0.0, two_pi);
        const double phi2 = rng.uniform(0.0, two_pi);
        const double drift = rng.uniform(-1.0, 1.0);
        for (int64_t t = 0; t < steps; ++t) {
            const double tt = static_cast<double>(t);
            double val = a1 * std::sin(two_pi * k1 * tt / period + phi1) +
                         a2 * std::sin(two_pi * k2 * tt / period + phi2);
            val += noise * (drift * tt / static_cast<double>(steps) + rng.normal());
            ds.values[var * steps + t] = val;
        }
    }
    return ds;
}

}  // namespace koopkal
