#include "koopkal/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "koopkal/kalman.hpp"
#include "koopkal/koopman.hpp"
#include "koopkal/linalg.hpp"
#include "koopkal/metrics.hpp"

namespace koopkal {

namespace {

double fro(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s);
}

Tensor random_spd(int64_t d, Rng& rng, double ridge = 0.5) {
    auto w = Tensor::randn({d, d}, rng);
    return add(matmul(w, transpose(w)), scalar_mul(Tensor::eye(d), ridge)).detach();
}

// random orthogonally-diagonalizable matrix with evenly spread eigenvalues
// in (-0.9, 0.9); trajectories of such systems keep the snapshot matrix
// reasonably conditioned
Tensor spread_generator(int64_t d, Rng& rng) {
    auto w = Tensor::randn({d, d}, rng);
    std::vector<double> q(w.data().begin(), w.data().end());
    for (int64_t c = 0; c < d; ++c) {
        for (int64_t p = 0; p < c; ++p) {
            double dot = 0.0;
            for (int64_t r = 0; r < d; ++r) dot += q[r * d + c] * q[r * d + p];
            for (int64_t r = 0; r < d; ++r) q[r * d + c] -= dot * q[r * d + p];
        }
        double nrm = 0.0;
        for (int64_t r = 0; r < d; ++r) nrm += q[r * d + c] * q[r * d + c];
        nrm = std::sqrt(nrm);
        for (int64_t r = 0; r < d; ++r) q[r * d + c] /= nrm;
    }
    std::vector<double> m(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (int64_t k = 0; k < d; ++k) {
                const double eig =
                    -0.9 + 1.8 * static_cast<double>(k) / std::max<int64_t>(1, d - 1);
                s += q[i * d + k] * eig * q[j * d + k];
            }
            m[i * d + j] = s;
        }
    }
    return Tensor::from_vector({d, d}, std::move(m));
}

Tensor linear_trajectory(const Tensor& m, Rng& rng, int64_t n) {
    const int64_t d = m.shape()[0];
    std::vector<double> x0(d);
    for (auto& v : x0) v = rng.normal(0.0, 1.0) + 2.0;
    std::vector<double> cols(d * n);
    std::vector<double> cur = x0;
    auto mv = m.data();
    for (int64_t t = 0; t < n; ++t) {
        for (int64_t i = 0; i < d; ++i) cols[i * n + t] = cur[i];
        std::vector<double> next(d, 0.0);
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j < d; ++j) next[i] += mv[i * d + j] * cur[j];
        }
        cur = next;
    }
    return Tensor::from_vector({1, d, n}, std::move(cols));
}

// exact piecewise integral of (F̂(z) − 1{x≤z})²
double crps_integral(std::span<const double> samples, double x) {
    std::vector<double> breaks(samples.begin(), samples.end());
    breaks.push_back(x);
    std::sort(breaks.begin(), breaks.end());
    const double s = static_cast<double>(samples.size());
    double total = 0.0;
    for (size_t i = 0; i + 1 < breaks.size(); ++i) {
        const double a = breaks[i], b = breaks[i + 1];
        if (b <= a) continue;
        double cdf = 0.0;
        for (double v : samples) {
            if (v <= a) cdf += 1.0;
        }
        cdf /= s;
        const double ind = x <= a ? 1.0 : 0.0;
        total += (b - a) * (cdf - ind) * (cdf - ind);
    }
    return total;
}

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

SelftestRow suite_joseph(const SelftestOptions& opt) {
    NoGradGuard ng;
    Timer timer;
    SelftestRow row{"joseph-equivalence", false, 0.0, 1e-10, 0.0};
    Rng rng(derive_seed(opt.seed, 0x105eb));
    for (int rep = 0; rep < 200; ++rep) {
        const int64_t d = 2 + static_cast<int64_t>(rng.below(7));
        auto p_hat = random_spd(d, rng);
        auto r = random_spd(d, rng);
        auto h = Tensor::randn({d, d}, rng);
        auto s = symmetrize(add(matmul(matmul(h, p_hat), transpose(h)), r));
        auto gain = transpose(solve_spd(s, matmul(h, p_hat)));
        auto joseph = joseph_covariance(p_hat, gain, h, r);
        if (opt.corrupt_joseph) {
            auto noise_term = matmul(matmul(gain, r), transpose(gain));
            joseph = sub(joseph, scalar_mul(noise_term, 2.0));
        }
        auto naive = matmul(sub(Tensor::eye(d), matmul(gain, h)), p_hat);
        row.worst = std::max(row.worst, fro(sub(joseph, naive)) / fro(p_hat));
    }
    row.pass = row.worst <= row.threshold;
    row.seconds = timer.seconds();
    return row;
}

SelftestRow suite_pd_retention(const SelftestOptions& opt) {
    NoGradGuard ng;
    Timer timer;
    SelftestRow row{"pd-retention", true, 0.0, 0.0, 0.0};
    const int64_t d = 8;
    for (uint64_t run = 0; run < 20 && row.pass; ++run) {
        Rng rng(derive_seed(opt.seed, 0x9d, run));
        auto params = KalmanParams::init(d);
        params.a = Tensor::randn({d, d}, rng, 0.0, 0.5);
        params.b = Tensor::randn({d, d}, rng, 0.0, 0.5);
        params.h = Tensor::randn({d, d}, rng, 0.0, 0.5);
        for (int64_t i = 0; i < d * d; ++i) {
            params.lq_raw.data_mut()[i] += rng.normal(0.0, 0.3);
            params.lr_raw.data_mut()[i] += rng.normal(0.0, 0.3);
        }
        KalmanState state{Tensor::randn({d, 1}, rng), SpdMatrix::from(Tensor::eye(d)), 0};
        for (int step = 0; step < 100; ++step) {
            auto [z_hat, p_hat] = predict_step(state, Tensor::randn({d, 1}, rng), params);
            state = update_step(z_hat, p_hat, Tensor::randn({d, 1}, rng), params, step + 1);
            auto check = is_positive_definite(state.p.mat);
            if (!check.positive_definite || state.p.jitter_applied != 0.0) {
                row.pass = false;
                break;
            }
            row.worst = std::max(row.worst, state.p.jitter_applied);
        }
    }
    row.seconds = timer.seconds();
    return row;
}

SelftestRow suite_edmd(const SelftestOptions& opt) {
    NoGradGuard ng;
    Timer timer;
    SelftestRow row{"edmd-recovery", false, 0.0, 1e-6, 0.0};
    for (uint64_t rep = 0; rep < 30; ++rep) {
        Rng rng(derive_seed(opt.seed, 0xed, rep));
        const int64_t d = 2 + static_cast<int64_t>(rng.below(7));
        auto m = spread_generator(d, rng);
        auto traj = linear_trajectory(m, rng, d + 4);
        auto k_loc = reshape(fit_local_operator(traj, 1e-13), {d, d});
        row.worst = std::max(row.worst, fro(sub(k_loc, m)) / fro(m));
    }
    row.pass = row.worst <= row.threshold;
    row.seconds = timer.seconds();
    return row;
}

SelftestRow suite_gradients(const SelftestOptions& opt) {
    Timer timer;
    SelftestRow row{"gradient-checks", false, 0.0, 1e-4, 0.0};
    Rng rng(derive_seed(opt.seed, 0x9ead));

    // small tanh MLP
    {
        auto w1 = Tensor::randn({4, 3}, rng).set_requires_grad(true);
        auto b1 = Tensor::randn({4, 1}, rng).set_requires_grad(true);
        auto w2 = Tensor::randn({1, 4}, rng).set_requires_grad(true);
        auto x = Tensor::randn({3, 1}, rng);
        std::vector<NamedParam> params{{"w1", w1}, {"b1", b1}, {"w2", w2}};
        auto f = [&] { return sum_all(matmul(w2, tanh(add(matmul(w1, x), b1)))); };
        auto report = finite_difference_check(f, params, 1e-5, 1e-4);
        row.worst = std::max(row.worst, report.worst_rel_err);
    }
    // factorization and solve
    {
        auto a = random_spd(4, rng, 1.0);
        a.set_requires_grad(true);
        auto b = Tensor::randn({4, 2}, rng).set_requires_grad(true);
        auto w = Tensor::randn({4, 2}, rng);
        auto wl = Tensor::randn({4, 4}, rng);
        std::vector<NamedParam> params{{"a", a}, {"b", b}};
        auto f = [&] {
            return add(sum_all(mul(solve_spd(a, b), w)), sum_all(mul(cholesky(a), wl)));
        };
        auto report = finite_difference_check(f, params, 1e-5, 1e-4);
        row.worst = std::max(row.worst, report.worst_rel_err);
    }
    // measurement map
    {
        auto psi = MeasurementMlp::init(3, rng);
        auto tokens = Tensor::randn({2, 3, 4}, rng);
        std::vector<NamedParam> params;
        psi.collect(params, "psi");
        auto w = Tensor::randn({2, 3, 4}, rng);
        auto f = [&] { return sum_all(mul(measure(psi, tokens), w)); };
        auto report = finite_difference_check(f, params, 1e-5, 1e-4);
        row.worst = std::max(row.worst, report.worst_rel_err);
    }
    row.pass = row.worst <= row.threshold;
    row.seconds = timer.seconds();
    return row;
}

SelftestRow suite_crps(const SelftestOptions& opt) {
    Timer timer;
    SelftestRow row{"crps-oracle", false, 0.0, 1e-6, 0.0};
    Rng rng(derive_seed(opt.seed, 0xc595));
    for (int rep = 0; rep < 50; ++rep) {
        const int64_t s = 2 + static_cast<int64_t>(rng.below(20));
        std::vector<double> samples(s);
        for (auto& v : samples) v = rng.normal(0.0, 2.0);
        const double x = rng.normal(0.0, 2.0);
        row.worst = std::max(row.worst,
                             std::abs(crps_empirical(samples, x) - crps_integral(samples, x)));
    }
    std::vector<double> coin{0.0, 1.0};
    row.worst = std::max(row.worst, std::abs(crps_empirical(coin, 0.5) - 0.25));
    row.pass = row.worst <= row.threshold;
    row.seconds = timer.seconds();
    return row;
}

SelftestRow suite_theorem2(const SelftestOptions& opt) {
    NoGradGuard ng;
    Timer timer;
    SelftestRow row{"observation-dominant-limit", false, 0.0, 1e-6, 0.0};
    for (uint64_t rep = 0; rep < 20; ++rep) {
        Rng rng(derive_seed(opt.seed, 0x72, rep));
        const int64_t d = 2 + static_cast<int64_t>(rng.below(5));
        const int64_t m = 4;
        auto k = Tensor::randn({d, d}, rng, 0.0, 0.4);
        auto x1 = Tensor::randn({d, 1}, rng);
        auto [c, x_hat_h] = rollout(k, x1, 2, m);
        (void)c;
        auto params = KalmanParams::init(d);
        params.a = Tensor::zeros({d, d});
        for (int64_t i = 0; i < d; ++i) params.lr_raw.data_mut()[i * d + i] = -30.0;
        auto res = run_filter(Tensor::randn({d, 1}, rng), Tensor::zeros({d, m}), x_hat_h, params);
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j < m; ++j) {
                row.worst = std::max(row.worst,
                                     std::abs(res.states.at({i, j}) - x_hat_h.at({i, j})));
            }
        }
    }
    row.pass = row.worst <= row.threshold;
    row.seconds = timer.seconds();
    return row;
}

}  // namespace

SelftestReport run_selftest(const SelftestOptions& options) {
    SelftestReport report;
    report.rows.push_back(suite_joseph(options));
    report.rows.push_back(suite_pd_retention(options));
    report.rows.push_back(suite_edmd(options));
    report.rows.push_back(suite_gradients(options));
    report.rows.push_back(suite_crps(options));
    report.rows.push_back(suite_theorem2(options));
    for (const auto& row : report.rows) report.all_pass = report.all_pass && row.pass;
    return report;
}

}  // namespace koopkal
