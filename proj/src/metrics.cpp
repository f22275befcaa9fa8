#include "koopkal/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace koopkal {

double crps_empirical(std::span<const double> samples, double x) {
    const int64_t s = static_cast<int64_t>(samples.size());
    if (s < 2) {
        throw ShapeError("crps_empirical: need at least 2 samples, got " + std::to_string(s));
    }
    double mean_abs = 0.0;
    for (double v : samples) mean_abs += std::abs(v - x);
    mean_abs /= static_cast<double>(s);

    double pair_sum = 0.0;
    for (int64_t i = 0; i < s; ++i) {
        for (int64_t j = 0; j < s; ++j) {
            pair_sum += std::abs(samples[i] - samples[j]);
        }
    }
    const double mean_pair = pair_sum / static_cast<double>(s * s);
    return mean_abs - 0.5 * mean_pair;
}

double crps_empirical_sorted(std::span<const double> samples, double x) {
    const int64_t s = static_cast<int64_t>(samples.size());
    if (s < 2) {
        throw ShapeError("crps_empirical: need at least 2 samples, got " + std::to_string(s));
    }
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    double mean_abs = 0.0, weighted = 0.0;
    for (int64_t i = 0; i < s; ++i) {
        mean_abs += std::abs(sorted[i] - x);
        // Σ_{i<j}(x_(j)−x_(i)) unrolled: element i (0-based) carries weight 2i−S+1
        weighted += (2.0 * static_cast<double>(i) - static_cast<double>(s) + 1.0) * sorted[i];
    }
    mean_abs /= static_cast<double>(s);
    const double mean_pair = 2.0 * weighted / static_cast<double>(s * s);
    return mean_abs - 0.5 * mean_pair;
}

CrpsSummary crps_of(const SampleForecast& forecast) {
    if (forecast.sample_count < 2) {
        throw ShapeError("crps_of: need at least 2 sample paths");
    }
    if (static_cast<int64_t>(forecast.observation.size()) != forecast.coords) {
        throw ShapeError("crps_of: observation length mismatch");
    }
    CrpsSummary out;
    double abs_obs = 0.0;
    std::vector<double> column(forecast.sample_count);
    for (int64_t c = 0; c < forecast.coords; ++c) {
        for (int64_t s = 0; s < forecast.sample_count; ++s) column[s] = forecast.path(s, c);
        out.mean_crps += crps_empirical_sorted(column, forecast.observation[c]);
        abs_obs += std::abs(forecast.observation[c]);
    }
    out.mean_crps /= static_cast<double>(forecast.coords);
    abs_obs /= static_cast<double>(forecast.coords);
    if (abs_obs == 0.0) {
        throw NumericError("crps_of: observation is identically zero, normalizer undefined");
    }
    out.normalized_crps = out.mean_crps / abs_obs;
    return out;
}

double nmae(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size()) {
        throw ShapeError("nmae: prediction and truth lengths differ");
    }
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < truth.size(); ++i) {
        num += std::abs(truth[i] - pred[i]);
        den += std::abs(truth[i]);
    }
    if (den == 0.0) {
        throw NumericError("nmae: truth is identically zero, normalizer undefined");
    }
    return num / den;
}

std::vector<double> median_path(const SampleForecast& forecast) {
    std::vector<double> out(forecast.coords);
    std::vector<double> column(forecast.sample_count);
    for (int64_t c = 0; c < forecast.coords; ++c) {
        for (int64_t s = 0; s < forecast.sample_count; ++s) column[s] = forecast.path(s, c);
        std::sort(column.begin(), column.end());
        const int64_t s = forecast.sample_count;
        out[c] = s % 2 == 1 ? column[s / 2] : 0.5 * (column[s / 2 - 1] + column[s / 2]);
    }
    return out;
}

double nmae_of(const SampleForecast& forecast) {
    auto med = median_path(forecast);
    return nmae(med, forecast.observation);
}

}  // namespace koopkal
