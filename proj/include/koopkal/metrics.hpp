#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "koopkal/common.hpp"

namespace koopkal {

// Sample paths drawn from a forecast distribution next to the realized
// observation, flattened over the N×L coordinates.
struct SampleForecast {
    int64_t sample_count = 0;
    int64_t coords = 0;
    std::vector<double> paths;        // sample_count × coords, row-major
    std::vector<double> observation;  // coords

    double path(int64_t s, int64_t c) const { return paths[s * coords + c]; }
};

// Empirical CRPS of one scalar coordinate via the sample identity
// mean|X − x| − ½·mean|X − X'| over all ordered pairs. Needs at least two
// samples; equals |c − x| when every sample is the same c.
double crps_empirical(std::span<const double> samples, double x);

// Same value through the sorted O(S log S) pairwise-sum formula.
double crps_empirical_sorted(std::span<const double> samples, double x);

struct CrpsSummary {
    double mean_crps = 0.0;        // mean over coordinates
    double normalized_crps = 0.0;  // mean CRPS / mean |observation|
};

CrpsSummary crps_of(const SampleForecast& forecast);

// Σ|x − x̂| / Σ|x|; errors when the truth is identically zero.
double nmae(std::span<const double> pred, std::span<const double> truth);

// Per-coordinate median of the sample paths: the point prediction used for
// NMAE on generative forecasts.
std::vector<double> median_path(const SampleForecast& forecast);

double nmae_of(const SampleForecast& forecast);

}  // namespace koopkal
