#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "protodiff/dataio.hpp"

namespace protodiff::metrics {

/// M sequences of equal length.
using SampleSet = std::vector<dataio::Window>;

/// Throws unless the set is non-empty, rectangular and finite.
void check_set(const SampleSet& s, const char* what);

/// Median pairwise Euclidean distance over the pooled rows of a and b
/// (distinct pairs only); 1 when that median is 0.
double median_bandwidth(const SampleSet& a, const SampleSet& b);

/// Biased V-statistic MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 sigma^2)).
double mmd_squared(const SampleSet& real, const SampleSet& synth, double sigma);
/// sqrt(max(0, MMD^2)); median heuristic when sigma is not given.
double mmd(const SampleSet& real, const SampleSet& synth,
           std::optional<double> sigma = std::nullopt);

/// KL(p || q) in nats for probability vectors of equal size.
double kl_from_probabilities(std::span<const double> p, std::span<const double> q);
/// Pooled-value histogram KL(real || synth) with +1 smoothing.
double kl(const SampleSet& real, const SampleSet& synth, std::size_t bins = 50);

/// Mean over bins of |p - q| for two normalized histograms.
double mean_abs_difference(std::span<const double> p, std::span<const double> q);
/// Per-time-step histogram difference averaged over steps.
double mdd(const SampleSet& real, const SampleSet& synth, std::size_t bins = 50);

struct MetricReport {
  double mmd = 0.0, kl = 0.0, mdd = 0.0;
  double bandwidth = 0.0;
  std::size_t bins = 50;
};

MetricReport evaluate(const SampleSet& real, const SampleSet& synth, std::size_t bins = 50,
                      std::optional<double> sigma = std::nullopt);

/// One-sided permutation p-value for MMD^2 at fixed bandwidth:
/// (1 + #{perm stat >= observed}) / (1 + permutations).
double mmd_permutation_pvalue(const SampleSet& a, const SampleSet& b, std::size_t permutations,
                              std::uint64_t seed, std::optional<double> sigma = std::nullopt);

}  // namespace protodiff::metrics
