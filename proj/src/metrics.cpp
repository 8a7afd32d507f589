#include "protodiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "protodiff/seeding.hpp"

namespace protodiff::metrics {
namespace {

double sq_dist(const dataio::Window& x, const dataio::Window& y) {
  double s = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double d = static_cast<double>(x[t]) - y[t];
    s += d * d;
  }
  return s;
}

void check_pair(const SampleSet& a, const SampleSet& b) {
  check_set(a, "real");
  check_set(b, "synth");
  if (a[0].size() != b[0].size()) {
    throw std::invalid_argument("sample sets have lengths " + std::to_string(a[0].size()) +
                                " and " + std::to_string(b[0].size()));
  }
}

// Sum that does not depend on the order the terms were produced in.
double ordered_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double v : terms) s += v;
  return s;
}

double mean_kernel(const SampleSet& x, const SampleSet& y, double gamma) {
  std::vector<double> k;
  k.reserve(x.size() * y.size());
  for (const auto& a : x) {
    for (const auto& b : y) k.push_back(std::exp(-gamma * sq_dist(a, b)));
  }
  return ordered_sum(k) / static_cast<double>(k.size());
}

// Equal-width bin of v in [lo, hi]; the top edge goes to the last bin.
std::size_t bin_of(double v, double lo, double hi, std::size_t bins) {
  const double f = (v - lo) / (hi - lo);
  auto b = static_cast<std::size_t>(std::floor(f * static_cast<double>(bins)));
  return std::min(b, bins - 1);
}

void check_bins(std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("histogram needs at least 2 bins");
}

}  // namespace

void check_set(const SampleSet& s, const char* what) {
  if (s.empty()) throw std::invalid_argument(std::string(what) + " set is empty");
  const auto len = s[0].size();
  if (len == 0) throw std::invalid_argument(std::string(what) + " set has zero-length rows");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].size() != len) {
      throw std::invalid_argument(std::string(what) + " row " + std::to_string(i) +
                                  " has length " + std::to_string(s[i].size()) + ", expected " +
                                  std::to_string(len));
    }
    for (float v : s[i]) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument(std::string(what) + " row " + std::to_string(i) +
                                    " contains a non-finite value");
      }
    }
  }
}

double median_bandwidth(const SampleSet& a, const SampleSet& b) {
  std::vector<const dataio::Window*> pooled;
  for (const auto& r : a) pooled.push_back(&r);
  for (const auto& r : b) pooled.push_back(&r);
  std::vector<double> d;
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    for (std::size_t j = i + 1; j < pooled.size(); ++j) {
      d.push_back(std::sqrt(sq_dist(*pooled[i], *pooled[j])));
    }
  }
  if (d.empty()) return 1.0;
  std::sort(d.begin(), d.end());
  const std::size_t m = d.size();
  const double med = m % 2 ? d[m / 2] : 0.5 * (d[m / 2 - 1] + d[m / 2]);
  return med > 0.0 ? med : 1.0;
}

double mmd_squared(const SampleSet& real, const SampleSet& synth, double sigma) {
  check_pair(real, synth);
  if (!(sigma > 0.0)) throw std::invalid_argument("mmd: bandwidth must be positive");
  const double gamma = 1.0 / (2.0 * sigma * sigma);
  return mean_kernel(real, real, gamma) + mean_kernel(synth, synth, gamma) -
         2.0 * mean_kernel(real, synth, gamma);
}

double mmd(const SampleSet& real, const SampleSet& synth, std::optional<double> sigma) {
  check_pair(real, synth);
  const double s = sigma ? *sigma : median_bandwidth(real, synth);
  return std::sqrt(std::max(0.0, mmd_squared(real, synth, s)));
}

double kl_from_probabilities(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw std::invalid_argument("kl: probability vectors must be non-empty and equal length");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw std::invalid_argument("kl: negative probability");
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) throw std::invalid_argument("kl: q has zero mass where p does not");
    s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

double kl(const SampleSet& real, const SampleSet& synth, std::size_t bins) {
  check_pair(real, synth);
  check_bins(bins);
  double lo = real[0][0], hi = lo;
  for (const auto* set : {&real, &synth}) {
    for (const auto& r : *set) {
      for (float v : r) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
      }
    }
  }
  if (!(hi > lo)) return 0.0;
  auto hist = [&](const SampleSet& s) {
    std::vector<double> h(bins, 1.0);
    double total = static_cast<double>(bins);
    for (const auto& r : s) {
      for (float v : r) {
        h[bin_of(v, lo, hi, bins)] += 1.0;
        total += 1.0;
      }
    }
    for (auto& x : h) x /= total;
    return h;
  };
  const auto p = hist(real), q = hist(synth);
  return std::max(0.0, kl_from_probabilities(p, q));
}

double mean_abs_difference(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw std::invalid_argument("histograms must be non-empty and equal length");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return s / static_cast<double>(p.size());
}

double mdd(const SampleSet& real, const SampleSet& synth, std::size_t bins) {
  check_pair(real, synth);
  check_bins(bins);
  const std::size_t len = real[0].size();
  double total = 0.0;
  for (std::size_t t = 0; t < len; ++t) {
    double lo = real[0][t], hi = lo;
    for (const auto* set : {&real, &synth}) {
      for (const auto& r : *set) {
        lo = std::min(lo, static_cast<double>(r[t]));
        hi = std::max(hi, static_cast<double>(r[t]));
      }
    }
    if (!(hi > lo)) continue;  // both sets constant and equal at this step
    auto hist = [&](const SampleSet& s) {
      std::vector<double> h(bins, 0.0);
      for (const auto& r : s) h[bin_of(r[t], lo, hi, bins)] += 1.0;
      for (auto& x : h) x /= static_cast<double>(s.size());
      return h;
    };
    total += mean_abs_difference(hist(real), hist(synth));
  }
  return total / static_cast<double>(len);
}

MetricReport evaluate(const SampleSet& real, const SampleSet& synth, std::size_t bins,
                      std::optional<double> sigma) {
  MetricReport r;
  r.bins = bins;
  r.bandwidth = sigma ? *sigma : median_bandwidth(real, synth);
  r.mmd = mmd(real, synth, r.bandwidth);
  r.kl = kl(real, synth, bins);
  r.mdd = mdd(real, synth, bins);
  return r;
}

double mmd_permutation_pvalue(const SampleSet& a, const SampleSet& b, std::size_t permutations,
                              std::uint64_t seed, std::optional<double> sigma) {
  check_pair(a, b);
  if (permutations == 0) throw std::invalid_argument("permutation test needs >= 1 permutation");
  const double s = sigma ? *sigma : median_bandwidth(a, b);
  const double observed = mmd_squared(a, b, s);
  SampleSet pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  auto rng = make_rng(seed, 0x7065726d);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(pooled.begin(), pooled.end(), rng);
    const SampleSet x(pooled.begin(), pooled.begin() + static_cast<std::ptrdiff_t>(a.size()));
    const SampleSet y(pooled.begin() + static_cast<std::ptrdiff_t>(a.size()), pooled.end());
    if (mmd_squared(x, y, s) >= observed) ++hits;
  }
  return (1.0 + static_cast<double>(hits)) / (1.0 + static_cast<double>(permutations));
}

}  // namespace protodiff::metrics
