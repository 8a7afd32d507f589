#include "protodiff/protonet/bank.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace protodiff::protonet {

double PrototypeBank::orthonormality_error() const {
  double worst = 0.0;
  for (std::size_t a = 0; a < count; ++a) {
    for (std::size_t b = 0; b < count; ++b) {
      double dot = 0.0;
      for (std::size_t k = 0; k < width; ++k) {
        dot += static_cast<double>(rows[a * width + k]) * rows[b * width + k];
      }
      worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  }
  return worst;
}

PrototypeBank init_prototypes(std::size_t count, std::size_t width, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("init_prototypes: need at least one prototype");
  if (width < count) {
    throw std::invalid_argument("init_prototypes: " + std::to_string(count) +
                                " orthonormal rows do not fit in width " + std::to_string(width));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> m(count * width);
  for (auto& v : m) v = gauss(rng);

  for (std::size_t i = 0; i < count; ++i) {
    double* row = m.data() + i * width;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        const double* prev = m.data() + j * width;
        double dot = 0.0;
        for (std::size_t k = 0; k < width; ++k) dot += row[k] * prev[k];
        for (std::size_t k = 0; k < width; ++k) row[k] -= dot * prev[k];
      }
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < width; ++k) norm += row[k] * row[k];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw std::runtime_error("init_prototypes: degenerate random draw");
    for (std::size_t k = 0; k < width; ++k) row[k] /= norm;
  }

  PrototypeBank bank;
  bank.count = count;
  bank.width = width;
  bank.rows.resize(m.size());
  std::transform(m.begin(), m.end(), bank.rows.begin(), [](double v) { return static_cast<float>(v); });
  return bank;
}

AssignmentMask AssignmentMask::from_weights(std::span<const float> weights) {
  AssignmentMask m;
  m.weights.assign(weights.begin(), weights.end());
  m.active.resize(weights.size());
  for (std::size_t j = 0; j < weights.size(); ++j) m.active[j] = weights[j] > 0.0f ? 1 : 0;
  return m;
}

AssignmentMask AssignmentMask::one_hot(std::size_t count, std::size_t j, float value) {
  if (j >= count) throw std::out_of_range("one_hot: prototype index out of range");
  if (!(value > 0.0f)) throw std::invalid_argument("one_hot: weight must be positive");
  std::vector<float> w(count, 0.0f);
  w[j] = value;
  return from_weights(w);
}

std::size_t AssignmentMask::active_count() const {
  return static_cast<std::size_t>(std::count(active.begin(), active.end(), std::uint8_t{1}));
}

double jaccard(const AssignmentMask& a, const AssignmentMask& b) {
  if (a.active.size() != b.active.size()) {
    throw std::invalid_argument("jaccard: masks of different prototype counts");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t j = 0; j < a.active.size(); ++j) {
    inter += (a.active[j] && b.active[j]) ? 1 : 0;
    uni += (a.active[j] || b.active[j]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

bool draw_drop(double p_drop, std::mt19937_64& rng) {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) {
    throw std::invalid_argument("drop probability must lie in [0, 1)");
  }
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p_drop;
}

std::optional<AssignmentMask> drop_condition(const AssignmentMask& mask, double p_drop,
                                             std::mt19937_64& rng) {
  if (draw_drop(p_drop, rng)) return std::nullopt;
  return mask;
}

}  // namespace protodiff::protonet
