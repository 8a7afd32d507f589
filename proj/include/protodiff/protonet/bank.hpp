#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace protodiff::protonet {

/// Frozen set of orthonormal prototype rows ("basis words"), row-major
/// [count, width]. Never part of the trainable parameter set.
struct PrototypeBank {
  std::size_t count = 0;
  std::size_t width = 0;
  std::vector<float> rows;

  std::span<const float> row(std::size_t j) const {
    return std::span<const float>(rows).subspan(j * width, width);
  }
  /// max |P P^T - I| computed in double.
  double orthonormality_error() const;
};

/// Rows from modified Gram-Schmidt (two passes, in double) on a seeded
/// Gaussian matrix. Requires width >= count >= 1.
PrototypeBank init_prototypes(std::size_t count, std::size_t width, std::uint64_t seed);

/// Prototype assignment: raw extractor outputs plus the derived active set.
/// A prototype is active exactly when its weight is strictly positive.
struct AssignmentMask {
  std::vector<float> weights;
  std::vector<std::uint8_t> active;

  static AssignmentMask from_weights(std::span<const float> weights);
  /// Exactly prototype `j` active with weight `value`; all others zero.
  static AssignmentMask one_hot(std::size_t count, std::size_t j, float value = 1.0f);

  std::size_t active_count() const;
  bool any_active() const { return active_count() > 0; }
};

/// Jaccard similarity of two active sets (1 when both are empty).
double jaccard(const AssignmentMask& a, const AssignmentMask& b);

/// Condition dropping for training: with probability p_drop the prototype
/// condition is replaced by the unconditional token (returns nullopt).
std::optional<AssignmentMask> drop_condition(const AssignmentMask& mask, double p_drop,
                                             std::mt19937_64& rng);
/// Draw used by drop_condition; true means "drop".
bool draw_drop(double p_drop, std::mt19937_64& rng);

}  // namespace protodiff::protonet
