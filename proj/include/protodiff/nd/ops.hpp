#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "protodiff/nd/tensor.hpp"

// Differentiable primitives. Every op checks shapes up front and throws
// ShapeError naming the op and the offending shapes. Results are recorded on
// the active Tape<T> only when at least one input requires a gradient.
//
// Layout conventions: sequences are [batch, channels, length]; token blocks
// are [batch, tokens, width].

namespace protodiff::nd {

// -- elementwise -------------------------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <typename T> Tensor<T> silu(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);

// -- reductions --------------------------------------------------------------

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Mean over one axis; the axis is removed from the result shape.
template <typename T> Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis);

// -- linear algebra ----------------------------------------------------------

/// [m, k] x [k, n] -> [m, n]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x [m, k], weight [k, n], optional bias [n] -> [m, n]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Output length of conv1d: (length + 2*padding - kernel) / stride + 1.
std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, ConvGeometry g);
/// Output length of conv_transpose1d: (length - 1)*stride - 2*padding + kernel.
std::size_t conv_transpose1d_output_length(std::size_t length, std::size_t kernel,
                                           ConvGeometry g);

/// x [b, cin, l], weight [cout, cin, k], optional bias [cout] -> [b, cout, lout]
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 ConvGeometry g);
/// x [b, cin, l], weight [cin, cout, k], optional bias [cout] -> [b, cout, lout]
template <typename T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           ConvGeometry g);

// -- softmax and attention ---------------------------------------------------

template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);

/// Softmax over the last axis of logits [b, rows, n] with an additive
/// per-batch bias [b, n] (may be undefined) and an activity flag per (b, n).
///
/// Inactive entries are excluded from the max and the normalizer and come
/// out as exactly zero; they never see an infinity. A batch entry with no
/// active element is an error.
template <typename T>
Tensor<T> biased_softmax(const Tensor<T>& logits, const Tensor<T>& bias,
                         std::span<const std::uint8_t> active);

/// Multi-head scores: q [b, lq, d], k [b, nk, d] -> [b, heads*lq, nk] where
/// row h*lq + i holds factor * <q_i, k_j> restricted to head h's slice of d.
template <typename T>
Tensor<T> multihead_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads, T factor);
/// Inverse layout of multihead_scores: probs [b, heads*lq, nk], v [b, nk, d] -> [b, lq, d]
/// with head outputs concatenated along d.
template <typename T>
Tensor<T> multihead_mix(const Tensor<T>& probs, const Tensor<T>& v, std::size_t heads);

// -- shape plumbing ----------------------------------------------------------

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// [b, m, n] -> [b, n, m]
template <typename T> Tensor<T> transpose_last2(const Tensor<T>& a);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
/// v [b, c] -> [b, c, length]
template <typename T> Tensor<T> broadcast_positions(const Tensor<T>& v, std::size_t length);
/// a [...] -> [batch, ...]
template <typename T> Tensor<T> broadcast_batch(const Tensor<T>& a, std::size_t batch);
/// Zero-pads the last axis on the right.
template <typename T> Tensor<T> pad_last(const Tensor<T>& a, std::size_t right);
/// Keeps [start, start + count) of the last axis.
template <typename T> Tensor<T> slice_last(const Tensor<T>& a, std::size_t start, std::size_t count);

/// Element-type conversion of a value (no gradient link).
template <typename To, typename From> Tensor<To> cast(const Tensor<From>& a);

}  // namespace protodiff::nd
