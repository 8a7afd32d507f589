#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "protodiff/nd/ops.hpp"
#include "protodiff/nd/tensor.hpp"
#include "protodiff/protonet/bank.hpp"
#include "protodiff/protonet/params.hpp"

namespace protodiff::protonet {

/// Keys/values source for one cross-attention call.
///   tokens: [n, d] shared by the batch, or [b, n, d] per sample
///   bias:   [b, n] additive logit bias, or undefined
///   active: b*n flags; inactive tokens get exactly zero probability
template <typename T>
struct AttentionContext {
  nd::Tensor<T> tokens;
  nd::Tensor<T> bias;
  std::vector<std::uint8_t> active;
};

/// FF(softmax(Q K^T / sqrt(d) + bias) V) with Q = z Wq, K = tokens Wk,
/// V = tokens Wv, split across `heads`. z is [b, l, d]; the result has the
/// same shape. Parameters are read from `prefix` + ".wq" etc.
template <typename T>
nd::Tensor<T> masked_cross_attention(const nd::Tensor<T>& z, const AttentionContext<T>& ctx,
                                     const ParamStore<T>& params, const std::string& prefix,
                                     std::size_t heads);

/// Per-batch conditioning input for Denoiser::predict.
template <typename T>
struct Conditioning {
  /// Raw extractor outputs [b, N_p]. Unused in unconditional mode.
  nd::Tensor<T> weights;
  /// Per-sample "use p_u instead" flags; empty means nothing dropped.
  std::vector<std::uint8_t> dropped;
  /// When set, a sample whose mask has no active prototype falls back to
  /// p_u. When clear, such a sample is an error.
  bool degenerate_to_uncond = false;
};

/// Prototype-conditioned 1-D U-Net epsilon predictor and the assignment
/// extractor phi. Holds shallow handles to the parameters, so gradients
/// accumulate on the caller's leaves.
template <typename T>
class Denoiser {
 public:
  Denoiser(ModelConfig config, ParamStore<T> params, const PrototypeBank& bank);

  const ModelConfig& config() const { return config_; }
  const ParamStore<T>& params() const { return params_; }

  /// phi(x0): [b, T] -> raw weights [b, N_p].
  nd::Tensor<T> assign(const nd::Tensor<T>& x0) const;

  /// eps_hat for x_n [b, T] at per-sample steps (1-based).
  nd::Tensor<T> predict(const nd::Tensor<T>& xn, std::span<const std::size_t> steps,
                        const Conditioning<T>& cond) const;

  /// Conditioning that routes every sample to p_u.
  static Conditioning<T> unconditional(std::size_t batch);

  /// The context the attention layers see for a given conditioning.
  AttentionContext<T> context(const Conditioning<T>& cond, std::size_t batch) const;

 private:
  nd::Tensor<T> time_embedding(std::span<const std::size_t> steps) const;
  nd::Tensor<T> res_block(const std::string& pre, const nd::Tensor<T>& x,
                          const nd::Tensor<T>& temb) const;
  nd::Tensor<T> attn_block(const std::string& pre, const nd::Tensor<T>& h,
                           const AttentionContext<T>& ctx) const;
  nd::Tensor<T> conv(const std::string& pre, const nd::Tensor<T>& x, nd::ConvGeometry g) const;

  ModelConfig config_;
  ParamStore<T> params_;
  nd::Tensor<T> bank_;
};

/// Sinusoidal features of integer steps: [b, width], sin half then cos half.
template <typename T>
nd::Tensor<T> sinusoidal_embedding(std::span<const std::size_t> steps, std::size_t width);

extern template class Denoiser<float>;
extern template class Denoiser<double>;

}  // namespace protodiff::protonet
