#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "protodiff/nd/tensor.hpp"

namespace protodiff::protonet {

/// How the denoiser is conditioned.
///   prototypes:     masked cross-attention over the frozen bank (default)
///   raw_weights:    the extractor output projected to a single token (no PAM)
///   unconditional:  always the learnable unconditional token (no prompt)
enum class ConditionMode { prototypes, raw_weights, unconditional };
/// additive: positive assignment weights are added to the attention logits.
/// gate:     weights only select the active set; logits are unbiased.
enum class BiasMode { additive, gate };

std::string to_string(ConditionMode m);
ConditionMode parse_condition_mode(const std::string& s);
std::string to_string(BiasMode m);
BiasMode parse_bias_mode(const std::string& s);

inline constexpr std::size_t kLevels = 4;

struct ModelConfig {
  std::size_t length = 24;       // series length T
  std::size_t prototypes = 16;   // N_p
  std::size_t width = 64;        // d, prototype / attention width
  std::size_t base_channels = 32;
  std::array<std::size_t, kLevels> channel_mult{1, 2, 2, 4};
  std::size_t heads = 8;
  std::size_t pam_hidden = 32;
  std::size_t pam_kernel = 3;
  std::size_t ff_mult = 2;
  ConditionMode mode = ConditionMode::prototypes;
  BiasMode bias = BiasMode::additive;
  /// Right-pad lengths that are not multiples of 2^levels inside the U-Net.
  bool auto_pad = true;

  std::size_t channels(std::size_t level) const { return base_channels * channel_mult[level]; }
  /// Internal U-Net length; throws when auto_pad is off and length is not a multiple of 16.
  std::size_t padded_length() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Named, ordered collection of trainable arrays.
template <typename T>
class ParamStore {
 public:
  using Map = std::map<std::string, nd::Tensor<T>>;

  nd::Tensor<T>& add(const std::string& name, nd::Tensor<T> value);
  const nd::Tensor<T>& at(const std::string& name) const;
  nd::Tensor<T>& at(const std::string& name);
  bool contains(const std::string& name) const { return items_.count(name) != 0; }

  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;
  typename Map::const_iterator begin() const { return items_.begin(); }
  typename Map::const_iterator end() const { return items_.end(); }
  typename Map::iterator begin() { return items_.begin(); }
  typename Map::iterator end() { return items_.end(); }

  void set_requires_grad(bool on);
  void zero_grad();

  /// Deep copy with element conversion; gradient flags are not carried over.
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : items_) {
      std::vector<U> v(t.data().begin(), t.data().end());
      out.add(name, nd::Tensor<U>(t.shape(), std::move(v)));
    }
    return out;
  }

 private:
  Map items_;
};

using DenoiserParams = ParamStore<float>;

/// Declares and initializes every parameter of the denoiser and the
/// assignment extractor. Each array draws from its own stream keyed by
/// (seed, name), so the result does not depend on declaration order.
DenoiserParams init_params(const ModelConfig& config, std::uint64_t seed);

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace protodiff::protonet
