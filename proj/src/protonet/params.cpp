#include "protodiff/protonet/params.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

namespace protodiff::protonet {
namespace {

std::uint32_t fnv1a32(const std::string& s) {
  std::uint32_t h = 2166136261u;
  for (unsigned char c : s) {
    h ^= c;
    h *= 16777619u;
  }
  return h;
}

struct Declarer {
  DenoiserParams* store;
  std::uint64_t seed;

  std::mt19937_64 stream(const std::string& name) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      fnv1a32(name)};
    return std::mt19937_64(seq);
  }

  void uniform(const std::string& name, nd::Shape shape, std::size_t fan_in) {
    auto rng = stream(name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<float> v(nd::numel(shape));
    for (auto& x : v) x = static_cast<float>(dist(rng));
    store->add(name, nd::Tensor<float>(std::move(shape), std::move(v)));
  }

  void gaussian(const std::string& name, nd::Shape shape, double sd) {
    auto rng = stream(name);
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<float> v(nd::numel(shape));
    for (auto& x : v) x = static_cast<float>(dist(rng));
    store->add(name, nd::Tensor<float>(std::move(shape), std::move(v)));
  }

  void conv(const std::string& pre, std::size_t cout, std::size_t cin, std::size_t k) {
    uniform(pre + ".w", {cout, cin, k}, cin * k);
    uniform(pre + ".b", {cout}, cin * k);
  }

  void conv_transpose(const std::string& pre, std::size_t cin, std::size_t cout, std::size_t k) {
    uniform(pre + ".w", {cin, cout, k}, cout * k);
    uniform(pre + ".b", {cout}, cout * k);
  }

  void linear(const std::string& pre, std::size_t in, std::size_t out, bool bias = true) {
    uniform(pre + ".w", {in, out}, in);
    if (bias) uniform(pre + ".b", {out}, in);
  }

  void res_block(const std::string& pre, std::size_t cin, std::size_t cout, std::size_t width) {
    conv(pre + ".conv1", cout, cin, 3);
    conv(pre + ".conv2", cout, cout, 3);
    linear(pre + ".temb", width, cout);
    if (cin != cout) conv(pre + ".skip", cout, cin, 1);
  }

  void attn_block(const std::string& pre, std::size_t channels, const ModelConfig& c) {
    const std::size_t d = c.width;
    conv(pre + ".proj_in", d, channels, 1);
    uniform(pre + ".wq", {d, d}, d);
    uniform(pre + ".wk", {d, d}, d);
    uniform(pre + ".wv", {d, d}, d);
    linear(pre + ".ff1", d, c.ff_mult * d);
    linear(pre + ".ff2", c.ff_mult * d, d);
    conv(pre + ".proj_out", channels, d, 1);
  }
};

}  // namespace

std::string to_string(ConditionMode m) {
  switch (m) {
    case ConditionMode::prototypes:
      return "prototypes";
    case ConditionMode::raw_weights:
      return "raw_weights";
    case ConditionMode::unconditional:
      return "unconditional";
  }
  return "?";
}

ConditionMode parse_condition_mode(const std::string& s) {
  if (s == "prototypes") return ConditionMode::prototypes;
  if (s == "raw_weights") return ConditionMode::raw_weights;
  if (s == "unconditional") return ConditionMode::unconditional;
  throw std::invalid_argument("unknown condition mode '" + s + "'");
}

std::string to_string(BiasMode m) { return m == BiasMode::additive ? "additive" : "gate"; }

BiasMode parse_bias_mode(const std::string& s) {
  if (s == "additive") return BiasMode::additive;
  if (s == "gate") return BiasMode::gate;
  throw std::invalid_argument("unknown bias mode '" + s + "' (additive|gate)");
}

std::size_t ModelConfig::padded_length() const {
  constexpr std::size_t factor = std::size_t{1} << kLevels;
  if (length % factor == 0) return length;
  const std::size_t padded = (length / factor + 1) * factor;
  if (!auto_pad) {
    throw std::invalid_argument("denoiser: length " + std::to_string(length) +
                                " is not divisible by " + std::to_string(factor) + "; pad by " +
                                std::to_string(padded - length) + " to " + std::to_string(padded));
  }
  return padded;
}

void ModelConfig::validate() const {
  if (length == 0) throw std::invalid_argument("model: length must be positive");
  if (prototypes == 0) throw std::invalid_argument("model: need at least one prototype");
  if (width < prototypes) {
    throw std::invalid_argument("model: width " + std::to_string(width) + " < prototypes " +
                                std::to_string(prototypes));
  }
  if (heads == 0 || width % heads != 0) {
    throw std::invalid_argument("model: width must be divisible by heads");
  }
  if (width % 2 != 0) throw std::invalid_argument("model: width must be even");
  if (base_channels == 0 || pam_hidden == 0 || ff_mult == 0) {
    throw std::invalid_argument("model: widths must be positive");
  }
  if (pam_kernel % 2 == 0) throw std::invalid_argument("model: pam kernel must be odd");
  for (auto m : channel_mult) {
    if (m == 0) throw std::invalid_argument("model: channel multipliers must be positive");
  }
  (void)padded_length();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"length", c.length},
                     {"prototypes", c.prototypes},
                     {"width", c.width},
                     {"base_channels", c.base_channels},
                     {"channel_mult", c.channel_mult},
                     {"heads", c.heads},
                     {"pam_hidden", c.pam_hidden},
                     {"pam_kernel", c.pam_kernel},
                     {"ff_mult", c.ff_mult},
                     {"mode", to_string(c.mode)},
                     {"bias", to_string(c.bias)},
                     {"auto_pad", c.auto_pad}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.length = j.at("length").get<std::size_t>();
  c.prototypes = j.at("prototypes").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.base_channels = j.at("base_channels").get<std::size_t>();
  c.channel_mult = j.at("channel_mult").get<std::array<std::size_t, kLevels>>();
  c.heads = j.at("heads").get<std::size_t>();
  c.pam_hidden = j.at("pam_hidden").get<std::size_t>();
  c.pam_kernel = j.at("pam_kernel").get<std::size_t>();
  c.ff_mult = j.at("ff_mult").get<std::size_t>();
  c.mode = parse_condition_mode(j.at("mode").get<std::string>());
  c.bias = parse_bias_mode(j.at("bias").get<std::string>());
  c.auto_pad = j.at("auto_pad").get<bool>();
}

template <typename T>
nd::Tensor<T>& ParamStore<T>::add(const std::string& name, nd::Tensor<T> value) {
  auto [it, inserted] = items_.emplace(name, std::move(value));
  if (!inserted) throw std::invalid_argument("duplicate parameter '" + name + "'");
  return it->second;
}

template <typename T>
const nd::Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second;
}

template <typename T>
nd::Tensor<T>& ParamStore<T>::at(const std::string& name) {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.size();
  return n;
}

template <typename T>
void ParamStore<T>::set_requires_grad(bool on) {
  for (auto& [_, t] : items_) t.set_requires_grad(on);
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

template class ParamStore<float>;
template class ParamStore<double>;

DenoiserParams init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  DenoiserParams store;
  Declarer decl{&store, seed};
  const std::size_t d = c.width;

  decl.linear("time.fc1", d, d);
  decl.linear("time.fc2", d, d);
  decl.conv("in", c.channels(0), 1, 3);

  std::size_t prev = c.channels(0);
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::string pre = "down" + std::to_string(i);
    const std::size_t ch = c.channels(i);
    decl.res_block(pre + ".res0", prev, ch, d);
    decl.res_block(pre + ".res1", ch, ch, d);
    decl.attn_block(pre + ".attn", ch, c);
    decl.conv(pre + ".down", ch, ch, 3);
    prev = ch;
  }
  decl.res_block("mid.res0", prev, prev, d);
  decl.attn_block("mid.attn", prev, c);
  decl.res_block("mid.res1", prev, prev, d);
  for (std::size_t r = kLevels; r-- > 0;) {
    const std::string pre = "up" + std::to_string(r);
    const std::size_t ch = c.channels(r);
    decl.conv_transpose(pre + ".up", prev, prev, 4);
    decl.res_block(pre + ".res0", prev + ch, ch, d);
    decl.res_block(pre + ".res1", ch, ch, d);
    decl.attn_block(pre + ".attn", ch, c);
    prev = ch;
  }
  decl.conv("out", 1, c.channels(0), 3);
  decl.gaussian("uncond", {1, d}, 1.0 / std::sqrt(static_cast<double>(d)));

  const std::size_t h = c.pam_hidden, k = c.pam_kernel;
  decl.conv("pam.conv1", h, 1, k);
  decl.conv("pam.conv2", h, h, k);
  decl.conv("pam.res1", h, h, k);
  decl.conv("pam.res2", h, h, k);
  decl.linear("pam.proj", h, c.prototypes);
  if (c.mode == ConditionMode::raw_weights) decl.linear("nopam.proj", c.prototypes, d);
  return store;
}

}  // namespace protodiff::protonet
