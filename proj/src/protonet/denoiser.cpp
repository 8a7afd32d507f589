#include "protodiff/protonet/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "protodiff/nd/ops.hpp"

namespace protodiff::protonet {

using nd::Shape;
using nd::Tensor;

namespace {

template <typename T>
Tensor<T> opt(const ParamStore<T>& p, const std::string& name) {
  return p.contains(name) ? p.at(name) : Tensor<T>{};
}

// tokens [n, d] or [b, n, d] times w [d, d'] -> [b, n, d']
template <typename T>
Tensor<T> project_tokens(const Tensor<T>& tokens, const Tensor<T>& w, std::size_t batch) {
  if (tokens.rank() == 2) return nd::broadcast_batch(nd::matmul(tokens, w), batch);
  const std::size_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  auto flat = nd::matmul(nd::reshape(tokens, {b * n, d}), w);
  return nd::reshape(flat, {b, n, w.dim(1)});
}

// [b, l, d] rows through a linear layer
template <typename T>
Tensor<T> rows_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  auto y = nd::linear(nd::reshape(x, {b * l, d}), w, bias);
  return nd::reshape(y, {b, l, w.dim(1)});
}

}  // namespace

template <typename T>
Tensor<T> sinusoidal_embedding(std::span<const std::size_t> steps, std::size_t width) {
  if (width % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: width must be even");
  const std::size_t half = width / 2;
  std::vector<T> v(steps.size() * width);
  for (std::size_t b = 0; b < steps.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
      const double a = static_cast<double>(steps[b]) * freq;
      v[b * width + i] = static_cast<T>(std::sin(a));
      v[b * width + half + i] = static_cast<T>(std::cos(a));
    }
  }
  return Tensor<T>({steps.size(), width}, std::move(v));
}

template <typename T>
Tensor<T> masked_cross_attention(const Tensor<T>& z, const AttentionContext<T>& ctx,
                                 const ParamStore<T>& p, const std::string& pre,
                                 std::size_t heads) {
  if (z.rank() != 3) throw nd::ShapeError("masked_cross_attention: z must be [b, l, d]");
  const std::size_t batch = z.dim(0), d = z.dim(2);
  auto q = rows_linear(z, p.at(pre + ".wq"), Tensor<T>{});
  auto k = project_tokens(ctx.tokens, p.at(pre + ".wk"), batch);
  auto v = project_tokens(ctx.tokens, p.at(pre + ".wv"), batch);
  const T factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  auto scores = nd::multihead_scores(q, k, heads, factor);
  auto probs = nd::biased_softmax(scores, ctx.bias, ctx.active);
  auto mixed = nd::multihead_mix(probs, v, heads);
  auto h = nd::silu(rows_linear(mixed, p.at(pre + ".ff1.w"), p.at(pre + ".ff1.b")));
  return rows_linear(h, p.at(pre + ".ff2.w"), p.at(pre + ".ff2.b"));
}

template <typename T>
Denoiser<T>::Denoiser(ModelConfig config, ParamStore<T> params, const PrototypeBank& bank)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  if (bank.count != config_.prototypes || bank.width != config_.width) {
    throw std::invalid_argument("denoiser: bank is " + std::to_string(bank.count) + "x" +
                                std::to_string(bank.width) + ", config expects " +
                                std::to_string(config_.prototypes) + "x" +
                                std::to_string(config_.width));
  }
  bank_ = Tensor<T>({bank.count, bank.width}, std::vector<T>(bank.rows.begin(), bank.rows.end()));
}

template <typename T>
Tensor<T> Denoiser<T>::conv(const std::string& pre, const Tensor<T>& x, nd::ConvGeometry g) const {
  return nd::conv1d(x, params_.at(pre + ".w"), opt(params_, pre + ".b"), g);
}

template <typename T>
Tensor<T> Denoiser<T>::assign(const Tensor<T>& x0) const {
  if (x0.rank() != 2 || x0.dim(1) != config_.length) {
    throw nd::ShapeError("assign: expected [batch, " + std::to_string(config_.length) + "], got " +
                         nd::to_string(x0.shape()));
  }
  const nd::ConvGeometry same{1, config_.pam_kernel / 2};
  auto h = nd::reshape(x0, {x0.dim(0), 1, config_.length});
  h = nd::relu(conv("pam.conv1", h, same));
  h = nd::relu(conv("pam.conv2", h, same));
  auto r = conv("pam.res2", nd::relu(conv("pam.res1", h, same)), same);
  h = nd::relu(nd::add(h, r));
  auto pooled = nd::mean_axis(h, 2);
  return nd::linear(pooled, params_.at("pam.proj.w"), params_.at("pam.proj.b"));
}

template <typename T>
Conditioning<T> Denoiser<T>::unconditional(std::size_t batch) {
  Conditioning<T> c;
  c.dropped.assign(batch, 1);
  return c;
}

template <typename T>
AttentionContext<T> Denoiser<T>::context(const Conditioning<T>& cond, std::size_t batch) const {
  const std::size_t np = config_.prototypes, d = config_.width;
  if (!cond.dropped.empty() && cond.dropped.size() != batch) {
    throw std::invalid_argument("conditioning: dropped flags for " +
                                std::to_string(cond.dropped.size()) + " samples, batch is " +
                                std::to_string(batch));
  }
  auto is_dropped = [&](std::size_t b) { return !cond.dropped.empty() && cond.dropped[b]; };
  bool all_dropped = true;
  for (std::size_t b = 0; b < batch; ++b) all_dropped = all_dropped && is_dropped(b);
  const auto& uncond = params_.at("uncond");

  AttentionContext<T> ctx;
  if (config_.mode == ConditionMode::unconditional || all_dropped) {
    ctx.tokens = uncond;
    ctx.active.assign(batch, 1);
    return ctx;
  }
  if (!cond.weights.defined() || cond.weights.shape() != Shape{batch, np}) {
    throw nd::ShapeError("conditioning: weights must be [" + std::to_string(batch) + ", " +
                         std::to_string(np) + "]");
  }

  if (config_.mode == ConditionMode::raw_weights) {
    auto prompt = nd::linear(cond.weights, params_.at("nopam.proj.w"), params_.at("nopam.proj.b"));
    ctx.tokens = nd::concat<T>({nd::reshape(prompt, {batch, 1, d}), nd::broadcast_batch(uncond, batch)},
                               1);
    ctx.active.resize(batch * 2);
    for (std::size_t b = 0; b < batch; ++b) {
      ctx.active[2 * b] = is_dropped(b) ? 0 : 1;
      ctx.active[2 * b + 1] = is_dropped(b) ? 1 : 0;
    }
    return ctx;
  }

  // Prototype rows followed by p_u; a sample attends either to its active
  // prototypes or to p_u alone.
  ctx.tokens = nd::concat<T>({bank_, uncond}, 0);
  auto w = cond.weights.data();
  ctx.active.assign(batch * (np + 1), 0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::uint8_t* on = ctx.active.data() + b * (np + 1);
    bool any = false;
    if (!is_dropped(b)) {
      for (std::size_t j = 0; j < np; ++j) {
        on[j] = w[b * np + j] > T(0) ? 1 : 0;
        any = any || on[j];
      }
      if (!any && !cond.degenerate_to_uncond) {
        throw std::invalid_argument("conditioning: sample " + std::to_string(b) +
                                    " has no active prototype");
      }
    }
    if (!any) on[np] = 1;
  }
  if (config_.bias == BiasMode::additive) {
    ctx.bias = nd::concat<T>({cond.weights, Tensor<T>::zeros({batch, 1})}, 1);
  }
  return ctx;
}

template <typename T>
Tensor<T> Denoiser<T>::time_embedding(std::span<const std::size_t> steps) const {
  auto e = sinusoidal_embedding<T>(steps, config_.width);
  e = nd::silu(nd::linear(e, params_.at("time.fc1.w"), params_.at("time.fc1.b")));
  return nd::linear(e, params_.at("time.fc2.w"), params_.at("time.fc2.b"));
}

template <typename T>
Tensor<T> Denoiser<T>::res_block(const std::string& pre, const Tensor<T>& x,
                                 const Tensor<T>& temb) const {
  const nd::ConvGeometry same{1, 1};
  auto h = conv(pre + ".conv1", nd::silu(x), same);
  auto t = nd::linear(nd::silu(temb), params_.at(pre + ".temb.w"), params_.at(pre + ".temb.b"));
  h = nd::add(h, nd::broadcast_positions(t, h.dim(2)));
  h = conv(pre + ".conv2", nd::silu(h), same);
  auto skip = params_.contains(pre + ".skip.w") ? conv(pre + ".skip", x, {}) : x;
  return nd::add(skip, h);
}

template <typename T>
Tensor<T> Denoiser<T>::attn_block(const std::string& pre, const Tensor<T>& h,
                                  const AttentionContext<T>& ctx) const {
  auto z = nd::transpose_last2(conv(pre + ".proj_in", h, {}));
  auto a = masked_cross_attention(z, ctx, params_, pre, config_.heads);
  return nd::add(h, conv(pre + ".proj_out", nd::transpose_last2(a), {}));
}

template <typename T>
Tensor<T> Denoiser<T>::predict(const Tensor<T>& xn, std::span<const std::size_t> steps,
                               const Conditioning<T>& cond) const {
  if (xn.rank() != 2 || xn.dim(1) != config_.length) {
    throw nd::ShapeError("predict: expected [batch, " + std::to_string(config_.length) +
                         "], got " + nd::to_string(xn.shape()));
  }
  const std::size_t batch = xn.dim(0), len = config_.length, padded = config_.padded_length();
  if (steps.size() != batch) {
    throw std::invalid_argument("predict: " + std::to_string(steps.size()) + " steps for batch " +
                                std::to_string(batch));
  }
  for (auto n : steps) {
    if (n < 1) throw std::out_of_range("predict: step index must be >= 1");
  }
  const auto ctx = context(cond, batch);
  const auto temb = time_embedding(steps);

  auto h = nd::reshape(padded > len ? nd::pad_last(xn, padded - len) : xn, {batch, 1, padded});
  h = conv("in", h, {1, 1});
  std::vector<Tensor<T>> skips;
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::string pre = "down" + std::to_string(i);
    h = res_block(pre + ".res0", h, temb);
    h = res_block(pre + ".res1", h, temb);
    h = attn_block(pre + ".attn", h, ctx);
    skips.push_back(h);
    h = conv(pre + ".down", h, {2, 1});
  }
  h = res_block("mid.res0", h, temb);
  h = attn_block("mid.attn", h, ctx);
  h = res_block("mid.res1", h, temb);
  for (std::size_t r = kLevels; r-- > 0;) {
    const std::string pre = "up" + std::to_string(r);
    h = nd::conv_transpose1d(h, params_.at(pre + ".up.w"), params_.at(pre + ".up.b"), {2, 1});
    h = nd::concat<T>({h, skips[r]}, 1);
    h = res_block(pre + ".res0", h, temb);
    h = res_block(pre + ".res1", h, temb);
    h = attn_block(pre + ".attn", h, ctx);
  }
  h = conv("out", nd::silu(h), {1, 1});
  h = nd::reshape(h, {batch, padded});
  return padded > len ? nd::slice_last(h, 0, len) : h;
}

template class Denoiser<float>;
template class Denoiser<double>;
template Tensor<float> sinusoidal_embedding<float>(std::span<const std::size_t>, std::size_t);
template Tensor<double> sinusoidal_embedding<double>(std::span<const std::size_t>, std::size_t);
template Tensor<float> masked_cross_attention<float>(const Tensor<float>&,
                                                     const AttentionContext<float>&,
                                                     const ParamStore<float>&,
                                                     const std::string&, std::size_t);
template Tensor<double> masked_cross_attention<double>(const Tensor<double>&,
                                                       const AttentionContext<double>&,
                                                       const ParamStore<double>&,
                                                       const std::string&, std::size_t);

}  // namespace protodiff::protonet
