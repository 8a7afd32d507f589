#include "protodiff/sampler.hpp"

#include <cmath>
#include <random>

#include "protodiff/seeding.hpp"

namespace protodiff::sampler {

Variant parse_variant(const std::string& s) {
  if (s == "ddpm") return Variant::ddpm;
  if (s == "alg2") return Variant::alg2;
  throw std::invalid_argument("unknown sampler variant '" + s + "' (ddpm|alg2)");
}

std::string to_string(Variant v) { return v == Variant::ddpm ? "ddpm" : "alg2"; }

DomainPrompt build_domain_prompt(const protonet::Denoiser<float>& den,
                                 const std::vector<dataio::Window>& shots, std::string source) {
  if (shots.empty()) throw std::invalid_argument("domain prompt needs at least one shot");
  const std::size_t len = den.config().length;
  std::vector<float> flat;
  flat.reserve(shots.size() * len);
  for (std::size_t i = 0; i < shots.size(); ++i) {
    if (shots[i].size() != len) {
      throw std::invalid_argument("shot " + std::to_string(i) + " has length " +
                                  std::to_string(shots[i].size()) + ", model expects " +
                                  std::to_string(len));
    }
    flat.insert(flat.end(), shots[i].begin(), shots[i].end());
  }
  const auto w = den.assign(nd::Tensor<float>({shots.size(), len}, std::move(flat)));
  const std::size_t np = den.config().prototypes;
  DomainPrompt p;
  p.source = std::move(source);
  for (std::size_t i = 0; i < shots.size(); ++i) {
    p.masks.push_back(protonet::AssignmentMask::from_weights(w.data().subspan(i * np, np)));
    if (den.config().mode == protonet::ConditionMode::prototypes && !p.masks.back().any_active()) {
      throw std::invalid_argument("shot " + std::to_string(i) +
                                  " assigns no active prototype; cannot prompt with it");
    }
  }
  return p;
}

DomainPrompt one_hot_prompt(std::size_t prototypes, std::size_t j, float weight) {
  DomainPrompt p;
  p.masks.push_back(protonet::AssignmentMask::one_hot(prototypes, j, weight));
  p.source = "one-hot:" + std::to_string(j);
  return p;
}

std::vector<std::size_t> mask_schedule(std::size_t count, std::size_t shots) {
  if (shots == 0) throw std::invalid_argument("mask_schedule: no masks");
  std::vector<std::size_t> s(count);
  for (std::size_t t = 0; t < count; ++t) s[t] = t % shots;
  return s;
}

std::vector<std::size_t> mask_usage(std::size_t count, std::size_t shots) {
  std::vector<std::size_t> u(shots, 0);
  for (auto k : mask_schedule(count, shots)) ++u[k];
  return u;
}

namespace {

std::vector<dataio::Window> run_chains(const protonet::Denoiser<float>& den,
                                       const schedule::NoiseSchedule& sched,
                                       const DomainPrompt* prompt, const GenerateOptions& opts) {
  if (opts.count == 0) throw std::invalid_argument("generate: count must be >= 1");
  if (opts.chunk == 0) throw std::invalid_argument("generate: chunk must be >= 1");
  const std::size_t len = den.config().length, np = den.config().prototypes;
  const int steps = sched.steps();
  if (prompt) {
    if (prompt->masks.empty()) throw std::invalid_argument("generate: empty prompt");
    for (std::size_t k = 0; k < prompt->masks.size(); ++k) {
      if (prompt->masks[k].weights.size() != np) {
        throw std::invalid_argument("generate: mask " + std::to_string(k) + " has " +
                                    std::to_string(prompt->masks[k].weights.size()) +
                                    " weights, model has " + std::to_string(np) + " prototypes");
      }
    }
  }
  const auto which = prompt ? mask_schedule(opts.count, prompt->shots()) : std::vector<std::size_t>{};

  std::vector<dataio::Window> out(opts.count);
  for (std::size_t start = 0; start < opts.count; start += opts.chunk) {
    const std::size_t b = std::min(opts.chunk, opts.count - start);
    std::vector<std::mt19937_64> rngs;
    rngs.reserve(b);
    for (std::size_t i = 0; i < b; ++i) rngs.push_back(make_rng(opts.seed, start + i));

    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<float> x(b * len);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t t = 0; t < len; ++t) x[i * len + t] = static_cast<float>(gauss(rngs[i]));
    }

    protonet::Conditioning<float> cond;
    if (prompt) {
      std::vector<float> w(b * np);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& m = prompt->masks[which[start + i]];
        std::copy(m.weights.begin(), m.weights.end(), w.begin() + static_cast<std::ptrdiff_t>(i * np));
      }
      cond.weights = nd::Tensor<float>({b, np}, std::move(w));
    } else {
      cond = protonet::Denoiser<float>::unconditional(b);
    }

    std::vector<float> z(len);
    for (int n = steps; n >= 1; --n) {
      const std::vector<std::size_t> nvec(b, static_cast<std::size_t>(n));
      nd::Tensor<float> eps_hat;
      try {
        eps_hat = den.predict(nd::Tensor<float>({b, len}, x), nvec, cond);
      } catch (const nd::NonFiniteError& e) {
        throw SamplingError("non-finite state at step " + std::to_string(n) + ": " + e.what());
      }
      const auto e = eps_hat.data();
      for (std::size_t i = 0; i < b; ++i) {
        const std::span<const float> xi(x.data() + i * len, len), ei(e.data() + i * len, len);
        std::vector<float> next;
        if (opts.variant == Variant::ddpm) {
          if (n > 1) {
            for (auto& v : z) v = static_cast<float>(gauss(rngs[i]));
            next = schedule::ddpm_step(xi, ei, n, z, sched);
          } else {
            next = schedule::ddpm_step(xi, ei, n, {}, sched);
          }
        } else {
          next = schedule::x0_form_step(xi, ei, n, sched);
        }
        for (std::size_t t = 0; t < len; ++t) {
          if (!std::isfinite(next[t])) {
            throw SamplingError("non-finite state at step " + std::to_string(n) + " in sample " +
                                std::to_string(start + i));
          }
          x[i * len + t] = next[t];
        }
      }
    }
    for (std::size_t i = 0; i < b; ++i) {
      out[start + i].assign(x.begin() + static_cast<std::ptrdiff_t>(i * len),
                            x.begin() + static_cast<std::ptrdiff_t>((i + 1) * len));
    }
  }
  return out;
}

}  // namespace

std::vector<dataio::Window> generate(const protonet::Denoiser<float>& den,
                                     const schedule::NoiseSchedule& sched,
                                     const DomainPrompt& prompt, const GenerateOptions& opts) {
  return run_chains(den, sched, &prompt, opts);
}

std::vector<dataio::Window> generate_unconditional(const protonet::Denoiser<float>& den,
                                                   const schedule::NoiseSchedule& sched,
                                                   const GenerateOptions& opts) {
  return run_chains(den, sched, nullptr, opts);
}

}  // namespace protodiff::sampler
