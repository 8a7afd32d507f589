#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "protodiff/dataio.hpp"
#include "protodiff/protonet/bank.hpp"
#include "protodiff/protonet/denoiser.hpp"
#include "protodiff/schedule.hpp"

namespace protodiff::sampler {

/// ddpm: ancestral posterior step with sigma_n = sqrt(beta_n), no noise at n = 1.
/// alg2: the clean-signal estimate is used directly as the next state.
enum class Variant { ddpm, alg2 };

Variant parse_variant(const std::string& s);
std::string to_string(Variant v);

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// K assignment masks extracted from few-shot windows of one domain.
struct DomainPrompt {
  std::vector<protonet::AssignmentMask> masks;
  std::string source;

  std::size_t shots() const { return masks.size(); }
};

/// masks[i] = assign(shots[i]). In prototype mode a shot with no active
/// prototype is an error naming its index.
DomainPrompt build_domain_prompt(const protonet::Denoiser<float>& den,
                                 const std::vector<dataio::Window>& shots, std::string source);

/// Prompt that activates exactly prototype j.
DomainPrompt one_hot_prompt(std::size_t prototypes, std::size_t j, float weight = 1.0f);

/// Mask index used by each of `count` samples (round robin).
std::vector<std::size_t> mask_schedule(std::size_t count, std::size_t shots);
/// How often each of `shots` masks is used for `count` samples.
std::vector<std::size_t> mask_usage(std::size_t count, std::size_t shots);

struct GenerateOptions {
  std::size_t count = 1;
  Variant variant = Variant::ddpm;
  std::uint64_t seed = 0;
  /// Chains advanced together per network call. Part of the determinism
  /// contract: results are reproducible for a fixed chunk size.
  std::size_t chunk = 64;
};

/// Runs `count` reverse chains from x_N ~ N(0, I); chain t is conditioned on
/// prompt.masks[t mod K] and draws all its noise from stream (seed, t).
std::vector<dataio::Window> generate(const protonet::Denoiser<float>& den,
                                     const schedule::NoiseSchedule& sched,
                                     const DomainPrompt& prompt, const GenerateOptions& opts);

/// Same chain conditioned on the unconditional token p_u.
std::vector<dataio::Window> generate_unconditional(const protonet::Denoiser<float>& den,
                                                   const schedule::NoiseSchedule& sched,
                                                   const GenerateOptions& opts);

}  // namespace protodiff::sampler
