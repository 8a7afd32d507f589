#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "protodiff/dataio.hpp"
#include "protodiff/nd/tensor.hpp"
#include "protodiff/protonet/checkpoint.hpp"
#include "protodiff/protonet/denoiser.hpp"
#include "protodiff/schedule.hpp"

namespace protodiff::trainer {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 1e-4;
  std::size_t warmup = 100;
  double p_drop = 0.1;
  std::uint64_t seed = 0;
  /// Write an intermediate checkpoint every this many steps (0: final only).
  std::size_t checkpoint_every = 0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  schedule::ScheduleConfig schedule = schedule::ScheduleConfig::scaled(100);
  protonet::ModelConfig model;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);

/// Raised when a step produces a non-finite loss or activation.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-window sampling weight w_i = 1 / (N_i |D|), listed domain by domain.
std::vector<double> sampling_weights(const dataio::DomainCorpus& corpus);

struct Draw {
  std::size_t domain;
  std::size_t index;
};

/// Domain uniformly at random, then a window uniformly within it.
std::vector<Draw> balanced_sample(const dataio::DomainCorpus& corpus, std::size_t batch,
                                  std::mt19937_64& rng);

/// One minibatch with its Algorithm-1 randomness already drawn.
struct PreparedBatch {
  std::size_t batch = 0, length = 0;
  std::vector<float> x0, eps, xn;      // each batch * length
  std::vector<std::size_t> steps;      // n per element
  std::vector<std::uint8_t> dropped;   // condition dropped per element
};

PreparedBatch prepare_batch(const dataio::DomainCorpus& corpus, std::span<const Draw> draws,
                            const schedule::NoiseSchedule& sched, double p_drop,
                            std::mt19937_64& rng);

/// mean((eps_hat - eps)^2) over all elements.
template <typename T>
nd::Tensor<T> mse(const nd::Tensor<T>& eps_hat, const nd::Tensor<T>& eps);

/// Assign masks from x0, predict eps at x_n and return the loss tensor
/// (recorded on the active tape, if any).
template <typename T>
nd::Tensor<T> conditional_loss(const protonet::Denoiser<T>& den, const PreparedBatch& b);

/// Adam with bias correction; state keyed by parameter name.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(protonet::DenoiserParams& params, double lr);
  std::size_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

/// Linear 0 -> lr over `warmup` steps (1-based step), constant afterwards.
double warmup_lr(std::size_t step, double lr, std::size_t warmup);

class Trainer {
 public:
  /// corpus must already be normalized; norms are stored in checkpoints.
  Trainer(dataio::DomainCorpus corpus, TrainConfig config, dataio::NormTable norms = {});

  /// One optimizer step; returns the loss.
  double step();
  std::size_t steps_done() const { return done_; }

  protonet::Checkpoint checkpoint() const;
  const protonet::PrototypeBank& bank() const { return bank_; }
  const protonet::DenoiserParams& params() const { return params_; }
  const schedule::NoiseSchedule& noise_schedule() const { return sched_; }

 private:
  dataio::DomainCorpus corpus_;
  TrainConfig config_;
  dataio::NormTable norms_;
  schedule::NoiseSchedule sched_;
  protonet::PrototypeBank bank_;
  protonet::DenoiserParams params_;
  protonet::Denoiser<float> den_;
  Adam adam_;
  std::mt19937_64 rng_;
  std::size_t done_ = 0;
};

struct TrainResult {
  protonet::Checkpoint checkpoint;
  std::vector<double> losses;
};

using Progress = std::function<void(std::size_t step, double loss)>;

/// Full loop. With an output directory, writes loss.csv (step,loss),
/// periodic ckpt_<step>.bin and final.bin.
TrainResult train(const dataio::DomainCorpus& corpus, const TrainConfig& config,
                  const dataio::NormTable& norms = {},
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const Progress& progress = {});

}  // namespace protodiff::trainer
