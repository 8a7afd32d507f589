#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protodiff/protonet/params.hpp"
#include "protodiff/schedule.hpp"
#include "protodiff/trainer.hpp"

namespace protodiff::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a command can be configured with. Loaded from an INI file
/// with sections [run] [model] [schedule] [train] [data] [sample] [eval];
/// command-line flags override file values.
struct RunConfig {
  std::uint64_t seed = 0;
  protonet::ModelConfig model;
  schedule::ScheduleConfig schedule = schedule::ScheduleConfig::scaled(100);

  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 3e-4;
  std::size_t warmup = 100;
  double p_drop = 0.1;
  std::size_t checkpoint_every = 0;

  std::string norm = "minmax";
  std::size_t synth_count = 200;
  bool synth_square = false;

  std::size_t shots = 10;
  std::size_t count = 100;
  std::size_t chunk = 64;
  std::string variant = "ddpm";

  std::size_t bins = 50;
  std::optional<double> bandwidth;

  trainer::TrainConfig train_config() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);

/// Parses INI text; unknown sections or keys are errors.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// Sets the diffusion step count, keeping the betas scaled to it unless
/// `keep_betas` is set.
void set_diffusion_steps(RunConfig& c, int steps, bool keep_betas);

struct SynthArgs {
  std::filesystem::path out;
};
struct TrainArgs {
  std::filesystem::path data;
  std::filesystem::path out;
};
struct SampleArgs {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> shots_csv;
  std::optional<std::string> domain;
  bool unconditional = false;
  bool denormalize = false;
  std::filesystem::path out;
};
struct EvalArgs {
  std::filesystem::path real;
  std::filesystem::path synth;
  std::optional<std::string> domain;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> out;
};
struct InspectArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out;
};

void cmd_make_synth(const RunConfig& c, const SynthArgs& a);
void cmd_train(const RunConfig& c, const TrainArgs& a);
void cmd_sample(const RunConfig& c, const SampleArgs& a);
void cmd_eval(const RunConfig& c, const EvalArgs& a);
void cmd_inspect(const RunConfig& c, const InspectArgs& a);

/// Entry point of the `protodiff` executable. Returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace protodiff::cli
