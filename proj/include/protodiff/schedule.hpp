#pragma once

#include <span>
#include <string>
#include <vector>

namespace protodiff::schedule {

enum class Kind { linear };

Kind parse_kind(const std::string& name);
std::string to_string(Kind kind);

/// Variance schedule of the forward noising chain. Arrays are stored 0-based;
/// the accessors take the 1-based step index n in [1, steps()].
class NoiseSchedule {
 public:
  /// Builds from explicit betas; each must lie in (0, 1).
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int n) const { return beta_[index(n)]; }
  double alpha(int n) const { return alpha_[index(n)]; }
  double alpha_bar(int n) const { return alpha_bar_[index(n)]; }
  double sigma(int n) const { return sigma_[index(n)]; }

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  std::size_t index(int n) const;

  std::vector<double> beta_, alpha_, alpha_bar_, sigma_;
};

/// Linear betas from beta_start to beta_end over `steps` steps.
NoiseSchedule make_schedule(Kind kind, int steps, double beta_start, double beta_end);

/// Serializable schedule parameters (config files, checkpoints).
struct ScheduleConfig {
  Kind kind = Kind::linear;
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return make_schedule(kind, steps, beta_start, beta_end); }

  /// Linear 1e-4 -> 0.02 rescaled by 1000 / steps, so short chains still end
  /// near pure noise. steps == 1000 gives the unscaled range.
  static ScheduleConfig scaled(int steps);
};

/// x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps
std::vector<float> corrupt(std::span<const float> x0, int n, std::span<const float> eps,
                           const NoiseSchedule& s);
std::vector<double> corrupt(std::span<const double> x0, int n, std::span<const double> eps,
                            const NoiseSchedule& s);

/// Ancestral step x_{n-1} = (x_n - beta_n / sqrt(1 - abar_n) eps_hat) / sqrt(alpha_n) + sigma_n z.
/// An empty `z` means no noise term.
std::vector<float> ddpm_step(std::span<const float> x_n, std::span<const float> eps_hat, int n,
                             std::span<const float> z, const NoiseSchedule& s);

/// Clean-signal estimate (x_n - sqrt(1 - abar_n) eps_hat) / sqrt(abar_n), used
/// directly as the next state by the "alg2" sampler variant.
std::vector<float> x0_form_step(std::span<const float> x_n, std::span<const float> eps_hat, int n,
                                const NoiseSchedule& s);
std::vector<double> x0_form_step(std::span<const double> x_n, std::span<const double> eps_hat,
                                 int n, const NoiseSchedule& s);

}  // namespace protodiff::schedule
