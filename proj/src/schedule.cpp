#include "protodiff/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace protodiff::schedule {
namespace {

template <typename T>
void check_same_size(std::span<const T> a, std::span<const T> b, const char* op) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(op) + ": length mismatch " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
}

template <typename T>
std::vector<T> corrupt_impl(std::span<const T> x0, int n, std::span<const T> eps,
                            const NoiseSchedule& s) {
  check_same_size(x0, eps, "corrupt");
  const double keep = std::sqrt(s.alpha_bar(n));
  const double noise = std::sqrt(1.0 - s.alpha_bar(n));
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(keep * x0[i] + noise * eps[i]);
  }
  return out;
}

template <typename T>
std::vector<T> x0_form_impl(std::span<const T> x_n, std::span<const T> eps_hat, int n,
                            const NoiseSchedule& s) {
  check_same_size(x_n, eps_hat, "x0_form_step");
  const double abar = s.alpha_bar(n);
  const double noise = std::sqrt(1.0 - abar);
  const double inv_keep = 1.0 / std::sqrt(abar);
  std::vector<T> out(x_n.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>((x_n[i] - noise * eps_hat[i]) * inv_keep);
  }
  return out;
}

}  // namespace

Kind parse_kind(const std::string& name) {
  if (name == "linear") return Kind::linear;
  throw std::invalid_argument("unknown schedule kind '" + name + "' (expected: linear)");
}

std::string to_string(Kind kind) {
  switch (kind) {
    case Kind::linear:
      return "linear";
  }
  return "?";
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("noise schedule: need at least one step");
  NoiseSchedule s;
  double running = 1.0;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    const double b = betas[i];
    if (!(b > 0.0 && b < 1.0)) {
      throw std::invalid_argument("noise schedule: beta[" + std::to_string(i + 1) + "] = " +
                                  std::to_string(b) + " outside (0, 1)");
    }
    running *= 1.0 - b;
    s.alpha_.push_back(1.0 - b);
    s.alpha_bar_.push_back(running);
    s.sigma_.push_back(std::sqrt(b));
  }
  s.beta_ = std::move(betas);
  return s;
}

std::size_t NoiseSchedule::index(int n) const {
  if (n < 1 || n > steps()) {
    throw std::out_of_range("noise schedule: step " + std::to_string(n) + " outside [1, " +
                            std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(n - 1);
}

NoiseSchedule make_schedule(Kind kind, int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("make_schedule: steps must be >= 1");
  if (!(beta_start > 0.0 && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: betas must lie in (0, 1)");
  }
  if (beta_start > beta_end) {
    throw std::invalid_argument("make_schedule: beta_start exceeds beta_end (non-monotone)");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  switch (kind) {
    case Kind::linear:
      for (int i = 0; i < steps; ++i) {
        const double t = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_start + t * (beta_end - beta_start);
      }
      break;
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

std::vector<float> corrupt(std::span<const float> x0, int n, std::span<const float> eps,
                           const NoiseSchedule& s) {
  return corrupt_impl(x0, n, eps, s);
}

std::vector<double> corrupt(std::span<const double> x0, int n, std::span<const double> eps,
                            const NoiseSchedule& s) {
  return corrupt_impl(x0, n, eps, s);
}

std::vector<float> x0_form_step(std::span<const float> x_n, std::span<const float> eps_hat, int n,
                                const NoiseSchedule& s) {
  return x0_form_impl(x_n, eps_hat, n, s);
}

std::vector<double> x0_form_step(std::span<const double> x_n, std::span<const double> eps_hat,
                                 int n, const NoiseSchedule& s) {
  return x0_form_impl(x_n, eps_hat, n, s);
}

std::vector<float> ddpm_step(std::span<const float> x_n, std::span<const float> eps_hat, int n,
                             std::span<const float> z, const NoiseSchedule& s) {
  check_same_size(x_n, eps_hat, "ddpm_step");
  if (!z.empty()) check_same_size(x_n, z, "ddpm_step");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(n));
  const double eps_coef = (1.0 - s.alpha(n)) / std::sqrt(1.0 - s.alpha_bar(n));
  const double sigma = s.sigma(n);
  std::vector<float> out(x_n.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = inv_sqrt_alpha * (x_n[i] - eps_coef * eps_hat[i]);
    if (!z.empty()) v += sigma * z[i];
    out[i] = static_cast<float>(v);
  }
  return out;
}

ScheduleConfig ScheduleConfig::scaled(int steps) {
  if (steps < 21) {
    throw std::invalid_argument("scaled schedule needs at least 21 steps (beta_end < 1)");
  }
  ScheduleConfig c;
  c.steps = steps;
  c.beta_start = 1e-4 * 1000.0 / steps;
  c.beta_end = 0.02 * 1000.0 / steps;
  return c;
}

}  // namespace protodiff::schedule
