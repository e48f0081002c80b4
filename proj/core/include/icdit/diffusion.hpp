#pragma once

#include <span>
#include <vector>

#include "icdit/backbone.hpp"
#include "icdit/encoders.hpp"
#include "icdit/rng.hpp"
#include "icdit/tensor.hpp"

namespace icdit {

/// Linear-beta DDPM schedule.
struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// alpha_bar / (1 - alpha_bar).
  double snr(std::size_t t) const;
  /// beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); zero at t = 0.
  double posterior_variance(std::size_t t) const;
};

/// Throws ConfigError unless 0 < beta_start < beta_end < 1 and steps >= 2.
NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end);

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
Tensor q_sample(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule);

struct DiffusionBatch {
  std::vector<Tensor> z0;
  std::vector<Tensor> eps;
  std::vector<std::size_t> t;
  ConditionBatch conditions;
};

/// mean ||eps - eps_theta(z_t, t, p, l, e)||^2 over batch and components.
Tensor denoise_loss(const DiffusionBatch& batch, const ModelParams& model, const SurrogateEncoders& encoders,
                    const NoiseSchedule& schedule);

/// Ancestral update z_t -> z_{t-1}. No noise is added at t = 0.
Tensor ddpm_step(const Tensor& z_t, std::size_t t, const Tensor& eps_hat, const NoiseSchedule& schedule, Rng& rng);

/// Full reverse chain from z_T ~ N(0, I). Sample s draws all of its noise
/// from rngs[s], so results do not depend on how samples are batched.
std::vector<Tensor> sample(const ModelParams& model, const SurrogateEncoders& encoders,
                           const ConditionBatch& conditions, const NoiseSchedule& schedule, std::span<Rng> rngs);

}  // namespace icdit
