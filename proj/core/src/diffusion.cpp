#include "icdit/diffusion.hpp"

#include <cmath>

#include "icdit/errors.hpp"
#include "icdit/ops.hpp"

namespace icdit {

double NoiseSchedule::snr(std::size_t t) const { return alpha_bar.at(t) / (1.0 - alpha_bar.at(t)); }

double NoiseSchedule::posterior_variance(std::size_t t) const {
  if (t == 0) return 0.0;
  return beta.at(t) * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
}

NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 2) throw ConfigError("diffusion: T must be at least 2");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw ConfigError("diffusion: need 0 < beta_start < beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double running = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double frac = static_cast<double>(t) / static_cast<double>(steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

Tensor q_sample(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (z0.shape() != eps.shape())
    throw ShapeError("q_sample: noise " + shape_str(eps.shape()) + " does not match latent " + shape_str(z0.shape()));
  if (t >= schedule.steps) throw ContractError("q_sample: timestep out of range");
  const double a = std::sqrt(schedule.alpha_bar[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  std::vector<double> out(z0.numel());
  const auto zs = z0.data(), es = eps.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * zs[i] + b * es[i];
  return Tensor(z0.shape(), std::move(out));
}

Tensor denoise_loss(const DiffusionBatch& batch, const ModelParams& model, const SurrogateEncoders& encoders,
                    const NoiseSchedule& schedule) {
  if (schedule.steps != model.config.steps) throw ConfigError("denoise_loss: schedule length differs from model");
  const std::size_t n = batch.z0.size();
  if (batch.eps.size() != n || batch.t.size() != n) throw ShapeError("denoise_loss: batch fields disagree in size");
  std::vector<Tensor> noisy;
  noisy.reserve(n);
  std::vector<double> target;
  const std::size_t p = model.config.patch_size;
  for (std::size_t s = 0; s < n; ++s) {
    noisy.push_back(q_sample(batch.z0[s], batch.t[s], batch.eps[s], schedule));
    const Tensor ev = patch_vectors(batch.eps[s], p);
    target.insert(target.end(), ev.data().begin(), ev.data().end());
  }
  const Tensor pred = predict_epsilon_vectors(model, encoders, noisy, batch.t, batch.conditions);
  return mse(pred, Tensor(pred.shape(), std::move(target)));
}

Tensor ddpm_step(const Tensor& z_t, std::size_t t, const Tensor& eps_hat, const NoiseSchedule& schedule, Rng& rng) {
  if (t >= schedule.steps) throw ContractError("ddpm_step: timestep out of range");
  if (z_t.shape() != eps_hat.shape()) throw ShapeError("ddpm_step: prediction shape differs from z_t");
  const double coef = schedule.beta[t] / std::sqrt(1.0 - schedule.alpha_bar[t]);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha[t]);
  const double sigma = std::sqrt(schedule.posterior_variance(t));
  std::vector<double> out(z_t.numel());
  const auto zs = z_t.data(), es = eps_hat.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (zs[i] - coef * es[i]) * inv_sqrt_alpha;
    if (t > 0) out[i] += sigma * rng.normal();
  }
  return Tensor(z_t.shape(), std::move(out));
}

std::vector<Tensor> sample(const ModelParams& model, const SurrogateEncoders& encoders,
                           const ConditionBatch& conditions, const NoiseSchedule& schedule, std::span<Rng> rngs) {
  if (schedule.steps != model.config.steps) throw ConfigError("sample: schedule length differs from model");
  const std::size_t n = rngs.size();
  if (n == 0 || conditions.batch() != n) throw ConfigError("sample: one rng per conditioned sample required");
  NoGradGuard no_grad;
  std::vector<Tensor> z;
  for (auto& rng : rngs) z.push_back(Tensor::randn(model.config.latent_shape(), rng));
  std::vector<std::size_t> steps(n);
  for (std::size_t t = schedule.steps; t-- > 0;) {
    std::fill(steps.begin(), steps.end(), t);
    const auto eps = predict_epsilon(model, encoders, z, steps, conditions);
    for (std::size_t s = 0; s < n; ++s) z[s] = ddpm_step(z[s], t, eps[s], schedule, rngs[s]);
  }
  for (const auto& zs : z)
    if (!all_finite(zs.data())) throw NumericError("sample: non-finite latent");
  return z;
}

}  // namespace icdit
