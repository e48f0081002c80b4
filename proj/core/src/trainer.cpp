#include "icdit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "icdit/errors.hpp"
#include "icdit/optim.hpp"
#include "icdit/rng.hpp"

namespace icdit {

namespace {

constexpr std::uint64_t kTrainStream = 0x747261696e;
constexpr std::uint64_t kEvalStream = 0x6576616c;
constexpr std::uint64_t kSampleStream = 0x73616d706c65;

ConditionBatch batch_conditions(std::span<const PreparedSample> data, std::span<const std::size_t> idx,
                                const ModelParams& params, const DropSet& drop) {
  std::vector<SampleConditions> conds;
  conds.reserve(idx.size());
  for (auto i : idx) conds.push_back(data[i].conditions);
  return apply_drops(make_condition_batch(conds, params.config), drop, params);
}

}  // namespace

PreparedSample prepare_sample(const SynthSample& sample, const SurrogateEncoders& encoders,
                              const Tensor* embedding_image) {
  PreparedSample p;
  p.latent = encoders.encode_image(sample.image);
  p.conditions.text = encoders.encode_text(sample.caption_ids);
  p.conditions.layout = encoders.encode_layout(sample.mask);
  p.conditions.embedding = encoders.encode_visual(embedding_image ? *embedding_image : sample.image);
  return p;
}

std::vector<PreparedSample> prepare_samples(std::span<const SynthSample> samples, const SurrogateEncoders& encoders) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(prepare_sample(s, encoders));
  return out;
}

TrainResult train_model(const ModelConfig& config, const NoiseSchedule& schedule, const SurrogateEncoders& encoders,
                        std::span<const PreparedSample> data, const TrainOptions& options,
                        const CheckpointFn& on_checkpoint) {
  return train_model(init_model(config, options.seed), schedule, encoders, data, options, on_checkpoint);
}

TrainResult train_model(ModelParams params, const NoiseSchedule& schedule, const SurrogateEncoders& encoders,
                        std::span<const PreparedSample> data, const TrainOptions& options,
                        const CheckpointFn& on_checkpoint) {
  if (data.empty()) throw ContractError("train: no training data");
  if (options.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (schedule.steps != params.config.steps) throw ConfigError("train: schedule length differs from model");
  TrainResult result;
  result.losses.reserve(options.steps);
  std::vector<Tensor> trainable = params.trainable();
  Adam adam(trainable, AdamOptions{options.lr});
  const Rng root(options.seed, kTrainStream);
  auto& tape = Tape::current();

  for (std::size_t step = 0; step < options.steps; ++step) {
    if (options.lr_final != options.lr && options.steps > 1) {
      const double progress = static_cast<double>(step) / static_cast<double>(options.steps - 1);
      adam.set_lr(options.lr_final +
                  0.5 * (options.lr - options.lr_final) * (1.0 + std::cos(std::numbers::pi * progress)));
    }
    Rng rng = root.split(step);
    std::vector<std::size_t> idx(options.batch_size);
    for (auto& i : idx) i = rng.below(data.size());
    DiffusionBatch batch;
    for (auto i : idx) {
      batch.z0.push_back(data[i].latent);
      batch.t.push_back(rng.below(schedule.steps));
      batch.eps.push_back(Tensor::randn(data[i].latent.shape(), rng));
    }
    batch.conditions = batch_conditions(data, idx, params, options.drop);

    tape.reset();
    const Tensor loss = denoise_loss(batch, params, encoders, schedule);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      tape.reset();
      throw NumericError("train: non-finite loss at step " + std::to_string(step));
    }
    backward(loss);
    tape.reset();
    clip_grad_norm(trainable, options.clip_norm);
    adam.step();
    adam.zero_grad();
    result.losses.push_back(value);
    if (on_checkpoint && options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0)
      on_checkpoint(step + 1, params);
  }
  result.params = std::move(params);
  return result;
}

double evaluation_loss(const ModelParams& params, const SurrogateEncoders& encoders, const NoiseSchedule& schedule,
                       std::span<const PreparedSample> data, std::size_t draws, std::uint64_t seed,
                       const DropSet& drop) {
  if (data.empty() || draws == 0) throw ContractError("evaluation_loss: nothing to evaluate");
  NoGradGuard no_grad;
  const Rng root(seed, kEvalStream);
  double total = 0.0;
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t d = 0; d < draws; ++d) {
    Rng rng = root.split(d);
    DiffusionBatch batch;
    for (const auto& s : data) {
      batch.z0.push_back(s.latent);
      batch.t.push_back(rng.below(schedule.steps));
      batch.eps.push_back(Tensor::randn(s.latent.shape(), rng));
    }
    batch.conditions = batch_conditions(data, idx, params, drop);
    total += denoise_loss(batch, params, encoders, schedule).item();
  }
  return total / static_cast<double>(draws);
}

std::vector<Tensor> generate_latents(const ModelParams& params, const SurrogateEncoders& encoders,
                                     const NoiseSchedule& schedule, std::span<const SampleConditions> conditions,
                                     const DropSet& drop, std::uint64_t seed, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("generate: batch_size must be positive");
  const Rng root(seed, kSampleStream);
  std::vector<Tensor> out;
  out.reserve(conditions.size());
  for (std::size_t begin = 0; begin < conditions.size(); begin += batch_size) {
    const std::size_t end = std::min(conditions.size(), begin + batch_size);
    std::vector<Rng> rngs;
    for (std::size_t i = begin; i < end; ++i) rngs.push_back(root.split(i));
    const ConditionBatch cb = apply_drops(
        make_condition_batch(conditions.subspan(begin, end - begin), params.config), drop, params);
    for (auto& z : sample(params, encoders, cb, schedule, rngs)) out.push_back(std::move(z));
  }
  return out;
}

Tensor decode_image(const SurrogateEncoders& encoders, const Tensor& latent) {
  Tensor img = encoders.decode_latent(latent);
  for (auto& v : img.mutable_data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace icdit
