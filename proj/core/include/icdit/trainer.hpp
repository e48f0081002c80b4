#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "icdit/backbone.hpp"
#include "icdit/diffusion.hpp"
#include "icdit/encoders.hpp"
#include "icdit/synthdata.hpp"

namespace icdit {

/// Clean latent plus encoded conditions of one training or evaluation item.
struct PreparedSample {
  Tensor latent;
  SampleConditions conditions;
};

/// Encodes caption, layout mask and appearance. The appearance embedding is
/// taken from `embedding_image` when given, else from the sample's image.
PreparedSample prepare_sample(const SynthSample& sample, const SurrogateEncoders& encoders,
                              const Tensor* embedding_image = nullptr);
std::vector<PreparedSample> prepare_samples(std::span<const SynthSample> samples, const SurrogateEncoders& encoders);

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double lr = 1e-2;
  double lr_final = 1e-5;  // cosine decay target
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  DropSet drop;
  std::size_t checkpoint_every = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> losses;  // one per step
};

/// Called after every checkpoint_every steps with (steps done, params).
using CheckpointFn = std::function<void(std::size_t, const ModelParams&)>;

/// Adam on denoise_loss with gradient clipping. Batch indices, timesteps and
/// noise for step s come from their own seeded stream, so runs are
/// reproducible. Throws NumericError naming the step on a non-finite loss.
TrainResult train_model(const ModelConfig& config, const NoiseSchedule& schedule, const SurrogateEncoders& encoders,
                        std::span<const PreparedSample> data, const TrainOptions& options,
                        const CheckpointFn& on_checkpoint = {});

/// Continues training already initialized parameters.
TrainResult train_model(ModelParams params, const NoiseSchedule& schedule, const SurrogateEncoders& encoders,
                        std::span<const PreparedSample> data, const TrainOptions& options,
                        const CheckpointFn& on_checkpoint = {});

/// denoise_loss averaged over `draws` seeded (t, eps) draws per sample.
double evaluation_loss(const ModelParams& params, const SurrogateEncoders& encoders, const NoiseSchedule& schedule,
                       std::span<const PreparedSample> data, std::size_t draws, std::uint64_t seed,
                       const DropSet& drop = {});

/// Reverse-samples one latent per condition set. Item i uses noise stream i
/// of `seed`, independent of batch_size.
std::vector<Tensor> generate_latents(const ModelParams& params, const SurrogateEncoders& encoders,
                                     const NoiseSchedule& schedule, std::span<const SampleConditions> conditions,
                                     const DropSet& drop, std::uint64_t seed, std::size_t batch_size = 16);

/// decode_latent clipped to [0, 1].
Tensor decode_image(const SurrogateEncoders& encoders, const Tensor& latent);

}  // namespace icdit
