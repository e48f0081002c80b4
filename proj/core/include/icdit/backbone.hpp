#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icdit/encoders.hpp"
#include "icdit/tensor.hpp"

namespace icdit {

struct ModelConfig {
  std::size_t depth = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t patch_size = 2;
  std::size_t latent_channels = 4;
  std::size_t latent_h = 8;
  std::size_t latent_w = 8;
  /// Number of diffusion steps; timestep_embed rejects t >= steps.
  std::size_t steps = 200;

  void validate() const;
  std::size_t grid_h() const { return latent_h / patch_size; }
  std::size_t grid_w() const { return latent_w / patch_size; }
  std::size_t image_tokens() const { return grid_h() * grid_w(); }
  std::size_t patch_width() const { return latent_channels * patch_size * patch_size; }
  Shape latent_shape() const { return {latent_channels, latent_h, latent_w}; }
};

enum class ConditionKind { caption, layout, embedding };

/// Condition streams replaced by the learned null token.
struct DropSet {
  bool caption = false;
  bool layout = false;
  bool embedding = false;

  bool contains(ConditionKind kind) const;
  bool empty() const { return !caption && !layout && !embedding; }
  /// "caption+layout", or "none".
  std::string label() const;
  /// The 8 subsets in a fixed order (empty set first, full set last).
  static std::vector<DropSet> all();
  /// Accepts "caption", "layout", "embedding"; throws ConfigError otherwise.
  static DropSet from_names(std::span<const std::string> names);
  bool operator==(const DropSet&) const = default;
};

/// Tokens of several samples stacked along rows. offsets has batch()+1
/// entries; rows [offsets[s], offsets[s+1]) belong to sample s.
struct StreamBatch {
  Tensor tokens;
  std::vector<std::size_t> offsets;

  std::size_t batch() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t count(std::size_t sample) const { return offsets[sample + 1] - offsets[sample]; }
};

/// Stacks per-sample token streams; adds `positions` to every sample when
/// given (must match each stream's token count).
StreamBatch stack_streams(std::span<const TokenStream> streams, const Tensor* positions = nullptr);

/// Encoded conditions of one sample.
struct SampleConditions {
  TokenStream text;
  TokenStream layout;
  TokenStream embedding;
};

struct ConditionBatch {
  StreamBatch text;
  StreamBatch layout;
  StreamBatch embedding;

  std::size_t batch() const { return text.batch(); }
};

/// Stacks conditions and adds the 2-D grid signal to layout tokens.
ConditionBatch make_condition_batch(std::span<const SampleConditions> samples, const ModelConfig& config);

struct AttentionParams {
  // side a is the image stream, side b the condition stream; all [d x d]
  Tensor q_a, k_a, v_a, o_a;
  Tensor q_b, k_b, v_b, o_b;
  std::size_t n_heads = 1;
};

struct NormParams {
  Tensor gain;
  Tensor bias;
};

struct MlpParams {
  Tensor w1, b1;  // d -> 4d
  Tensor w2, b2;  // 4d -> d
};

/// Sublayer order inside a block: text, layout, embedding attention, MLP.
struct BlockParams {
  std::array<AttentionParams, 3> attn;
  std::array<NormParams, 3> cond_attn_norm;
  std::array<NormParams, 3> cond_mlp_norm;
  std::array<MlpParams, 4> mlp;  // image, text, layout, embedding
  /// Timestep conditioning -> (shift, scale, gate) for each of the four
  /// image-stream sublayers, [d x 12d] and [12d]. Zero at init.
  Tensor ada_w, ada_b;
};

struct ModelParams {
  ModelConfig config;
  Tensor t_w1, t_b1, t_w2, t_b2;
  std::vector<BlockParams> blocks;
  Tensor final_ada_w, final_ada_b;  // -> (shift, scale) of the final norm
  Tensor head_w, head_b;            // d -> c_lat * p * p
  Tensor null_caption, null_layout, null_embedding;  // [1 x d]

  /// Every trainable tensor with a stable dotted name.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> trainable() const;
  std::size_t parameter_count() const;
};

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);
/// Overwrites zero-initialized tensors (gates, modulation, head) with small
/// random values, for gradient checks where exact zeros would mask paths.
void randomize_zero_init(ModelParams& params, std::uint64_t seed, double stddev = 0.1);
/// Deep copy with fresh storage; requires_grad is preserved.
ModelParams clone_params(const ModelParams& params);

/// Sinusoidal timestep features before the MLP. Throws ContractError for
/// t >= steps.
Tensor timestep_features(std::size_t t, std::size_t dim, std::size_t steps);
/// Full timestep embedding for a batch of steps, [B x d].
Tensor timestep_embed(const ModelParams& params, std::span<const std::size_t> steps);

/// Joint attention over the per-sample concatenation [a_s; b_s]; returns
/// the updated (a, b) streams.
std::pair<StreamBatch, StreamBatch> mm_attention(const StreamBatch& a, const StreamBatch& b,
                                                 const AttentionParams& params);
std::pair<TokenStream, TokenStream> mm_attention(const TokenStream& a, const TokenStream& b,
                                                 const AttentionParams& params);

struct BlockStreams {
  StreamBatch z;
  StreamBatch text;
  StreamBatch layout;
  StreamBatch embedding;
};

/// One IC-DiT block. `conditioning` is silu(timestep_embed), [B x d].
BlockStreams block_forward(const BlockStreams& in, const Tensor& conditioning, const BlockParams& block);

/// Replaces one condition stream by the learned null token (one token per
/// sample).
ConditionBatch drop_condition(ConditionKind kind, ConditionBatch batch, const ModelParams& params);
ConditionBatch apply_drops(ConditionBatch batch, const DropSet& drop, const ModelParams& params);

/// Noise prediction in patch-vector layout: [B * n_tokens x c*p*p].
Tensor predict_epsilon_vectors(const ModelParams& params, const SurrogateEncoders& encoders,
                               std::span<const Tensor> z_t, std::span<const std::size_t> steps,
                               const ConditionBatch& conditions);

/// Noise prediction with latent-shaped outputs (one per sample).
std::vector<Tensor> predict_epsilon(const ModelParams& params, const SurrogateEncoders& encoders,
                                    std::span<const Tensor> z_t, std::span<const std::size_t> steps,
                                    const ConditionBatch& conditions);

}  // namespace icdit
