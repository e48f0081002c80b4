#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icdit/encoders.hpp"
#include "icdit/tensor.hpp"

namespace icdit {

struct FeatureStats {
  Tensor mu;     // [g]
  Tensor sigma;  // [g x g], unbiased
  std::size_t n = 0;

  std::size_t dim() const { return mu.numel(); }
};

/// Mean and unbiased covariance of row vectors. Throws ContractError for
/// fewer than two vectors.
FeatureStats feature_stats(const std::vector<std::vector<double>>& features);
/// Statistics of the appearance features that feed encode_visual.
FeatureStats feature_stats(std::span<const Tensor> images, const SurrogateEncoders& encoders);
/// Pooled statistics of the union of two disjoint sets.
FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), clamped
/// to be non-negative.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

double cosine_similarity(std::span<const double> u, std::span<const double> v);

/// 2|a & b| / (|a| + |b|); 1 when both masks are empty.
double dice(const Tensor& a, const Tensor& b);

struct EvalReport {
  double fid = 0.0;
  std::optional<double> mean_cosine;  // only when real and generated sets pair up
  double mean_dice = 0.0;
  std::size_t n_real = 0;
  std::size_t n_gen = 0;

  std::string to_json() const;
};

/// FID over appearance features; cosine between paired real/generated
/// features; Dice between segment_oracle(generated[i]) and layouts[i].
EvalReport evaluate_run(std::span<const Tensor> real, std::span<const Tensor> generated,
                        std::span<const Tensor> layouts, const SurrogateEncoders& encoders);

}  // namespace icdit
