#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "icdit/synthdata.hpp"
#include "icdit/tensor.hpp"

namespace icdit {

/// Width of every step feature vector:
/// [count/9, mean intensity, roughness, sparse, medium, dense, fine, coarse].
inline constexpr std::size_t kStepFeatureDim = 8;

struct ReasoningStep {
  std::string statement;
  std::vector<double> features;
};

struct ReasoningChain {
  std::string patch_id;
  std::vector<ReasoningStep> steps;

  std::size_t size() const { return steps.size(); }
};

struct LabelDistribution {
  std::vector<double> probs;
  std::size_t label = 0;
};

struct AggregatorParams {
  Tensor projection;  // [f x C]
  Tensor bias;        // [C]
  std::uint64_t seed = 0;

  /// Cue weights on the density one-hot slots plus small seeded noise.
  static AggregatorParams seeded(std::uint64_t seed);
};

struct PatchRecord {
  std::string patch_id;
  ReasoningChain chain;
  LabelDistribution dist;
  std::string description;
  double judge_score = 0.0;
  std::optional<double> human_score;
};

/// Direct measurements of a patch, shared by the mock agents and the judge.
struct PatchMeasurements {
  std::size_t count = 0;
  double mean_intensity = 0.0;
  /// Mean absolute step of the median-filtered gray image between
  /// neighbouring background pixels.
  double roughness = 0.0;
  Texture texture = Texture::fine;
};

inline constexpr double kRoughnessThreshold = 0.018;
inline constexpr double kIntensityTolerance = 0.01;
inline constexpr double kRoughnessTolerance = 0.005;

PatchMeasurements measure_patch(const Tensor& patch);

/// "no nuclei", "1 nucleus", "7 nuclei", "over 9 nuclei".
std::string count_phrase(std::size_t count);
/// e.g. "dense cluster of 8 nuclei on coarse stroma".
std::string describe_template(std::size_t label, Texture texture, std::size_t count);

/// Softmax of logits with the lowest-index argmax.
LabelDistribution label_distribution(std::span<const double> logits);

/// Mean of the step features, projected and soft-maxed.
LabelDistribution aggregate_reasoning(const ReasoningChain& chain, const AggregatorParams& params);

/// Rubric: 0.6 * (grounded steps / M) + 0.2 * label consistency + 0.2 *
/// count coverage, clamped to [0, 1].
double judge_rubric(const Tensor& patch, const ReasoningChain& chain, std::size_t label,
                    std::string_view description);

/// One LVLM-style agent able to play the step, describe and judge roles.
class Agent {
 public:
  virtual ~Agent() = default;
  virtual ReasoningChain step(const Tensor& patch, const std::string& patch_id) const = 0;
  virtual std::string describe(const Tensor& patch, const std::string& patch_id, std::size_t label,
                               const ReasoningChain& chain) const = 0;
  virtual double judge(const Tensor& patch, const std::string& patch_id, const ReasoningChain& chain,
                       std::size_t label, std::string_view description) const = 0;
};

/// Deterministic agent grounded in measure_patch().
class MockAgent final : public Agent {
 public:
  ReasoningChain step(const Tensor& patch, const std::string& patch_id) const override;
  std::string describe(const Tensor& patch, const std::string& patch_id, std::size_t label,
                       const ReasoningChain& chain) const override;
  double judge(const Tensor& patch, const std::string& patch_id, const ReasoningChain& chain, std::size_t label,
               std::string_view description) const override;
};

struct AgentEndpoint {
  enum class Kind { mock, remote };
  Kind kind = Kind::mock;
  std::string url;
  int timeout_ms = 10000;
  int max_retries = 2;
};

/// HTTP agent. POSTs {role, patch, context, prompt} as JSON to the URL and
/// expects {steps}, {text} or {score}. Transport failures are retried;
/// any failure that survives the retries, a non-2xx status or a malformed
/// reply raises AgentError.
class RemoteAgent final : public Agent {
 public:
  explicit RemoteAgent(AgentEndpoint endpoint);
  ReasoningChain step(const Tensor& patch, const std::string& patch_id) const override;
  std::string describe(const Tensor& patch, const std::string& patch_id, std::size_t label,
                       const ReasoningChain& chain) const override;
  double judge(const Tensor& patch, const std::string& patch_id, const ReasoningChain& chain, std::size_t label,
               std::string_view description) const override;

 private:
  std::string post(const std::string& patch_id, const std::string& body) const;
  AgentEndpoint endpoint_;
  std::string base_;
  std::string path_;
};

std::unique_ptr<Agent> make_agent(const AgentEndpoint& endpoint);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

enum class ErrorPolicy { abort, skip };

struct PipelineAgents {
  const Agent* step = nullptr;
  const Agent* describe = nullptr;
  const Agent* judge = nullptr;
};

struct PipelineOptions {
  std::size_t patch_h = kSynthImageSize;
  std::size_t patch_w = kSynthImageSize;
  ErrorPolicy policy = ErrorPolicy::abort;
  std::size_t parallelism = 1;
  AggregatorParams aggregator = AggregatorParams::seeded(0);
};

struct PipelineResult {
  std::vector<PatchRecord> records;  // ordered by patch index
  std::vector<std::string> skipped;  // "patch_id: message"
};

std::string patch_id_for(std::size_t index);

/// Splits the image, then runs step -> aggregate -> describe -> judge on
/// each patch. Under ErrorPolicy::abort the AgentError of the lowest failing
/// patch index is rethrown.
PipelineResult run_pipeline(const Tensor& image, const PipelineOptions& options, const PipelineAgents& agents);

struct Agreement {
  double spearman_rho = 0.0;
  double mean_abs_diff = 0.0;
  std::size_t n = 0;
};

/// Ranks starting at 1; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> values);
double spearman(std::span<const double> a, std::span<const double> b);
/// Over records that carry a human score; needs at least 3.
Agreement agreement(std::span<const PatchRecord> records);

std::string record_to_json(const PatchRecord& record);
PatchRecord record_from_json(std::string_view line);
std::string records_to_jsonl(std::span<const PatchRecord> records);
std::vector<PatchRecord> records_from_jsonl(std::string_view text);

/// CSV with header "patch_id,score".
std::map<std::string, double> parse_human_scores(std::string_view csv);
/// Returns the number of records that received a score.
std::size_t attach_human_scores(std::vector<PatchRecord>& records, const std::map<std::string, double>& scores);

}  // namespace icdit
