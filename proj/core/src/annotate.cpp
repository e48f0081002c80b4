#include "icdit/annotate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "icdit/errors.hpp"
#include "icdit/rng.hpp"
#include "json.hpp"

namespace icdit {

using nlohmann::ordered_json;

namespace {

constexpr double kCueWeight = 6.0;
constexpr double kProjectionNoise = 0.1;

enum Slot : std::size_t { kCount = 0, kIntensity, kRoughness, kSparse, kMedium, kDense, kFine, kCoarse };

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

bool contains_word(std::string_view text, std::string_view word) {
  std::size_t pos = 0;
  while ((pos = text.find(word, pos)) != std::string_view::npos) {
    const bool left = pos == 0 || text[pos - 1] == ' ';
    const bool right = pos + word.size() == text.size() || text[pos + word.size()] == ' ';
    if (left && right) return true;
    pos += word.size();
  }
  return false;
}

// Count and texture as stated by a chain, falling back to measuring the
// patch when the chain does not carry them.
std::pair<std::size_t, Texture> chain_cues(const ReasoningChain& chain, const Tensor& patch) {
  std::optional<std::size_t> count;
  std::optional<Texture> texture;
  for (std::size_t j = 0; j < chain.steps.size(); ++j) {
    const auto& f = chain.steps[j].features;
    if (f.size() != kStepFeatureDim) continue;
    if (j == kCount && !count) count = static_cast<std::size_t>(std::lround(std::max(0.0, f[kCount] * 9.0)));
    if (j == kRoughness && !texture && (f[kFine] != 0.0 || f[kCoarse] != 0.0))
      texture = f[kFine] >= f[kCoarse] ? Texture::fine : Texture::coarse;
  }
  if (!count || !texture) {
    const auto m = measure_patch(patch);
    if (!count) count = m.count;
    if (!texture) texture = m.texture;
  }
  return {*count, *texture};
}

}  // namespace

AggregatorParams AggregatorParams::seeded(std::uint64_t seed) {
  Rng rng(seed, 0x61676772);
  std::vector<double> w(kStepFeatureDim * kNumClasses);
  for (auto& v : w) v = kProjectionNoise * rng.normal();
  for (std::size_t c = 0; c < kNumClasses; ++c) w[(kSparse + c) * kNumClasses + c] += kCueWeight;
  AggregatorParams p;
  p.projection = Tensor({kStepFeatureDim, kNumClasses}, std::move(w));
  p.bias = Tensor::zeros({kNumClasses});
  p.seed = seed;
  return p;
}

PatchMeasurements measure_patch(const Tensor& patch) {
  PatchMeasurements m;
  const Tensor mask = segment_oracle(patch);
  m.count = count_components(mask);
  const Tensor gray = to_gray(patch);
  for (double v : gray.data()) m.mean_intensity += v;
  m.mean_intensity /= static_cast<double>(gray.numel());

  const Tensor filtered = median_filter3(gray);
  const std::size_t h = gray.dim(1), w = gray.dim(2);
  // Background = not within one pixel of a segmented pixel.
  std::vector<char> bg(h * w, 1);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (mask[y * w + x] == 0.0) continue;
      for (std::size_t yy = y > 0 ? y - 1 : 0; yy <= std::min(h - 1, y + 1); ++yy)
        for (std::size_t xx = x > 0 ? x - 1 : 0; xx <= std::min(w - 1, x + 1); ++xx) bg[yy * w + xx] = 0;
    }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      if (!bg[p]) continue;
      if (x + 1 < w && bg[p + 1]) {
        total += std::abs(filtered[p + 1] - filtered[p]);
        ++pairs;
      }
      if (y + 1 < h && bg[p + w]) {
        total += std::abs(filtered[p + w] - filtered[p]);
        ++pairs;
      }
    }
  m.roughness = pairs ? total / static_cast<double>(pairs) : 0.0;
  m.texture = m.roughness > kRoughnessThreshold ? Texture::fine : Texture::coarse;
  return m;
}

std::string count_phrase(std::size_t count) {
  if (count == 0) return "no nuclei";
  if (count == 1) return "1 nucleus";
  if (count > 9) return "over 9 nuclei";
  return std::to_string(count) + " nuclei";
}

std::string describe_template(std::size_t label, Texture texture, std::size_t count) {
  static constexpr const char* kLead[] = {"sparse scatter of", "medium density group of", "dense cluster of"};
  if (label >= kNumClasses) throw ContractError("describe: label " + std::to_string(label) + " out of range");
  return std::string(kLead[label]) + " " + count_phrase(count) + " on " + texture_word(texture) + " stroma";
}

LabelDistribution label_distribution(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("label_distribution: no classes");
  LabelDistribution d;
  const double mx = *std::max_element(logits.begin(), logits.end());
  d.probs.resize(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (d.probs[i] = std::exp(logits[i] - mx));
  for (auto& p : d.probs) p /= z;
  d.label = static_cast<std::size_t>(std::max_element(d.probs.begin(), d.probs.end()) - d.probs.begin());
  return d;
}

LabelDistribution aggregate_reasoning(const ReasoningChain& chain, const AggregatorParams& params) {
  if (chain.steps.empty()) throw ContractError("aggregate_reasoning: empty chain for " + chain.patch_id);
  const std::size_t f = params.projection.dim(0), c = params.projection.dim(1);
  std::vector<double> psi(f, 0.0);
  for (const auto& s : chain.steps) {
    if (s.features.size() != f)
      throw ShapeError("aggregate_reasoning: step feature width " + std::to_string(s.features.size()) +
                       " does not match aggregator width " + std::to_string(f));
    for (std::size_t i = 0; i < f; ++i) psi[i] += s.features[i];
  }
  for (auto& v : psi) v /= static_cast<double>(chain.steps.size());
  std::vector<double> logits(c);
  for (std::size_t k = 0; k < c; ++k) {
    double acc = params.bias[k];
    for (std::size_t i = 0; i < f; ++i) acc += psi[i] * params.projection[i * c + k];
    logits[k] = acc;
  }
  return label_distribution(logits);
}

double judge_rubric(const Tensor& patch, const ReasoningChain& chain, std::size_t label,
                    std::string_view description) {
  if (chain.steps.empty()) return 0.0;
  const auto m = measure_patch(patch);
  std::size_t grounded = 0;
  for (std::size_t j = 0; j < chain.steps.size() && j < 3; ++j) {
    const auto& f = chain.steps[j].features;
    if (f.size() != kStepFeatureDim) continue;
    bool ok = false;
    if (j == kCount) ok = std::abs(f[kCount] * 9.0 - static_cast<double>(m.count)) < 0.5;
    if (j == kIntensity) ok = std::abs(f[kIntensity] - m.mean_intensity) <= kIntensityTolerance;
    if (j == kRoughness) ok = std::abs(f[kRoughness] - m.roughness) <= kRoughnessTolerance;
    grounded += ok;
  }
  bool consistent = label < kNumClasses && contains_word(description, density_word(label));
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (c != label && contains_word(description, density_word(c))) consistent = false;
  const bool covered = description.find(count_phrase(m.count)) != std::string_view::npos;
  // Integer weights keep equal rubric steps exactly equal in floating point.
  const double q = (6.0 * static_cast<double>(grounded) / static_cast<double>(chain.steps.size()) +
                    2.0 * consistent + 2.0 * covered) / 10.0;
  return std::clamp(q, 0.0, 1.0);
}

ReasoningChain MockAgent::step(const Tensor& patch, const std::string& patch_id) const {
  if (patch.numel() == 0) throw ContractError("step agent: empty patch " + patch_id);
  const auto m = measure_patch(patch);
  ReasoningChain chain;
  chain.patch_id = patch_id;

  std::vector<double> f(kStepFeatureDim, 0.0);
  f[kCount] = static_cast<double>(m.count) / 9.0;
  f[kSparse + density_class(m.count)] = 1.0;
  chain.steps.push_back({m.count == 0 ? "no nuclei detected" : count_phrase(m.count) + " detected", f});

  f.assign(kStepFeatureDim, 0.0);
  f[kIntensity] = m.mean_intensity;
  chain.steps.push_back({"mean intensity " + fixed3(m.mean_intensity), f});

  f.assign(kStepFeatureDim, 0.0);
  f[kRoughness] = m.roughness;
  f[m.texture == Texture::fine ? kFine : kCoarse] = 1.0;
  chain.steps.push_back(
      {std::string(texture_word(m.texture)) + " stroma texture, roughness " + fixed3(m.roughness), f});
  return chain;
}

std::string MockAgent::describe(const Tensor& patch, const std::string&, std::size_t label,
                                const ReasoningChain& chain) const {
  const auto [count, texture] = chain_cues(chain, patch);
  return describe_template(label, texture, count);
}

double MockAgent::judge(const Tensor& patch, const std::string&, const ReasoningChain& chain, std::size_t label,
                        std::string_view description) const {
  return judge_rubric(patch, chain, label, description);
}

std::unique_ptr<Agent> make_agent(const AgentEndpoint& endpoint) {
  if (endpoint.kind == AgentEndpoint::Kind::remote) return std::make_unique<RemoteAgent>(endpoint);
  return std::make_unique<MockAgent>();
}

std::string patch_id_for(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%03zu", index);
  return buf;
}

PipelineResult run_pipeline(const Tensor& image, const PipelineOptions& options, const PipelineAgents& agents) {
  if (!agents.step || !agents.describe || !agents.judge) throw ContractError("run_pipeline: missing agent");
  const auto patches = split_patches(image, options.patch_h, options.patch_w);
  const std::size_t n = patches.size();
  std::vector<std::optional<PatchRecord>> slots(n);
  std::vector<std::string> errors(n);
  std::vector<std::exception_ptr> failures(n);

  auto work = [&](std::size_t i) {
    const std::string id = patch_id_for(i);
    try {
      PatchRecord r;
      r.patch_id = id;
      r.chain = agents.step->step(patches[i], id);
      if (r.chain.steps.empty()) throw AgentError(id, "step agent returned no steps");
      r.chain.patch_id = id;
      r.dist = aggregate_reasoning(r.chain, options.aggregator);
      r.description = agents.describe->describe(patches[i], id, r.dist.label, r.chain);
      if (r.description.empty()) throw AgentError(id, "empty description");
      r.judge_score = std::clamp(agents.judge->judge(patches[i], id, r.chain, r.dist.label, r.description), 0.0, 1.0);
      slots[i] = std::move(r);
    } catch (const AgentError& e) {
      errors[i] = e.what();
      failures[i] = std::current_exception();
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(options.parallelism, 1, n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      work(i);
      if (failures[i] && options.policy == ErrorPolicy::abort) std::rethrow_exception(failures[i]);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; !stop && (i = next++) < n;) {
          work(i);
          if (failures[i] && options.policy == ErrorPolicy::abort) stop = true;
        }
      });
    for (auto& t : pool) t.join();
  }

  PipelineResult result;
  for (std::size_t i = 0; i < n; ++i) {
    if (failures[i]) {
      if (options.policy == ErrorPolicy::abort) std::rethrow_exception(failures[i]);
      result.skipped.push_back(errors[i]);
    } else if (slots[i]) {
      result.records.push_back(std::move(*slots[i]));
    }
  }
  return result;
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman: lengths differ");
  if (a.size() < 2) throw ContractError("spearman: need at least 2 values");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double center = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = ra[i] - center, y = rb[i] - center;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  if (saa == 0.0 || sbb == 0.0) throw ContractError("spearman: constant input has no rank correlation");
  return sab / std::sqrt(saa * sbb);
}

Agreement agreement(std::span<const PatchRecord> records) {
  std::vector<double> judge, human;
  for (const auto& r : records)
    if (r.human_score) {
      judge.push_back(r.judge_score);
      human.push_back(*r.human_score);
    }
  if (judge.size() < 3)
    throw ContractError("agreement: need at least 3 human-scored records, got " + std::to_string(judge.size()));
  Agreement a;
  a.n = judge.size();
  a.spearman_rho = spearman(judge, human);
  double mad = 0.0;
  for (std::size_t i = 0; i < judge.size(); ++i) mad += std::abs(judge[i] - human[i]);
  a.mean_abs_diff = mad / static_cast<double>(judge.size());
  return a;
}

std::string record_to_json(const PatchRecord& record) {
  ordered_json j;
  j["patch_id"] = record.patch_id;
  ordered_json steps = ordered_json::array();
  for (const auto& s : record.chain.steps) steps.push_back(ordered_json::array({s.statement, s.features}));
  j["steps"] = std::move(steps);
  j["probs"] = record.dist.probs;
  j["label"] = record.dist.label;
  j["description"] = record.description;
  j["judge_score"] = record.judge_score;
  j["human_score"] = record.human_score ? ordered_json(*record.human_score) : ordered_json(nullptr);
  return j.dump();
}

PatchRecord record_from_json(std::string_view line) {
  try {
    const auto j = ordered_json::parse(line);
    PatchRecord r;
    r.patch_id = j.at("patch_id").get<std::string>();
    r.chain.patch_id = r.patch_id;
    for (const auto& s : j.at("steps")) {
      if (!s.is_array() || s.size() != 2) throw IoError("step must be [statement, features]");
      r.chain.steps.push_back({s[0].get<std::string>(), s[1].get<std::vector<double>>()});
    }
    r.dist.probs = j.at("probs").get<std::vector<double>>();
    r.dist.label = j.at("label").get<std::size_t>();
    r.description = j.at("description").get<std::string>();
    r.judge_score = j.at("judge_score").get<double>();
    if (!j.at("human_score").is_null()) r.human_score = j.at("human_score").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed record: ") + e.what());
  }
}

std::string records_to_jsonl(std::span<const PatchRecord> records) {
  std::string out;
  for (const auto& r : records) out += record_to_json(r) + "\n";
  return out;
}

std::vector<PatchRecord> records_from_jsonl(std::string_view text) {
  std::vector<PatchRecord> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    if (!line.empty()) out.push_back(record_from_json(line));
    pos = end + 1;
  }
  return out;
}

std::map<std::string, double> parse_human_scores(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line)) throw IoError("human scores: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "patch_id,score") throw IoError("human scores: expected header 'patch_id,score'");
  std::map<std::string, double> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError("human scores: line " + std::to_string(lineno) + " has no comma");
    const std::string id = line.substr(0, comma);
    double score = 0.0;
    try {
      std::size_t used = 0;
      score = std::stod(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw IoError("human scores: bad score on line " + std::to_string(lineno));
    }
    if (!(score >= 0.0 && score <= 1.0)) throw IoError("human scores: score outside [0, 1] on line " + std::to_string(lineno));
    if (!out.emplace(id, score).second) throw IoError("human scores: duplicate patch_id " + id);
  }
  return out;
}

std::size_t attach_human_scores(std::vector<PatchRecord>& records, const std::map<std::string, double>& scores) {
  std::size_t matched = 0;
  for (auto& r : records) {
    auto it = scores.find(r.patch_id);
    if (it == scores.end()) continue;
    r.human_score = it->second;
    ++matched;
  }
  return matched;
}

}  // namespace icdit
