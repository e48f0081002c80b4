#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "helpers.hpp"
#include "icdit/annotate.hpp"
#include "icdit/errors.hpp"

using namespace icdit;

namespace {

class FailingAgent final : public Agent {
 public:
  explicit FailingAgent(std::vector<std::string> bad) : bad_(std::move(bad)) {}
  ReasoningChain step(const Tensor& patch, const std::string& id) const override {
    for (const auto& b : bad_)
      if (b == id) throw AgentError(id, "simulated outage");
    return mock_.step(patch, id);
  }
  std::string describe(const Tensor& patch, const std::string& id, std::size_t label,
                       const ReasoningChain& chain) const override {
    return mock_.describe(patch, id, label, chain);
  }
  double judge(const Tensor& patch, const std::string& id, const ReasoningChain& chain, std::size_t label,
               std::string_view description) const override {
    return mock_.judge(patch, id, chain, label, description);
  }

 private:
  std::vector<std::string> bad_;
  MockAgent mock_;
};

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

double pearson_of_ranks(const std::vector<double>& a, const std::vector<double>& b) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0.0, equal = 0.0;
      for (double w : v) less += w < v[i], equal += w == v[i];
      r[i] = 1.0 + less + (equal - 1.0) / 2.0;
    }
    return r;
  };
  const auto ra = rank(a), rb = rank(b);
  long double ma = 0.0L, mb = 0.0L;
  for (std::size_t i = 0; i < ra.size(); ++i) ma += ra[i] / ra.size(), mb += rb[i] / rb.size();
  long double sab = 0.0L, saa = 0.0L, sbb = 0.0L;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return static_cast<double>(sab / std::sqrt(saa * sbb));
}

SynthSample sample_with(std::size_t blobs, std::uint64_t seed) {
  SynthOptions opt;
  opt.blob_count = blobs;
  return gen_sample(seed, opt);
}

}  // namespace

TEST_SUITE("annotate") {
  TEST_CASE("label_distribution") {
    const std::vector<double> logits = {0.3, -1.0, 2.5};
    const auto d = label_distribution(logits);
    double total = 0.0;
    for (double p : d.probs) total += p;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(d.label == 2);
    const long double z = std::exp(0.3L) + std::exp(-1.0L) + std::exp(2.5L);
    CHECK(d.probs[0] == doctest::Approx(static_cast<double>(std::exp(0.3L) / z)).epsilon(1e-14));
    const std::vector<double> shifted = {100.3, 99.0, 102.5};
    const auto e = label_distribution(shifted);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(e.probs[i] - d.probs[i]) < 1e-13);
    const std::vector<double> tie = {1.0, 1.0, 0.0};
    CHECK(label_distribution(tie).label == 0);
    CHECK_THROWS_AS(label_distribution(std::vector<double>{}), ShapeError);
  }

  TEST_CASE("aggregate_reasoning equals mean features through the projection") {
    const auto params = AggregatorParams::seeded(3);
    CHECK(testing::bit_equal(params.projection, AggregatorParams::seeded(3).projection));
    CHECK(params.projection.shape() == Shape{kStepFeatureDim, kNumClasses});
    ReasoningChain chain;
    chain.patch_id = "x";
    const Tensor f = testing::random_tensor({3, kStepFeatureDim}, 4);
    for (std::size_t j = 0; j < 3; ++j)
      chain.steps.push_back({"s", std::vector<double>(f.data().begin() + j * 8, f.data().begin() + (j + 1) * 8)});
    std::vector<long double> logits(3, 0.0L);
    for (std::size_t c = 0; c < 3; ++c) {
      logits[c] = params.bias[c];
      for (std::size_t i = 0; i < 8; ++i) {
        const long double psi = (static_cast<long double>(f[i]) + f[8 + i] + f[16 + i]) / 3.0L;
        logits[c] += psi * params.projection[i * 3 + c];
      }
    }
    long double z = 0.0L;
    for (auto l : logits) z += std::exp(l);
    const auto d = aggregate_reasoning(chain, params);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(d.probs[c] - static_cast<double>(std::exp(logits[c]) / z)) < 1e-14);

    ReasoningChain empty;
    CHECK_THROWS_AS(aggregate_reasoning(empty, params), ContractError);
    chain.steps[1].features.pop_back();
    CHECK_THROWS_AS(aggregate_reasoning(chain, params), ShapeError);
  }

  TEST_CASE("templates") {
    CHECK(describe_template(2, Texture::coarse, 8) == "dense cluster of 8 nuclei on coarse stroma");
    CHECK(describe_template(0, Texture::fine, 1) == "sparse scatter of 1 nucleus on fine stroma");
    CHECK(describe_template(1, Texture::fine, 0) == "medium density group of no nuclei on fine stroma");
    CHECK(count_phrase(12) == "over 9 nuclei");
    CHECK(patch_id_for(7) == "p007");
    CHECK_THROWS_AS(describe_template(3, Texture::fine, 1), ContractError);
  }

  TEST_CASE("mock step chains for an empty and a five-blob patch") {
    MockAgent agent;
    const Tensor flat = Tensor::full({3, 32, 32}, 0.75);
    const auto empty = agent.step(flat, "p000");
    REQUIRE(empty.size() == 3);
    CHECK(empty.steps[0].statement == "no nuclei detected");
    CHECK(empty.steps[0].features[0] == 0.0);
    CHECK(empty.steps[0].features[3] == 1.0);
    CHECK(empty.steps[1].statement == "mean intensity 0.750");
    CHECK(empty.steps[2].statement == "coarse stroma texture, roughness 0.000");

    const auto s = sample_with(5, 11);
    const auto chain = agent.step(s.image, "p001");
    CHECK(chain.patch_id == "p001");
    CHECK(chain.steps[0].statement == "5 nuclei detected");
    CHECK(chain.steps[0].features[0] == doctest::Approx(5.0 / 9.0));
    CHECK(chain.steps[0].features[4] == 1.0);
    double mean = 0.0;
    for (double v : s.image.data()) mean += v;
    mean /= static_cast<double>(s.image.numel());
    CHECK(chain.steps[1].features[1] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(chain.steps[1].statement == "mean intensity " + fmt3(mean));
    for (const auto& step : chain.steps) CHECK(step.features.size() == kStepFeatureDim);
  }

  TEST_CASE("judge rubric") {
    MockAgent agent;
    const auto s = sample_with(8, 12);
    const auto chain = agent.step(s.image, "p");
    const std::size_t label = density_class(8);
    const auto text = agent.describe(s.image, "p", label, chain);
    CHECK(text == describe_template(2, measure_patch(s.image).texture, 8));
    CHECK(agent.judge(s.image, "p", chain, label, text) == 1.0);

    // A description naming a different density class loses consistency.
    const auto wrong = describe_template(0, Texture::fine, 8);
    CHECK(judge_rubric(s.image, chain, label, wrong) <= 0.8);
    CHECK(judge_rubric(s.image, chain, label, text + " or sparse") <= 0.8);

    // One ungrounded step out of three costs exactly 0.6 / 3.
    auto bad = chain;
    bad.steps[1].features[1] += 0.05;
    CHECK(judge_rubric(s.image, bad, label, text) == 0.8);
    bad.steps[0].features[0] += 1.0 / 9.0;
    CHECK(judge_rubric(s.image, bad, label, text) == 0.6);

    ReasoningChain none;
    CHECK(judge_rubric(s.image, none, label, text) == 0.0);
  }

  TEST_CASE("density words follow the measured count over many patches") {
    MockAgent agent;
    const auto aggregator = AggregatorParams::seeded(0);
    std::size_t agree_truth = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto s = gen_sample(50000 + seed);
      const auto chain = agent.step(s.image, "p");
      const auto dist = aggregate_reasoning(chain, aggregator);
      const std::size_t measured = static_cast<std::size_t>(std::lround(chain.steps[0].features[0] * 9.0));
      CHECK(dist.label == density_class(measured));
      const auto text = agent.describe(s.image, "p", dist.label, chain);
      CHECK(text.find(density_word(dist.label)) != std::string::npos);
      agree_truth += dist.label == s.label;
    }
    CHECK(agree_truth > 900);
  }

  TEST_CASE("pipeline is deterministic and ordered for any parallelism") {
    const Mosaic m = gen_mosaic(21, 3, 3);
    MockAgent agent;
    const PipelineAgents agents{&agent, &agent, &agent};
    PipelineOptions opt;
    const auto serial = run_pipeline(m.image, opt, agents);
    opt.parallelism = 4;
    const auto parallel = run_pipeline(m.image, opt, agents);
    REQUIRE(serial.records.size() == 9);
    for (std::size_t i = 0; i < 9; ++i) CHECK(serial.records[i].patch_id == patch_id_for(i));
    CHECK(records_to_jsonl(serial.records) == records_to_jsonl(parallel.records));
    CHECK(serial.skipped.empty());
    const PipelineAgents missing{&agent, nullptr, &agent};
    CHECK_THROWS_AS(run_pipeline(m.image, opt, missing), ContractError);
  }

  TEST_CASE("pipeline error policies") {
    const Mosaic m = gen_mosaic(22, 3, 3);
    FailingAgent flaky({"p006", "p002"});
    MockAgent mock;
    const PipelineAgents agents{&flaky, &mock, &mock};
    for (std::size_t par : {1, 3}) {
      PipelineOptions opt;
      opt.parallelism = par;
      try {
        run_pipeline(m.image, opt, agents);
        FAIL("expected AgentError");
      } catch (const AgentError& e) {
        CHECK(e.patch_id() == "p002");
      }
      opt.policy = ErrorPolicy::skip;
      const auto r = run_pipeline(m.image, opt, agents);
      CHECK(r.records.size() == 7);
      REQUIRE(r.skipped.size() == 2);
      CHECK(r.skipped[0].find("p002") != std::string::npos);
      CHECK(r.skipped[1].find("p006") != std::string::npos);
      CHECK(r.records[2].patch_id == "p003");
    }
  }

  TEST_CASE("spearman and average ranks") {
    const std::vector<double> a = {1, 2, 3, 4, 5}, up = {2, 4, 6, 8, 100}, down = {5, 4, 3, 2, 1};
    CHECK(spearman(a, up) == doctest::Approx(1.0));
    CHECK(spearman(a, down) == doctest::Approx(-1.0));
    const std::vector<double> ties = {3, 1, 3, 2};
    CHECK(average_ranks(ties) == std::vector<double>{3.5, 1.0, 3.5, 2.0});
    const std::vector<double> flat = {1, 1, 1, 1, 1};
    CHECK_THROWS_AS(spearman(a, flat), ContractError);
    CHECK_THROWS_AS(spearman(a, ties), ShapeError);

    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<PatchRecord> records(10);
      std::vector<double> j, h;
      for (std::size_t i = 0; i < 10; ++i) {
        records[i].judge_score = std::round(rng.uniform() * 5.0) / 5.0;
        records[i].human_score = std::round(rng.uniform() * 4.0) / 4.0;
        j.push_back(records[i].judge_score);
        h.push_back(*records[i].human_score);
      }
      if (std::adjacent_find(j.begin(), j.end(), std::not_equal_to<>()) == j.end()) continue;
      if (std::adjacent_find(h.begin(), h.end(), std::not_equal_to<>()) == h.end()) continue;
      const auto ag = agreement(records);
      CHECK(ag.n == 10);
      CHECK(std::abs(ag.spearman_rho - pearson_of_ranks(j, h)) < 1e-12);
      double mad = 0.0;
      for (std::size_t i = 0; i < 10; ++i) mad += std::abs(j[i] - h[i]) / 10.0;
      CHECK(ag.mean_abs_diff == doctest::Approx(mad).epsilon(1e-12));
    }
    std::vector<PatchRecord> two(2);
    two[0].human_score = 0.1;
    two[1].human_score = 0.2;
    CHECK_THROWS_AS(agreement(two), ContractError);
  }

  TEST_CASE("records survive a JSONL round trip byte for byte") {
    const Mosaic m = gen_mosaic(23, 2, 2);
    MockAgent agent;
    PipelineOptions opt;
    auto records = run_pipeline(m.image, opt, {&agent, &agent, &agent}).records;
    records[1].human_score = 0.25;
    const std::string text = records_to_jsonl(records);
    const auto back = records_from_jsonl(text);
    REQUIRE(back.size() == 4);
    CHECK(records_to_jsonl(back) == text);
    CHECK(back[1].human_score == 0.25);
    CHECK_FALSE(back[0].human_score.has_value());
    CHECK(back[2].chain.steps[1].features == records[2].chain.steps[1].features);
    CHECK_THROWS_AS(record_from_json("{\"patch_id\": 3}"), IoError);
    CHECK_THROWS_AS(record_from_json("not json"), IoError);
  }

  TEST_CASE("human score CSV") {
    const auto scores = parse_human_scores("patch_id,score\r\np000,0.5\r\n\np002,1\n");
    CHECK(scores.size() == 2);
    CHECK(scores.at("p002") == 1.0);
    CHECK_THROWS_AS(parse_human_scores(""), IoError);
    CHECK_THROWS_AS(parse_human_scores("id,score\np0,0.5\n"), IoError);
    CHECK_THROWS_AS(parse_human_scores("patch_id,score\np0\n"), IoError);
    CHECK_THROWS_AS(parse_human_scores("patch_id,score\np0,abc\n"), IoError);
    CHECK_THROWS_AS(parse_human_scores("patch_id,score\np0,0.5x\n"), IoError);
    CHECK_THROWS_AS(parse_human_scores("patch_id,score\np0,1.5\n"), IoError);
    CHECK_THROWS_AS(parse_human_scores("patch_id,score\np0,0.1\np0,0.2\n"), IoError);

    std::vector<PatchRecord> records(3);
    for (std::size_t i = 0; i < 3; ++i) records[i].patch_id = patch_id_for(i);
    CHECK(attach_human_scores(records, scores) == 2);
    CHECK(records[0].human_score == 0.5);
    CHECK_FALSE(records[1].human_score.has_value());
  }
}
