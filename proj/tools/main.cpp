#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "icdit/commands.hpp"
#include "icdit/errors.hpp"

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kRuntime = 2, kGradcheckFailed = 3 };

template <typename T>
std::optional<T> opt(const CLI::Option* o, const T& value) {
  return o->count() ? std::optional<T>(value) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"IC-DiT toy: layout-guided diffusion transformer, annotation pipeline and metrics"};
  app.require_subcommand(1);

  std::string config_path;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file (defaults when omitted)");
  };

  std::string out, checkpoint, samples_dir, endpoint_url, human_scores, embedding_source;
  std::size_t n = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic train/eval splits");
  add_config(gen);
  auto* gen_out = gen->add_option("--out", out, "Dataset directory (overrides paths.dataset_dir)");

  auto* train = app.add_subcommand("train", "Train the denoiser");
  add_config(train);
  auto* train_ckpt = train->add_option("--checkpoint", checkpoint, "Checkpoint to write");
  auto* train_out = train->add_option("--out", out, "Output directory (overrides paths.out_dir)");

  auto* sample = app.add_subcommand("sample", "Generate images for held-out layouts");
  add_config(sample);
  auto* sample_ckpt = sample->add_option("--checkpoint", checkpoint, "Checkpoint to load");
  auto* sample_out = sample->add_option("--out", out, "Sample directory");
  auto* sample_n = sample->add_option("--n", n, "Number of samples");
  auto* sample_src = sample->add_option("--embedding-source", embedding_source, "Appearance embedding source")
                         ->check(CLI::IsMember({"image", "reference"}));

  auto* evaluate = app.add_subcommand("evaluate", "FID, embedding cosine and Dice against the eval split");
  add_config(evaluate);
  auto* eval_samples = evaluate->add_option("--samples", samples_dir, "Sample directory (default <out_dir>/samples)");
  auto* eval_out = evaluate->add_option("--out", out, "Report path (default <out_dir>/metrics.json)");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every condition drop set");
  add_config(ablate);
  auto* ablate_out = ablate->add_option("--out", out, "Output directory (overrides paths.out_dir)");

  auto* annotate = app.add_subcommand("annotate", "Run the multi-agent annotation pipeline");
  add_config(annotate);
  auto* ann_url = annotate->add_option("--endpoint-url", endpoint_url, "Remote agent URL (mock agents otherwise)");
  auto* ann_human = annotate->add_option("--human-scores", human_scores, "CSV with header patch_id,score");
  auto* ann_out = annotate->add_option("--out", out, "Records file (default <out_dir>/records.jsonl)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  add_config(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    icdit::Config config = config_path.empty() ? icdit::parse_config("{}") : icdit::load_config(config_path);
    auto& log = std::cerr;

    if (gen->parsed()) {
      if (gen_out->count()) config.paths.dataset_dir = out;
      icdit::cmd_gen_data(config, log);
    } else if (train->parsed()) {
      if (train_out->count()) config.paths.out_dir = out;
      icdit::cmd_train(config, log, opt<std::filesystem::path>(train_ckpt, checkpoint));
    } else if (sample->parsed()) {
      if (sample_src->count())
        config.sample.embedding_source =
            embedding_source == "image" ? icdit::EmbeddingSource::image : icdit::EmbeddingSource::reference;
      icdit::SampleRequest req;
      req.checkpoint = opt<std::filesystem::path>(sample_ckpt, checkpoint);
      req.out_dir = opt<std::filesystem::path>(sample_out, out);
      req.n = opt(sample_n, n);
      icdit::cmd_sample(config, req, log);
    } else if (evaluate->parsed()) {
      const std::filesystem::path gen_dir =
          eval_samples->count() ? std::filesystem::path(samples_dir) : std::filesystem::path(config.paths.out_dir) / "samples";
      icdit::cmd_evaluate(config, gen_dir, opt<std::filesystem::path>(eval_out, out), log);
    } else if (ablate->parsed()) {
      if (ablate_out->count()) config.paths.out_dir = out;
      icdit::cmd_ablate(config, log);
    } else if (annotate->parsed()) {
      icdit::AnnotateRequest req;
      req.endpoint_url = opt(ann_url, endpoint_url);
      req.human_scores = opt<std::filesystem::path>(ann_human, human_scores);
      req.out_path = opt<std::filesystem::path>(ann_out, out);
      icdit::cmd_annotate(config, req, log);
    } else if (gradcheck->parsed()) {
      double worst = 0.0;
      for (const auto& [name, report] : icdit::cmd_gradcheck(config, log)) worst = std::max(worst, report.max_rel_error);
      if (!(worst < icdit::kGradcheckTolerance)) return kGradcheckFailed;
    }
  } catch (const icdit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const icdit::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
