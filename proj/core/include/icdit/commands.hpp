#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icdit/annotate.hpp"
#include "icdit/config.hpp"
#include "icdit/gradcheck.hpp"
#include "icdit/metrics.hpp"
#include "icdit/trainer.hpp"

namespace icdit {

// Library entry points behind the icdit command-line tool. Each writes its
// artifacts below the configured paths unless an explicit path is given.

/// <dataset_dir>/train and <dataset_dir>/eval.
void cmd_gen_data(const Config& config, std::ostream& log);

/// Writes the checkpoint (default <out_dir>/checkpoint.icdt) and
/// <out_dir>/loss.csv.
TrainResult cmd_train(const Config& config, std::ostream& log,
                      const std::optional<std::filesystem::path>& checkpoint = {});

struct SampleRequest {
  std::optional<std::filesystem::path> checkpoint;  // default <out_dir>/checkpoint.icdt
  std::optional<std::filesystem::path> out_dir;     // default <out_dir>/samples
  std::optional<std::size_t> n;                     // default data.n_eval
};
/// Generates one sample per held-out item: sample_NNNNNN.icdt ("image",
/// "mask", "latent"), manifest.jsonl and grid.png.
void cmd_sample(const Config& config, const SampleRequest& request, std::ostream& log);

/// Compares <dataset_dir>/eval with a sample directory; writes the report.
EvalReport cmd_evaluate(const Config& config, const std::filesystem::path& generated_dir,
                        const std::optional<std::filesystem::path>& report_path, std::ostream& log);

struct AblationRow {
  DropSet drop;
  double fid = 0.0;
  double mean_dice = 0.0;
  double final_loss = 0.0;
};
/// Trains, samples and evaluates one model per drop set (all eight subsets
/// unless `rows` is given); writes <out_dir>/ablation.csv and .json.
std::vector<AblationRow> cmd_ablate(const Config& config, std::ostream& log, std::span<const DropSet> rows = {});

struct AnnotateRequest {
  std::optional<std::string> endpoint_url;
  std::optional<std::filesystem::path> human_scores;
  std::optional<std::filesystem::path> out_path;  // default <out_dir>/records.jsonl
};
struct AnnotateOutcome {
  std::vector<PatchRecord> records;
  std::vector<std::string> skipped;
  std::optional<Agreement> agreement;
};
/// Mock (or remote) pipeline over a mosaic of the first grid^2 training
/// samples.
AnnotateOutcome cmd_annotate(const Config& config, const AnnotateRequest& request, std::ostream& log);

/// Max relative error per operation family.
std::map<std::string, GradCheckReport> cmd_gradcheck(const Config& config, std::ostream& log);
inline constexpr double kGradcheckTolerance = 1e-4;

/// "step,loss" CSV with round-trip precision.
std::string loss_csv(std::span<const double> losses);

}  // namespace icdit
