#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "doctest.h"
#include "helpers.hpp"
#include "icdit/container.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(ICDIT_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string tiny_config(const fs::path& root) {
  nlohmann::json j = {
      {"seed", 1},
      {"model", {{"depth", 1}, {"d_model", 16}, {"n_heads", 2}}},
      {"diffusion", {{"T", 10}}},
      {"train", {{"steps", 4}, {"batch_size", 2}}},
      {"data", {{"n_train", 6}, {"n_eval", 3}}},
      {"annotate", {{"grid", 2}, {"parallelism", 2}}},
      {"paths", {{"out_dir", (root / "out").string()}, {"dataset_dir", (root / "data").string()}}},
  };
  const fs::path path = root / "config.json";
  icdit::write_file(path, j.dump());
  return path.string();
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors and help") {
    const auto dir = testing::scratch_dir("cli_usage");
    const auto log = dir / "log.txt";
    CHECK(run("--help", log) == 0);
    CHECK(icdit::read_file(log).find("gen-data") != std::string::npos);
    CHECK(run("", log) == 1);
    CHECK(run("train --bogus", log) == 1);
    CHECK(run("frobnicate", log) == 1);
    icdit::write_file(dir / "bad.json", R"({"train": {"stepz": 1}})");
    CHECK(run("train --config " + (dir / "bad.json").string(), log) == 1);
    CHECK(icdit::read_file(log).find("train.stepz") != std::string::npos);
    CHECK(run("train --config " + (dir / "absent.json").string(), log) == 2);
  }

  TEST_CASE("missing dataset is a runtime error") {
    const auto dir = testing::scratch_dir("cli_missing");
    const auto cfg = tiny_config(dir);
    CHECK(run("train --config " + cfg, dir / "log.txt") == 2);
    CHECK(icdit::read_file(dir / "log.txt").find("error") != std::string::npos);
  }

  TEST_CASE("gradcheck passes") {
    const auto dir = testing::scratch_dir("cli_gradcheck");
    CHECK(run("gradcheck", dir / "log.txt") == 0);
  }

  TEST_CASE("end-to-end run is byte-reproducible") {
    std::string first_metrics, first_ckpt, first_records;
    for (int pass = 0; pass < 2; ++pass) {
      const auto dir = testing::scratch_dir("cli_e2e_" + std::to_string(pass));
      const auto cfg = tiny_config(dir);
      const auto log = dir / "log.txt";
      REQUIRE(run("gen-data --config " + cfg, log) == 0);
      REQUIRE(run("train --config " + cfg, log) == 0);
      REQUIRE(run("sample --config " + cfg, log) == 0);
      REQUIRE(run("evaluate --config " + cfg, log) == 0);
      REQUIRE(run("annotate --config " + cfg, log) == 0);
      CHECK(fs::exists(dir / "data" / "train" / "manifest.jsonl"));
      CHECK(fs::exists(dir / "out" / "loss.csv"));
      CHECK(fs::exists(dir / "out" / "samples" / "grid.png"));
      const auto metrics = nlohmann::json::parse(icdit::read_file(dir / "out" / "metrics.json"));
      CHECK(metrics.at("n_gen") == 3);
      CHECK(metrics.at("fid").get<double>() >= 0.0);
      const std::string ckpt = icdit::read_file(dir / "out" / "checkpoint.icdt");
      const std::string records = icdit::read_file(dir / "out" / "records.jsonl");
      CHECK(std::count(records.begin(), records.end(), '\n') == 4);
      if (pass == 0) {
        first_metrics = icdit::read_file(dir / "out" / "metrics.json");
        first_ckpt = ckpt;
        first_records = records;
      } else {
        CHECK(icdit::read_file(dir / "out" / "metrics.json") == first_metrics);
        CHECK(ckpt == first_ckpt);
        CHECK(records == first_records);
      }
    }
  }
}
