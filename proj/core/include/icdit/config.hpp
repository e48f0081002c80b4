#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "icdit/backbone.hpp"
#include "icdit/encoders.hpp"

namespace icdit {

struct DiffusionConfig {
  std::size_t steps = 200;
  double beta_start = 5e-4;
  double beta_end = 0.1;
};

struct TrainConfig {
  /// lr_final / lr when only lr is configured.
  static constexpr double kDefaultDecay = 1e-3;

  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double lr = 1e-2;
  /// Learning rate reached at the last step by cosine decay; equal to lr
  /// means a constant rate.
  double lr_final = 1e-5;
  double clip_norm = 1.0;
  /// Write the checkpoint every this many steps (0: only at the end).
  std::size_t checkpoint_every = 0;
};

struct DataConfig {
  std::size_t n_train = 256;
  std::size_t n_eval = 32;
  std::size_t image_size = 32;
};

enum class EmbeddingSource { image, reference };

struct SampleConfig {
  /// Where sampling takes the appearance embedding from: the held-out
  /// image itself, or a training image with the same caption.
  EmbeddingSource embedding_source = EmbeddingSource::image;
  std::size_t batch_size = 16;
};

struct AnnotateConfig {
  std::size_t grid = 8;  // mosaic is grid x grid samples
  std::size_t parallelism = 4;
  bool skip_errors = false;
  int timeout_ms = 10000;
  int max_retries = 2;
};

struct PathsConfig {
  std::string out_dir = "out";
  std::string dataset_dir = "out/data";
};

struct Config {
  std::uint64_t seed = 0;
  std::uint64_t encoder_seed = SurrogateEncoderParams{}.seed;
  ModelConfig model;
  DiffusionConfig diffusion;
  TrainConfig train;
  DataConfig data;
  DropSet drop;
  SampleConfig sample;
  AnnotateConfig annotate;
  PathsConfig paths;

  /// Throws ConfigError on any inconsistent value.
  void validate() const;
  SurrogateEncoderParams encoder_params() const;
};

/// Strict parse: unknown keys, wrong types and invalid values raise
/// ConfigError. Missing keys keep their defaults.
Config parse_config(std::string_view json_text);
Config load_config(const std::filesystem::path& path);
std::string config_to_json(const Config& config);

}  // namespace icdit
