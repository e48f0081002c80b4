#include "icdit/config.hpp"

#include <set>

#include "icdit/container.hpp"
#include "icdit/errors.hpp"
#include "json.hpp"

namespace icdit {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Walks one JSON object, rejecting keys that are never read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + prefix() + key + "'");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError(prefix() + key + ": expected true or false");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError(prefix() + key + ": expected a non-negative integer");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer()) throw ConfigError(prefix() + key + ": expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(prefix() + key + ": expected a number");
      }
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(prefix() + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Section child(const char* key) {
    seen_.insert(key);
    return Section(j_.at(key), prefix() + key);
  }

 private:
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void positive(std::size_t v, const char* name) {
  if (v == 0) throw ConfigError(std::string(name) + " must be positive");
}

}  // namespace

void Config::validate() const {
  model.validate();
  positive(diffusion.steps, "diffusion.T");
  if (diffusion.steps < 2) throw ConfigError("diffusion.T must be at least 2");
  if (!(diffusion.beta_start > 0.0 && diffusion.beta_start < diffusion.beta_end && diffusion.beta_end < 1.0))
    throw ConfigError("diffusion: need 0 < beta_start < beta_end < 1");
  positive(train.batch_size, "train.batch_size");
  if (!(train.lr > 0.0) || !(train.lr_final > 0.0) || train.lr_final > train.lr)
    throw ConfigError("train: need 0 < lr_final <= lr");
  if (!(train.clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
  positive(data.n_train, "data.n_train");
  positive(data.n_eval, "data.n_eval");
  if (data.image_size != 32) throw ConfigError("data.image_size: the synthetic generator produces 32x32 images");
  const std::size_t stride = SurrogateEncoderParams{}.stride;
  if (model.latent_h * stride != data.image_size || model.latent_w * stride != data.image_size)
    throw ConfigError("model.latent: h and w must equal data.image_size / " + std::to_string(stride));
  if (model.steps != diffusion.steps) throw ConfigError("model steps must equal diffusion.T");
  positive(sample.batch_size, "sample.batch_size");
  positive(annotate.grid, "annotate.grid");
  positive(annotate.parallelism, "annotate.parallelism");
  if (annotate.timeout_ms <= 0 || annotate.max_retries < 0)
    throw ConfigError("annotate: timeout_ms must be positive and max_retries non-negative");
  if (paths.out_dir.empty() || paths.dataset_dir.empty()) throw ConfigError("paths must be non-empty");
}

SurrogateEncoderParams Config::encoder_params() const {
  SurrogateEncoderParams p;
  p.seed = encoder_seed;
  p.d_model = model.d_model;
  p.latent_channels = model.latent_channels;
  p.patch_size = model.patch_size;
  return p;
}

Config parse_config(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Config c;
  {
    Section top(root, "");
    top.read("seed", c.seed);
    top.read("encoder_seed", c.encoder_seed);
    if (top.has("model")) {
      auto m = top.child("model");
      m.read("depth", c.model.depth);
      m.read("d_model", c.model.d_model);
      m.read("n_heads", c.model.n_heads);
      m.read("patch_size", c.model.patch_size);
      if (m.has("latent")) {
        auto l = m.child("latent");
        l.read("channels", c.model.latent_channels);
        l.read("h", c.model.latent_h);
        l.read("w", c.model.latent_w);
      }
    }
    if (top.has("diffusion")) {
      auto d = top.child("diffusion");
      d.read("T", c.diffusion.steps);
      d.read("beta_start", c.diffusion.beta_start);
      d.read("beta_end", c.diffusion.beta_end);
    }
    if (top.has("train")) {
      auto t = top.child("train");
      t.read("steps", c.train.steps);
      t.read("batch_size", c.train.batch_size);
      t.read("lr", c.train.lr);
      const bool has_final = t.has("lr_final");
      t.read("lr_final", c.train.lr_final);
      if (!has_final) c.train.lr_final = c.train.lr * TrainConfig::kDefaultDecay;
      t.read("clip_norm", c.train.clip_norm);
      t.read("checkpoint_every", c.train.checkpoint_every);
    }
    if (top.has("data")) {
      auto d = top.child("data");
      d.read("n_train", c.data.n_train);
      d.read("n_eval", c.data.n_eval);
      d.read("image_size", c.data.image_size);
    }
    if (top.has("ablation")) {
      auto a = top.child("ablation");
      std::vector<std::string> drop;
      a.read("drop", drop);
      c.drop = DropSet::from_names(drop);
    }
    if (top.has("sample")) {
      auto s = top.child("sample");
      std::string source = "image";
      s.read("embedding_source", source);
      if (source == "image")
        c.sample.embedding_source = EmbeddingSource::image;
      else if (source == "reference")
        c.sample.embedding_source = EmbeddingSource::reference;
      else
        throw ConfigError("sample.embedding_source must be 'image' or 'reference'");
      s.read("batch_size", c.sample.batch_size);
    }
    if (top.has("annotate")) {
      auto a = top.child("annotate");
      a.read("grid", c.annotate.grid);
      a.read("parallelism", c.annotate.parallelism);
      a.read("skip_errors", c.annotate.skip_errors);
      a.read("timeout_ms", c.annotate.timeout_ms);
      a.read("max_retries", c.annotate.max_retries);
    }
    if (top.has("paths")) {
      auto p = top.child("paths");
      p.read("out_dir", c.paths.out_dir);
      p.read("dataset_dir", c.paths.dataset_dir);
    }
  }
  c.model.steps = c.diffusion.steps;
  c.validate();
  return c;
}

Config load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::string config_to_json(const Config& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["encoder_seed"] = c.encoder_seed;
  j["model"] = {{"depth", c.model.depth},
                {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"patch_size", c.model.patch_size},
                {"latent", {{"channels", c.model.latent_channels}, {"h", c.model.latent_h}, {"w", c.model.latent_w}}}};
  j["diffusion"] = {{"T", c.diffusion.steps}, {"beta_start", c.diffusion.beta_start}, {"beta_end", c.diffusion.beta_end}};
  j["train"] = {{"steps", c.train.steps},           {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},                 {"lr_final", c.train.lr_final},
                {"clip_norm", c.train.clip_norm},   {"checkpoint_every", c.train.checkpoint_every}};
  j["data"] = {{"n_train", c.data.n_train}, {"n_eval", c.data.n_eval}, {"image_size", c.data.image_size}};
  std::vector<std::string> drop;
  if (c.drop.caption) drop.push_back("caption");
  if (c.drop.layout) drop.push_back("layout");
  if (c.drop.embedding) drop.push_back("embedding");
  j["ablation"] = {{"drop", drop}};
  j["sample"] = {{"embedding_source", c.sample.embedding_source == EmbeddingSource::image ? "image" : "reference"},
                 {"batch_size", c.sample.batch_size}};
  j["annotate"] = {{"grid", c.annotate.grid},
                   {"parallelism", c.annotate.parallelism},
                   {"skip_errors", c.annotate.skip_errors},
                   {"timeout_ms", c.annotate.timeout_ms},
                   {"max_retries", c.annotate.max_retries}};
  j["paths"] = {{"out_dir", c.paths.out_dir}, {"dataset_dir", c.paths.dataset_dir}};
  return j.dump(2) + "\n";
}

}  // namespace icdit
