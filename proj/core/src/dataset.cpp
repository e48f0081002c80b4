#include "icdit/dataset.hpp"

#include <cstdio>

#include "icdit/container.hpp"
#include "icdit/encoders.hpp"
#include "icdit/errors.hpp"
#include "icdit/rng.hpp"
#include "json.hpp"

namespace icdit {

using nlohmann::ordered_json;

namespace {

std::string sample_file(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.icdt", index);
  return buf;
}

}  // namespace

std::uint64_t split_seed(std::uint64_t seed, bool eval) { return Rng(seed, eval ? 0x6576616c : 0x747261696e).next_u64(); }

void write_split(const std::filesystem::path& dir, const std::vector<SynthSample>& samples) {
  std::filesystem::create_directories(dir);
  std::string manifest;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ordered_json j;
    j["index"] = i;
    j["seed"] = s.seed;
    j["label"] = s.label;
    j["caption"] = s.caption();
    j["caption_ids"] = s.caption_ids;
    j["texture"] = texture_word(s.texture);
    ordered_json blobs = ordered_json::array();
    for (const auto& b : s.blobs) blobs.push_back(ordered_json::array({b.cx, b.cy, b.r}));
    j["blobs"] = std::move(blobs);
    j["file"] = sample_file(i);
    manifest += j.dump() + "\n";
    save_container(dir / sample_file(i), {{"image", s.image}, {"mask", s.mask}}, DType::f64);
  }
  write_file(dir / "manifest.jsonl", manifest);
}

std::vector<SynthSample> read_split(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset split not found: " + dir.string());
  const std::string manifest = read_file(dir / "manifest.jsonl");
  std::vector<SynthSample> out;
  std::size_t pos = 0, lineno = 0;
  while (pos < manifest.size()) {
    std::size_t end = manifest.find('\n', pos);
    if (end == std::string::npos) end = manifest.size();
    const std::string line = manifest.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (line.empty()) continue;
    SynthSample s;
    std::string file;
    try {
      const auto j = ordered_json::parse(line);
      s.seed = j.at("seed").get<std::uint64_t>();
      s.label = j.at("label").get<std::size_t>();
      s.caption_ids = j.at("caption_ids").get<std::vector<std::size_t>>();
      const auto tex = j.at("texture").get<std::string>();
      if (tex != "fine" && tex != "coarse") throw IoError("unknown texture '" + tex + "'");
      s.texture = tex == "fine" ? Texture::fine : Texture::coarse;
      for (const auto& b : j.at("blobs")) s.blobs.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<int>()});
      file = j.at("file").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(dir.string() + "/manifest.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
    const auto entries = load_container(dir / file);
    s.image = find_entry(entries, "image");
    s.mask = find_entry(entries, "mask");
    if (s.image.shape() != Shape{3, kSynthImageSize, kSynthImageSize} ||
        s.mask.shape() != Shape{1, kSynthImageSize, kSynthImageSize})
      throw IoError(file + ": unexpected image or mask shape");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("dataset split is empty: " + dir.string());
  return out;
}

}  // namespace icdit
