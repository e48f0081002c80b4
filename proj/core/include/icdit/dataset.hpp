#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "icdit/synthdata.hpp"

namespace icdit {

/// Root seeds of the train and eval splits derived from a config seed.
std::uint64_t split_seed(std::uint64_t seed, bool eval);

/// Writes manifest.jsonl plus one container per sample ("image", "mask",
/// f64) into dir.
void write_split(const std::filesystem::path& dir, const std::vector<SynthSample>& samples);
/// Reads a split written by write_split. Throws IoError when the
/// directory or any file is missing or malformed.
std::vector<SynthSample> read_split(const std::filesystem::path& dir);

}  // namespace icdit
