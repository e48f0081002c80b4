#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "icdit/backbone.hpp"
#include "icdit/tensor.hpp"

namespace icdit {

// Binary tensor container, little-endian:
//   "ICDT" | version u32 | count u32
//   per entry: name_len u32 | name | rank u32 | dims u64[rank] | dtype u8 | payload
enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::uint32_t kContainerVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::string encode_container(const NamedTensors& entries, DType dtype);
/// Throws IoError on bad magic, unsupported version, unknown dtype or
/// truncation; nothing is returned unless the whole buffer parses.
NamedTensors decode_container(std::string_view bytes);

/// Writes through a temporary file and renames it into place.
void save_container(const std::filesystem::path& path, const NamedTensors& entries, DType dtype);
NamedTensors load_container(const std::filesystem::path& path);
/// Looks up one entry by name; throws IoError when absent.
const Tensor& find_entry(const NamedTensors& entries, std::string_view name);

/// Trainable tensors at f32 precision.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
/// Loads into a model of the given geometry; every name and shape must
/// match exactly.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

std::string read_file(const std::filesystem::path& path);
/// Atomic replace via a sibling temporary file.
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace icdit
