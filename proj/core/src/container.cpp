#include "icdit/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "icdit/errors.hpp"

namespace icdit {

namespace {

constexpr char kMagic[4] = {'I', 'C', 'D', 'T'};

template <typename T>
void put(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw IoError("container truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) + " more)");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const NamedTensors& entries, DType dtype) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    for (double v : t.data()) {
      if (dtype == DType::f32)
        put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

NamedTensors decode_container(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4) != std::string_view(kMagic, 4)) throw IoError("not a tensor container (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) throw IoError("unsupported container version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.take(name_len));
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d != 0 && numel > bytes.size() / d) throw IoError("container entry '" + name + "' has an implausible shape");
      numel *= d;
      shape.push_back(d);
    }
    const auto tag = r.get<std::uint8_t>();
    if (tag > static_cast<std::uint8_t>(DType::f64))
      throw IoError("container entry '" + name + "' has unknown dtype " + std::to_string(tag));
    std::vector<double> data(numel);
    for (auto& v : data) {
      if (tag == static_cast<std::uint8_t>(DType::f32))
        v = std::bit_cast<float>(r.get<std::uint32_t>());
      else
        v = std::bit_cast<double>(r.get<std::uint64_t>());
    }
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw IoError("container has trailing bytes");
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_container(const std::filesystem::path& path, const NamedTensors& entries, DType dtype) {
  write_file(path, encode_container(entries, dtype));
}

NamedTensors load_container(const std::filesystem::path& path) {
  try {
    return decode_container(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

const Tensor& find_entry(const NamedTensors& entries, std::string_view name) {
  for (const auto& [n, t] : entries)
    if (n == name) return t;
  throw IoError("container has no entry '" + std::string(name) + "'");
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  save_container(path, params.named(), DType::f32);
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  const NamedTensors entries = load_container(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : entries)
    if (!by_name.emplace(n, &t).second) throw IoError("checkpoint repeats tensor '" + n + "'");
  ModelParams params = init_model(config, 0);
  const auto named = params.named();
  if (named.size() != entries.size())
    throw IoError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                  std::to_string(named.size()));
  // Validate everything before touching the model.
  for (const auto& [n, t] : named) {
    auto it = by_name.find(n);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor '" + n + "'");
    if (it->second->shape() != t.shape())
      throw IoError("checkpoint tensor '" + n + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                    shape_str(t.shape()));
  }
  for (auto& [n, t] : named) {
    Tensor dst = t;
    const auto src = by_name.at(n)->data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
  return params;
}

}  // namespace icdit
