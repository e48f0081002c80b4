#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "icdit/rng.hpp"
#include "icdit/tensor.hpp"

namespace testing {

inline icdit::Tensor random_tensor(icdit::Shape shape, std::uint64_t seed, double stddev = 1.0) {
  icdit::Rng rng(seed, 0x74657374);
  return icdit::Tensor::randn(std::move(shape), rng, stddev);
}

/// Central differences of a scalar function of x, computed without the tape.
inline std::vector<double> central_differences(const std::function<double(const icdit::Tensor&)>& f,
                                               icdit::Tensor x, double eps = 1e-5) {
  icdit::NoGradGuard guard;
  std::vector<double> out(x.numel());
  auto data = x.mutable_data();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = data[i];
    data[i] = saved + eps;
    const double up = f(x);
    data[i] = saved - eps;
    const double down = f(x);
    data[i] = saved;
    out[i] = (up - down) / (2.0 * eps);
  }
  return out;
}

/// Tape gradient of a scalar function with respect to x.
inline std::vector<double> tape_gradient(const std::function<icdit::Tensor(const icdit::Tensor&)>& f,
                                         icdit::Tensor x) {
  icdit::Tape::current().reset();
  x.set_requires_grad(true);
  x.zero_grad();
  icdit::backward(f(x));
  icdit::Tape::current().reset();
  std::vector<double> g(x.grad().begin(), x.grad().end());
  if (g.empty()) g.assign(x.numel(), 0.0);
  x.zero_grad();
  return g;
}

inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / (std::abs(numeric[i]) + 1e-12));
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline bool bit_equal(const icdit::Tensor& a, const icdit::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

/// Fresh empty directory below the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const std::filesystem::path dir = std::filesystem::path(ICDIT_TEST_TMP) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
