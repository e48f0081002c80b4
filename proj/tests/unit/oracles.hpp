#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "icdit/backbone.hpp"

namespace testing {

using icdit::AttentionParams;
using icdit::Tensor;

inline std::vector<std::vector<long double>> rows_times(const Tensor& x, const Tensor& w) {
  std::vector<std::vector<long double>> out(x.rows(), std::vector<long double>(w.cols(), 0.0L));
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      for (std::size_t k = 0; k < x.cols(); ++k) out[i][j] += static_cast<long double>(x.at(i, k)) * w.at(k, j);
  return out;
}

// Single-head-at-a-time attention over the concatenated sequence [a; b],
// written as explicit loops in extended precision.
inline std::pair<std::vector<std::vector<long double>>, std::vector<std::vector<long double>>> brute_force_mm(
    const Tensor& a, const Tensor& b, const AttentionParams& p) {
  const std::size_t na = a.rows(), nb = b.rows(), n = na + nb, d = a.cols(), dh = d / p.n_heads;
  auto cat = [&](const Tensor& wa, const Tensor& wb) {
    auto x = rows_times(a, wa);
    auto y = rows_times(b, wb);
    x.insert(x.end(), y.begin(), y.end());
    return x;
  };
  const auto q = cat(p.q_a, p.q_b), k = cat(p.k_a, p.k_b), v = cat(p.v_a, p.v_b);
  std::vector<std::vector<long double>> o(n, std::vector<long double>(d, 0.0L));
  for (std::size_t h = 0; h < p.n_heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<long double> s(n);
      long double mx = -1e300L, z = 0.0L;
      for (std::size_t j = 0; j < n; ++j) {
        long double acc = 0.0L;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) acc += q[i][c] * k[j][c];
        s[j] = acc / std::sqrt(static_cast<long double>(dh));
        mx = std::max(mx, s[j]);
      }
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) o[i][c] += s[j] / z * v[j][c];
    }
  auto project = [&](std::size_t begin, std::size_t count, const Tensor& w) {
    std::vector<std::vector<long double>> out(count, std::vector<long double>(d, 0.0L));
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t c = 0; c < d; ++c) out[i][j] += o[begin + i][c] * w.at(c, j);
    return out;
  };
  return {project(0, na, p.o_a), project(na, nb, p.o_b)};
}

inline double max_diff(const Tensor& got, const std::vector<std::vector<long double>>& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t j = 0; j < want[i].size(); ++j)
      worst = std::max(worst, std::abs(got.at(i, j) - static_cast<double>(want[i][j])));
  return worst;
}

}  // namespace testing
