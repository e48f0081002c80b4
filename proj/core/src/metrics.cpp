#include "icdit/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include "json.hpp"

#include "icdit/errors.hpp"
#include "icdit/synthdata.hpp"

namespace icdit {

namespace {

constexpr double kEigenFloor = 1e-9;

Eigen::MatrixXd to_matrix(const Tensor& t) {
  const std::size_t g = t.dim(0);
  Eigen::MatrixXd m(g, g);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t[i * g + j];
  return m;
}

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigen_of(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericError("frechet_distance: eigendecomposition did not converge");
  return es;
}

bool is_binary(const Tensor& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return v == 0.0 || v == 1.0; });
}

}  // namespace

FeatureStats feature_stats(const std::vector<std::vector<double>>& features) {
  const std::size_t n = features.size();
  if (n < 2) throw ContractError("feature_stats: need at least 2 samples, got " + std::to_string(n));
  const std::size_t g = features[0].size();
  std::vector<double> mu(g, 0.0), sigma(g * g, 0.0);
  for (const auto& f : features) {
    if (f.size() != g) throw ShapeError("feature_stats: feature widths differ");
    for (std::size_t i = 0; i < g; ++i) mu[i] += f[i];
  }
  for (auto& m : mu) m /= static_cast<double>(n);
  for (const auto& f : features)
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t j = 0; j < g; ++j) sigma[i * g + j] += (f[i] - mu[i]) * (f[j] - mu[j]);
  for (auto& s : sigma) s /= static_cast<double>(n - 1);
  return {Tensor({g}, std::move(mu)), Tensor({g, g}, std::move(sigma)), n};
}

FeatureStats feature_stats(std::span<const Tensor> images, const SurrogateEncoders& encoders) {
  std::vector<std::vector<double>> feats;
  feats.reserve(images.size());
  for (const auto& img : images) feats.push_back(encoders.visual_features(img));
  return feature_stats(feats);
}

FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim() != b.dim()) throw ShapeError("merge_stats: feature widths differ");
  const std::size_t g = a.dim(), n = a.n + b.n;
  const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n), nt = static_cast<double>(n);
  std::vector<double> mu(g), delta(g), sigma(g * g);
  for (std::size_t i = 0; i < g; ++i) {
    delta[i] = b.mu[i] - a.mu[i];
    mu[i] = a.mu[i] + delta[i] * nb / nt;
  }
  // Combine co-moments (Chan et al. pairwise update).
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const double m2 = a.sigma[i * g + j] * (na - 1.0) + b.sigma[i * g + j] * (nb - 1.0) +
                        delta[i] * delta[j] * na * nb / nt;
      sigma[i * g + j] = m2 / (nt - 1.0);
    }
  return {Tensor({g}, std::move(mu)), Tensor({g, g}, std::move(sigma)), n};
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim() != b.dim() || a.sigma.shape() != b.sigma.shape())
    throw ShapeError("frechet_distance: feature widths " + std::to_string(a.dim()) + " and " +
                     std::to_string(b.dim()) + " differ");
  const std::size_t g = a.dim();
  double mean_term = 0.0;
  for (std::size_t i = 0; i < g; ++i) mean_term += (a.mu[i] - b.mu[i]) * (a.mu[i] - b.mu[i]);

  const Eigen::MatrixXd sa = to_matrix(a.sigma), sb = to_matrix(b.sigma);
  const auto ea = eigen_of(sa);
  const Eigen::VectorXd root_vals = ea.eigenvalues().unaryExpr([](double v) { return v < kEigenFloor ? 0.0 : std::sqrt(v); });
  const Eigen::MatrixXd sa_half = ea.eigenvectors() * root_vals.asDiagonal() * ea.eigenvectors().transpose();
  const auto em = eigen_of(sa_half * sb * sa_half);
  double tr_sqrt = 0.0;
  for (Eigen::Index i = 0; i < em.eigenvalues().size(); ++i) {
    const double v = em.eigenvalues()(i);
    if (v > kEigenFloor) tr_sqrt += std::sqrt(v);
  }
  const double d = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("cosine_similarity: lengths differ");
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu <= 1e-12 || nv <= 1e-12) throw ContractError("cosine_similarity: zero vector");
  return std::clamp(uv / (nu * nv), -1.0, 1.0);
}

double dice(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("dice: mask shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  if (!is_binary(a) || !is_binary(b)) throw ContractError("dice: masks must be binary");
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    inter += a[i] * b[i];
    total += a[i] + b[i];
  }
  return total == 0.0 ? 1.0 : 2.0 * inter / total;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["fid"] = fid;
  j["mean_cosine"] = mean_cosine ? nlohmann::ordered_json(*mean_cosine) : nlohmann::ordered_json(nullptr);
  j["mean_dice"] = mean_dice;
  j["n_real"] = n_real;
  j["n_gen"] = n_gen;
  return j.dump(2) + "\n";
}

EvalReport evaluate_run(std::span<const Tensor> real, std::span<const Tensor> generated,
                        std::span<const Tensor> layouts, const SurrogateEncoders& encoders) {
  if (layouts.size() != generated.size())
    throw ContractError("evaluate_run: " + std::to_string(layouts.size()) + " layouts for " +
                        std::to_string(generated.size()) + " generated images");
  EvalReport r;
  r.n_real = real.size();
  r.n_gen = generated.size();
  std::vector<std::vector<double>> fr, fg;
  for (const auto& img : real) fr.push_back(encoders.visual_features(img));
  for (const auto& img : generated) fg.push_back(encoders.visual_features(img));
  r.fid = frechet_distance(feature_stats(fr), feature_stats(fg));
  if (real.size() == generated.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < fr.size(); ++i) s += cosine_similarity(fr[i], fg[i]);
    r.mean_cosine = s / static_cast<double>(fr.size());
  }
  double d = 0.0;
  for (std::size_t i = 0; i < generated.size(); ++i) d += dice(segment_oracle(generated[i]), layouts[i]);
  r.mean_dice = d / static_cast<double>(generated.size());
  return r;
}

}  // namespace icdit
