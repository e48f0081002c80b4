#include <algorithm>
#include <cmath>
#include <string>

#include "icdit/errors.hpp"
#include "icdit/ops.hpp"

namespace icdit {

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::span<const std::size_t> offsets) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()) + " differ");
  const std::size_t rows = q.rows(), d = q.cols();
  if (n_heads == 0 || d % n_heads != 0)
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
                     " heads");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows)
    throw ShapeError("attention: row-group offsets do not cover " + std::to_string(rows) + " rows");
  const std::size_t groups = offsets.size() - 1;
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs holds P for every (group, head), packed group-major.
  std::vector<std::size_t> prob_off(groups + 1, 0);
  for (std::size_t g = 0; g < groups; ++g) {
    if (offsets[g + 1] < offsets[g]) throw ShapeError("attention: offsets not monotone");
    const std::size_t n = offsets[g + 1] - offsets[g];
    prob_off[g + 1] = prob_off[g] + n_heads * n * n;
  }
  std::vector<double> probs(prob_off.back());
  std::vector<double> out(rows * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();

  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = offsets[g], n = offsets[g + 1] - offsets[g];
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* P = probs.data() + prob_off[g] + h * n * n;
      const std::size_t col = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = Q + (base + i) * d + col;
        double* pi = P + i * n;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = K + (base + j) * d + col;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          pi[j] = s * scale;
          mx = std::max(mx, pi[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (pi[j] = std::exp(pi[j] - mx));
        const double inv = 1.0 / z;
        double* oi = out.data() + (base + i) * d + col;
        for (std::size_t j = 0; j < n; ++j) {
          pi[j] *= inv;
          const double* vj = V + (base + j) * d + col;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pi[j] * vj[c];
        }
      }
    }
  }

  auto y = make_result({rows, d}, std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&q, &k, &v})) {
    auto qn = q.node(), kn = k.node(), vn = v.node(), yn = y.node();
    tape.record(yn, [qn, kn, vn, yn, d, dh, n_heads, scale, probs = std::move(probs),
                     prob_off = std::move(prob_off),
                     off = std::vector<std::size_t>(offsets.begin(), offsets.end())] {
      const double* G = yn->grad.data();
      const double* Q = qn->data.data();
      const double* K = kn->data.data();
      const double* V = vn->data.data();
      auto* gq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
      auto* gk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
      auto* gv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
      std::vector<double> dp;
      for (std::size_t g = 0; g + 1 < off.size(); ++g) {
        const std::size_t base = off[g], n = off[g + 1] - off[g];
        dp.resize(n);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const double* P = probs.data() + prob_off[g] + h * n * n;
          const std::size_t col = h * dh;
          for (std::size_t i = 0; i < n; ++i) {
            const double* gi = G + (base + i) * d + col;
            const double* pi = P + i * n;
            // dP = dO V^T, dV += P^T dO
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double* vj = V + (base + j) * d + col;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += s * pi[j];
              if (gv) {
                double* gvj = gv + (base + j) * d + col;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += pi[j] * gi[c];
              }
            }
            // dS = P * (dP - <dP, P>), S = scale * q k^T
            const double* qi = Q + (base + i) * d + col;
            for (std::size_t j = 0; j < n; ++j) {
              const double ds = pi[j] * (dp[j] - dot) * scale;
              if (ds == 0.0) continue;
              const double* kj = K + (base + j) * d + col;
              if (gq) {
                double* gqi = gq + (base + i) * d + col;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                double* gkj = gk + (base + j) * d + col;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace icdit
