#include "icdit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "icdit/errors.hpp"

namespace icdit {

namespace {

using detail::NodePtr;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
}

void require_matrix(const Tensor& x, const char* op) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
}

std::size_t vector_len(const Tensor& v) {
  if (v.rank() == 1) return v.dim(0);
  if (v.rank() == 2 && v.dim(0) == 1) return v.dim(1);
  throw ShapeError("expected a vector, got " + shape_str(v.shape()));
}

void check_offsets(std::span<const std::size_t> offsets, std::size_t rows, std::size_t groups, const char* op) {
  if (offsets.size() != groups + 1 || offsets.front() != 0 || offsets.back() != rows)
    throw ShapeError(std::string(op) + ": row-group offsets do not cover " + std::to_string(rows) + " rows in " +
                     std::to_string(groups) + " groups");
  for (std::size_t g = 0; g + 1 < offsets.size(); ++g)
    if (offsets[g] > offsets[g + 1]) throw ShapeError(std::string(op) + ": offsets not monotone");
}

template <typename Fn, typename DFn>
Tensor unary(const Tensor& x, Fn fn, DFn dfn) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fn(xs[i]);
  auto y = make_result(x.shape(), std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&x})) {
    NodePtr xn = x.node(), yn = y.node();
    tape.record(yn, [xn, yn, dfn] {
      auto& gx = xn->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yn->grad[i] * dfn(xn->data[i], yn->data[i]);
    });
  }
  return y;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not agree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const double* A = a.data().data();
  const double* B = b.data().data();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A[i * k + t];
      const double* bt = B + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
  auto y = make_result({m, n}, std::move(c));
  auto& tape = Tape::current();
  if (tape.should_record({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), yn = y.node();
    tape.record(yn, [an, bn, yn, m, k, n] {
      const double* G = yn->grad.data();
      if (an->requires_grad) {
        // dA = dY * B^T
        auto& ga = an->ensure_grad();
        const double* B = bn->data.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            double s = 0.0;
            const double* gi = G + i * n;
            const double* bt = B + t * n;
            for (std::size_t j = 0; j < n; ++j) s += gi[j] * bt[j];
            ga[i * k + t] += s;
          }
      }
      if (bn->requires_grad) {
        // dB = A^T * dY
        auto& gb = bn->ensure_grad();
        const double* A = an->data.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            const double av = A[i * k + t];
            if (av == 0.0) continue;
            double* gbt = gb.data() + t * n;
            const double* gi = G + i * n;
            for (std::size_t j = 0; j < n; ++j) gbt[j] += av * gi[j];
          }
      }
    });
  }
  return y;
}

namespace {

template <typename Fn>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fn fn, double da_sign, double db_sign,
              bool product) {
  require_same_shape(a, b, name);
  const auto as = a.data(), bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = fn(as[i], bs[i]);
  auto y = make_result(a.shape(), std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), yn = y.node();
    tape.record(yn, [an, bn, yn, da_sign, db_sign, product] {
      const auto& g = yn->grad;
      if (an->requires_grad) {
        auto& ga = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += product ? g[i] * bn->data[i] : da_sign * g[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += product ? g[i] * an->data[i] : db_sign * g[i];
      }
    });
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; }, 1.0, 1.0, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; }, 1.0, -1.0, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; }, 0.0, 0.0, true);
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  const std::size_t n = x.rows(), d = x.cols();
  if (vector_len(bias) != d)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  const auto xs = x.data(), bs = bias.data();
  std::vector<double> out(xs.begin(), xs.end());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bs[c];
  auto y = make_result(x.shape(), std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&x, &bias})) {
    NodePtr xn = x.node(), bn = bias.node(), yn = y.node();
    tape.record(yn, [xn, bn, yn, n, d] {
      const auto& g = yn->grad;
      if (xn->requires_grad) {
        auto& gx = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  const auto xs = x.data();
  auto y = make_result({1}, {std::accumulate(xs.begin(), xs.end(), 0.0)});
  auto& tape = Tape::current();
  if (tape.should_record({&x})) {
    NodePtr xn = x.node(), yn = y.node();
    tape.record(yn, [xn, yn] {
      auto& gx = xn->ensure_grad();
      for (auto& v : gx) v += yn->grad[0];
    });
  }
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const auto as = a.data(), bs = b.data();
  const double inv_n = 1.0 / static_cast<double>(as.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < as.size(); ++i) {
    const double d = as[i] - bs[i];
    acc += d * d;
  }
  auto y = make_result({1}, {acc * inv_n});
  auto& tape = Tape::current();
  if (tape.should_record({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), yn = y.node();
    tape.record(yn, [an, bn, yn, inv_n] {
      const double g = yn->grad[0] * 2.0 * inv_n;
      if (an->requires_grad) {
        auto& ga = an->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (an->data[i] - bn->data[i]);
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (an->data[i] - bn->data[i]);
      }
    });
  }
  return y;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax: empty last axis");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xs.data() + r * n;
    double* yr = out.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  auto y = make_result(x.shape(), std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&x})) {
    NodePtr xn = x.node(), yn = y.node();
    tape.record(yn, [xn, yn, rows, n] {
      auto& gx = xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = yn->data.data() + r * n;
        const double* g = yn->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[j] * (g[j] - dot);
      }
    });
  }
  return y;
}

namespace {

Tensor layer_norm_impl(const Tensor& x, const Tensor* gain, const Tensor* bias, double eps) {
  require_matrix(x, "layer_norm");
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  const std::size_t n = x.rows(), d = x.cols();
  if (d == 0) throw ShapeError("layer_norm: zero-width rows");
  if (gain && (vector_len(*gain) != d || vector_len(*bias) != d))
    throw ShapeError("layer_norm: gain/bias do not match width " + std::to_string(d));
  const auto xs = x.data();
  std::vector<double> normed(xs.size()), inv_std(n), out(xs.size());
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xs.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mu) * inv_std[r];
      normed[r * d + c] = h;
      out[r * d + c] = gain ? h * (*gain)[c] + (*bias)[c] : h;
    }
  }
  auto y = make_result(x.shape(), std::move(out));
  auto& tape = Tape::current();
  const bool record = gain ? tape.should_record({&x, gain, bias}) : tape.should_record({&x});
  if (record) {
    NodePtr xn = x.node(), yn = y.node();
    NodePtr gn = gain ? gain->node() : nullptr, bn = bias ? bias->node() : nullptr;
    tape.record(yn, [xn, gn, bn, yn, n, d, normed = std::move(normed), inv_std = std::move(inv_std)] {
      const auto& g = yn->grad;
      if (gn && gn->requires_grad) {
        auto& gg = gn->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * normed[r * d + c];
      }
      if (bn && bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
      }
      if (xn->requires_grad) {
        auto& gx = xn->ensure_grad();
        std::vector<double> dh(d);
        for (std::size_t r = 0; r < n; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dh[c] = g[r * d + c] * (gn ? gn->data[c] : 1.0);
            mean_dh += dh[c];
            mean_dh_h += dh[c] * normed[r * d + c];
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c)
            gx[r * d + c] += inv_std[r] * (dh[c] - mean_dh - normed[r * d + c] * mean_dh_h);
        }
      }
    });
  }
  return y;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  return layer_norm_impl(x, &gain, &bias, eps);
}

Tensor layer_norm(const Tensor& x, double eps) { return layer_norm_impl(x, nullptr, nullptr, eps); }

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double kA = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); },
      [](double v, double) {
        const double th = std::tanh(kC * (v + kA * v * v * v));
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor concat_tokens(std::span<const Tensor> streams) {
  if (streams.empty()) throw ShapeError("concat_tokens: no streams");
  const std::size_t d = streams[0].cols();
  std::size_t total = 0;
  for (const auto& s : streams) {
    if (s.cols() != d)
      throw ShapeError("concat_tokens: width " + std::to_string(s.cols()) + " differs from " + std::to_string(d));
    total += s.rows();
  }
  std::vector<double> out;
  out.reserve(total * d);
  for (const auto& s : streams) out.insert(out.end(), s.data().begin(), s.data().end());
  auto y = make_result({total, d}, std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record(streams)) {
    std::vector<NodePtr> nodes;
    for (const auto& s : streams) nodes.push_back(s.node());
    NodePtr yn = y.node();
    tape.record(yn, [nodes, yn] {
      std::size_t off = 0;
      for (const auto& sn : nodes) {
        if (sn->requires_grad) {
          auto& gs = sn->ensure_grad();
          for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += yn->grad[off + i];
        }
        off += sn->data.size();
      }
    });
  }
  return y;
}

std::vector<Tensor> split_tokens(const Tensor& x, std::span<const std::size_t> sizes) {
  require_matrix(x, "split_tokens");
  const std::size_t d = x.cols();
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != x.rows())
    throw ShapeError("split_tokens: sizes do not sum to " + std::to_string(x.rows()) + " rows");
  std::vector<Tensor> parts;
  std::size_t row = 0;
  for (auto count : sizes) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), row);
    parts.push_back(gather_rows(x, idx));
    row += count;
  }
  (void)d;
  return parts;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t n = x.rows(), d = x.cols();
  if (begin + count > d) throw ShapeError("slice_cols: range exceeds width " + std::to_string(d));
  const auto xs = x.data();
  std::vector<double> out(n * count);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(xs.data() + r * d + begin, count, out.data() + r * count);
  auto y = make_result({n, count}, std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&x})) {
    NodePtr xn = x.node(), yn = y.node();
    tape.record(yn, [xn, yn, n, d, begin, count] {
      auto& gx = xn->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < count; ++c) gx[r * d + begin + c] += yn->grad[r * count + c];
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  require_matrix(x, "gather_rows");
  const std::size_t n = x.rows(), d = x.cols();
  const auto xs = x.data();
  std::vector<double> out(indices.size() * d);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= n) throw ShapeError("gather_rows: index " + std::to_string(indices[r]) + " out of range");
    std::copy_n(xs.data() + indices[r] * d, d, out.data() + r * d);
  }
  auto y = make_result({indices.size(), d}, std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&x})) {
    NodePtr xn = x.node(), yn = y.node();
    tape.record(yn, [xn, yn, idx = std::vector<std::size_t>(indices.begin(), indices.end()), d] {
      auto& gx = xn->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) gx[idx[r] * d + c] += yn->grad[r * d + c];
    });
  }
  return y;
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_t,
                std::span<const std::size_t> offsets) {
  require_matrix(x, "modulate");
  const std::size_t d = x.cols();
  if (shift.rank() != 2 || shift.shape() != scale_t.shape() || shift.cols() != d)
    throw ShapeError("modulate: shift/scale " + shape_str(shift.shape()) + " do not match " + shape_str(x.shape()));
  const std::size_t groups = shift.rows();
  check_offsets(offsets, x.rows(), groups, "modulate");
  const auto xs = x.data(), sh = shift.data(), sc = scale_t.data();
  std::vector<double> out(xs.size());
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t r = offsets[g]; r < offsets[g + 1]; ++r)
      for (std::size_t c = 0; c < d; ++c)
        out[r * d + c] = xs[r * d + c] * (1.0 + sc[g * d + c]) + sh[g * d + c];
  auto y = make_result(x.shape(), std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&x, &shift, &scale_t})) {
    NodePtr xn = x.node(), shn = shift.node(), scn = scale_t.node(), yn = y.node();
    tape.record(yn, [xn, shn, scn, yn, d, groups, off = std::vector<std::size_t>(offsets.begin(), offsets.end())] {
      const auto& gy = yn->grad;
      auto* gx = xn->requires_grad ? &xn->ensure_grad() : nullptr;
      auto* gsh = shn->requires_grad ? &shn->ensure_grad() : nullptr;
      auto* gsc = scn->requires_grad ? &scn->ensure_grad() : nullptr;
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t r = off[g]; r < off[g + 1]; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            const double gv = gy[r * d + c];
            if (gx) (*gx)[r * d + c] += gv * (1.0 + scn->data[g * d + c]);
            if (gsh) (*gsh)[g * d + c] += gv;
            if (gsc) (*gsc)[g * d + c] += gv * xn->data[r * d + c];
          }
    });
  }
  return y;
}

Tensor gated_residual(const Tensor& residual, const Tensor& x, const Tensor& gate,
                      std::span<const std::size_t> offsets) {
  require_same_shape(residual, x, "gated_residual");
  require_matrix(x, "gated_residual");
  const std::size_t d = x.cols();
  if (gate.rank() != 2 || gate.cols() != d)
    throw ShapeError("gated_residual: gate " + shape_str(gate.shape()) + " does not match " + shape_str(x.shape()));
  const std::size_t groups = gate.rows();
  check_offsets(offsets, x.rows(), groups, "gated_residual");
  const auto rs = residual.data(), xs = x.data(), gs = gate.data();
  std::vector<double> out(xs.size());
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t r = offsets[g]; r < offsets[g + 1]; ++r)
      for (std::size_t c = 0; c < d; ++c) out[r * d + c] = rs[r * d + c] + gs[g * d + c] * xs[r * d + c];
  auto y = make_result(x.shape(), std::move(out));
  auto& tape = Tape::current();
  if (tape.should_record({&residual, &x, &gate})) {
    NodePtr rn = residual.node(), xn = x.node(), gn = gate.node(), yn = y.node();
    tape.record(yn, [rn, xn, gn, yn, d, groups, off = std::vector<std::size_t>(offsets.begin(), offsets.end())] {
      const auto& gy = yn->grad;
      auto* gr = rn->requires_grad ? &rn->ensure_grad() : nullptr;
      auto* gx = xn->requires_grad ? &xn->ensure_grad() : nullptr;
      auto* gg = gn->requires_grad ? &gn->ensure_grad() : nullptr;
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t r = off[g]; r < off[g + 1]; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            const double gv = gy[r * d + c];
            if (gr) (*gr)[r * d + c] += gv;
            if (gx) (*gx)[r * d + c] += gv * gn->data[g * d + c];
            if (gg) (*gg)[g * d + c] += gv * xn->data[r * d + c];
          }
    });
  }
  return y;
}

}  // namespace icdit
