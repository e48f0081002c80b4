#include "icdit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "icdit/errors.hpp"
#include "icdit/rng.hpp"

namespace icdit {

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> leaves, double eps,
                           double fraction, std::uint64_t seed) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  auto& tape = Tape::current();
  tape.reset();

  std::vector<bool> previous;
  for (auto& leaf : leaves) {
    if (!leaf.is_leaf()) throw ContractError("grad_check: inputs must be leaf tensors");
    previous.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }

  const Tensor out = f();
  if (out.numel() != 1) throw ContractError("grad_check: builder must return a scalar");
  backward(out);
  tape.reset();

  // (leaf, component) pairs to probe.
  std::vector<std::pair<std::size_t, std::size_t>> probes;
  for (std::size_t l = 0; l < leaves.size(); ++l)
    for (std::size_t i = 0; i < leaves[l].numel(); ++i) probes.emplace_back(l, i);
  if (fraction < 1.0 && !probes.empty()) {
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * probes.size())));
    Rng rng(seed, 0x6772616463686b);
    for (std::size_t i = 0; i < keep; ++i) std::swap(probes[i], probes[i + rng.below(probes.size() - i)]);
    probes.resize(keep);
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (auto [l, i] : probes) {
    auto data = leaves[l].mutable_data();
    const double analytic = leaves[l].has_grad() ? leaves[l].grad()[i] : 0.0;
    const double saved = data[i];
    data[i] = saved + eps;
    const double up = f().item();
    data[i] = saved - eps;
    const double down = f().item();
    data[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double rel = std::abs(analytic - numeric) / (std::abs(numeric) + 1e-12);
    report.max_rel_error = std::max(report.max_rel_error, rel);
    ++report.components;
  }

  for (std::size_t l = 0; l < leaves.size(); ++l) {
    leaves[l].zero_grad();
    leaves[l].set_requires_grad(previous[l]);
  }
  return report;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  Tensor leaves[] = {x};
  return grad_check([&] { return f(x); }, leaves, eps).max_rel_error;
}

}  // namespace icdit
