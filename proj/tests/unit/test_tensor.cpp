#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "icdit/errors.hpp"
#include "icdit/gradcheck.hpp"
#include "icdit/ops.hpp"

using namespace icdit;
using testing::central_differences;
using testing::max_rel_error;
using testing::random_tensor;
using testing::tape_gradient;

namespace {

// Fixed random weights turn any tensor into a scalar whose gradient has no
// symmetric cancellations.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  const Tensor w = random_tensor(y.shape(), seed);
  return sum(mul(y, w));
}

double naive_matmul_entry(const Tensor& a, const Tensor& b, std::size_t i, std::size_t j) {
  long double acc = 0.0L;
  for (std::size_t t = 0; t < a.cols(); ++t) acc += static_cast<long double>(a.at(i, t)) * b.at(t, j);
  return static_cast<double>(acc);
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul identity and hand expansion") {
    const Tensor m({2, 2}, {1, 2, 3, 4});
    const Tensor i2 = matmul(Tensor::eye(2), m);
    CHECK(std::vector<double>(i2.data().begin(), i2.data().end()) == std::vector<double>{1, 2, 3, 4});
    const Tensor r = matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}));
    CHECK(r.shape() == Shape{1, 1});
    CHECK(r.item() == 11.0);
  }

  TEST_CASE("matmul matches a naive triple loop") {
    const Tensor a = random_tensor({7, 5}, 1), b = random_tensor({5, 6}, 2);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 6; ++j) CHECK(c.at(i, j) == doctest::Approx(naive_matmul_entry(a, b, i, j)).epsilon(1e-14));
  }

  TEST_CASE("matmul shape error names both shapes") {
    try {
      matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x2]") != std::string::npos);
    }
  }

  TEST_CASE("matmul gradient of sum matches central differences") {
    const Tensor a = random_tensor({5, 4}, 3), b = random_tensor({4, 3}, 4);
    const auto fa = [&](const Tensor& x) { return sum(matmul(x, b)); };
    const auto fb = [&](const Tensor& x) { return sum(matmul(a, x)); };
    CHECK(max_rel_error(tape_gradient(fa, a), central_differences([&](const Tensor& x) { return fa(x).item(); }, a)) < 1e-6);
    CHECK(max_rel_error(tape_gradient(fb, b), central_differences([&](const Tensor& x) { return fb(x).item(); }, b)) < 1e-6);
  }

  TEST_CASE("matmul associativity on 8x8 chains") {
    const Tensor a = random_tensor({8, 8}, 5), b = random_tensor({8, 8}, 6), c = random_tensor({8, 8}, 7);
    const Tensor left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < left.numel(); ++i) {
      num += (left[i] - right[i]) * (left[i] - right[i]);
      den += left[i] * left[i];
    }
    CHECK(std::sqrt(num / den) < 1e-9);
  }

  TEST_CASE("softmax fixed points") {
    const Tensor a = softmax(Tensor({2}, {0, 0}));
    CHECK(a[0] == 0.5);
    CHECK(a[1] == 0.5);
    const Tensor b = softmax(Tensor({2}, {1000, 1000}));
    CHECK(b[0] == 0.5);
    CHECK(b[1] == 0.5);
  }

  TEST_CASE("softmax matches extended-precision exp/sum") {
    const Tensor y = softmax(Tensor({3}, {1, 2, 3}));
    long double z = 0.0L;
    for (int k = 1; k <= 3; ++k) z += std::exp(static_cast<long double>(k));
    for (int k = 0; k < 3; ++k)
      CHECK(std::abs(y[k] - static_cast<double>(std::exp(static_cast<long double>(k + 1)) / z)) < 1e-12);
  }

  TEST_CASE("softmax rows sum to one for large magnitudes") {
    const Tensor x = random_tensor({16, 9}, 8, 1000.0);
    const Tensor y = softmax(x);
    for (std::size_t r = 0; r < 16; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) s += y.at(r, c);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }

  TEST_CASE("layer_norm fixed points") {
    const Tensor one = Tensor::full({4}, 1.0), zero = Tensor::zeros({4});
    const Tensor y = layer_norm(Tensor::full({1, 4}, 3.25), one, zero);
    for (double v : y.data()) CHECK(v == 0.0);
    const Tensor g2 = Tensor::full({2}, 1.0), b2 = Tensor::zeros({2});
    const Tensor z = layer_norm(Tensor({1, 2}, {1, -1}), g2, b2, 1e-14);
    CHECK(z[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(z[1] == doctest::Approx(-1.0).epsilon(1e-12));
  }

  TEST_CASE("layer_norm rows have zero mean and unit variance") {
    const Tensor y = layer_norm(random_tensor({5, 8}, 9, 3.0), 1e-12);
    for (std::size_t r = 0; r < 5; ++r) {
      double m = 0.0, v = 0.0;
      for (std::size_t c = 0; c < 8; ++c) m += y.at(r, c) / 8.0;
      for (std::size_t c = 0; c < 8; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 8.0;
      CHECK(std::abs(m) < 1e-12);
      CHECK(std::abs(v - 1.0) < 1e-9);
    }
  }

  TEST_CASE("layer_norm gradient matches central differences") {
    const Tensor x = random_tensor({3, 8}, 10), gain = random_tensor({8}, 11), bias = random_tensor({8}, 12);
    const auto fx = [&](const Tensor& v) { return weighted_sum(layer_norm(v, gain, bias), 13); };
    const auto fg = [&](const Tensor& v) { return weighted_sum(layer_norm(x, v, bias), 13); };
    const auto fb = [&](const Tensor& v) { return weighted_sum(layer_norm(x, gain, v), 13); };
    auto scalar = [](auto f) { return [f](const Tensor& v) { return f(v).item(); }; };
    CHECK(max_rel_error(tape_gradient(fx, x), central_differences(scalar(fx), x)) < 1e-6);
    CHECK(max_rel_error(tape_gradient(fg, gain), central_differences(scalar(fg), gain)) < 1e-6);
    CHECK(max_rel_error(tape_gradient(fb, bias), central_differences(scalar(fb), bias)) < 1e-6);
  }

  TEST_CASE("gelu values") {
    CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(std::abs(gelu(Tensor::scalar(10.0)).item() - 10.0) < 1e-6);
    const long double x = 1.0L;
    const long double c = std::sqrt(2.0L / 3.14159265358979323846264338327950288L);
    const long double oracle = 0.5L * x * (1.0L + std::tanh(c * (x + 0.044715L * x * x * x)));
    CHECK(std::abs(gelu(Tensor::scalar(1.0)).item() - static_cast<double>(oracle)) < 1e-12);
    double prev = -1.0;
    for (int k = 0; k <= 500; ++k) {
      const double v = gelu(Tensor::scalar(k * 0.01)).item();
      CHECK(v >= prev);
      prev = v;
    }
  }

  TEST_CASE("silu values") {
    CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(std::abs(silu(Tensor::scalar(2.0)).item() - 2.0 / (1.0 + std::exp(-2.0))) < 1e-15);
  }

  TEST_CASE("concat and split round trip") {
    const Tensor a = random_tensor({2, 4}, 14), b = random_tensor({3, 4}, 15);
    const Tensor parts[] = {a, b};
    const Tensor joint = concat_tokens(parts);
    const std::size_t sizes[] = {2, 3};
    const auto back = split_tokens(joint, sizes);
    REQUIRE(back.size() == 2);
    CHECK(testing::bit_equal(back[0], a));
    CHECK(testing::bit_equal(back[1], b));
    const Tensor single[] = {a};
    CHECK(testing::bit_equal(concat_tokens(single), a));
    const Tensor bad[] = {a, random_tensor({2, 3}, 16)};
    CHECK_THROWS_AS(concat_tokens(bad), ShapeError);
  }

  TEST_CASE("gradient of sum through concat is all ones") {
    const Tensor a = random_tensor({2, 4}, 17), b = random_tensor({3, 4}, 18);
    const auto f = [&](const Tensor& x) {
      const Tensor parts[] = {x, b};
      return sum(concat_tokens(parts));
    };
    const auto g = tape_gradient(f, a);
    const auto n = central_differences([&](const Tensor& x) { return f(x).item(); }, a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      CHECK(g[i] == 1.0);
      CHECK(std::abs(n[i] - 1.0) < 1e-8);
    }
  }

  TEST_CASE("backward contracts") {
    Tensor x = random_tensor({3}, 19);
    x.set_requires_grad(true);
    Tape::current().reset();
    CHECK_THROWS_AS(backward(scale(x, 2.0)), ContractError);
    Tape::current().reset();
    backward(sum(scale(x, 2.0)));
    backward(sum(scale(x, 2.0)));
    for (double g : x.grad()) CHECK(g == 4.0);
    Tape::current().reset();
  }

  TEST_CASE("no-grad guard records nothing") {
    Tensor x = random_tensor({3}, 20);
    x.set_requires_grad(true);
    Tape::current().reset();
    {
      NoGradGuard guard;
      (void)sum(mul(x, x));
      CHECK(Tape::current().size() == 0);
    }
    (void)sum(mul(x, x));
    CHECK(Tape::current().size() == 2);
    Tape::current().reset();
  }

  TEST_CASE("grad_check reference cases") {
    CHECK(grad_check([](const Tensor& x) { return sum(x); }, random_tensor({6}, 21)) < 1e-9);
    const Tensor x({2}, {1, 2});
    const auto g = tape_gradient([](const Tensor& v) { return sum(mul(v, v)); }, x);
    const auto n = central_differences([](const Tensor& v) { return v[0] * v[0] + v[1] * v[1]; }, x);
    CHECK(g == std::vector<double>{2, 4});
    CHECK(std::abs(n[0] - 2.0) < 1e-8);
    CHECK(std::abs(n[1] - 4.0) < 1e-8);
    CHECK(grad_check([](const Tensor& v) { return sum(mul(v, v)); }, x) < 1e-8);
    CHECK_THROWS_AS(grad_check([](const Tensor& v) { return sum(v); }, x, 1e-2), ContractError);
    CHECK_THROWS_AS(grad_check([](const Tensor& v) { return sum(v); }, x, 1e-9), ContractError);
  }

  TEST_CASE("every elementwise and structural op passes grad_check") {
    const Tensor b = random_tensor({4, 5}, 22);
    const Tensor bias = random_tensor({5}, 23);
    const std::size_t offsets[] = {0, 1, 4};
    const Tensor shift = random_tensor({2, 5}, 24), scl = random_tensor({2, 5}, 25), gate = random_tensor({2, 5}, 26);
    const std::size_t idx[] = {3, 0, 0, 2};
    const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> ops = {
        {"add", [&](const Tensor& x) { return weighted_sum(add(x, b), 1); }},
        {"sub", [&](const Tensor& x) { return weighted_sum(sub(b, x), 1); }},
        {"mul", [&](const Tensor& x) { return weighted_sum(mul(x, b), 1); }},
        {"scale", [&](const Tensor& x) { return weighted_sum(scale(x, -1.7), 1); }},
        {"add_bias", [&](const Tensor& x) { return weighted_sum(add_bias(x, bias), 1); }},
        {"mean", [&](const Tensor& x) { return mean(mul(x, x)); }},
        {"mse", [&](const Tensor& x) { return mse(x, b); }},
        {"softmax", [&](const Tensor& x) { return weighted_sum(softmax(x), 1); }},
        {"layer_norm", [&](const Tensor& x) { return weighted_sum(layer_norm(x), 1); }},
        {"gelu", [&](const Tensor& x) { return weighted_sum(gelu(x), 1); }},
        {"silu", [&](const Tensor& x) { return weighted_sum(silu(x), 1); }},
        {"slice_cols", [&](const Tensor& x) { return weighted_sum(slice_cols(x, 1, 3), 1); }},
        {"gather_rows", [&](const Tensor& x) { return weighted_sum(gather_rows(x, idx), 1); }},
        {"modulate", [&](const Tensor& x) { return weighted_sum(modulate(x, shift, scl, offsets), 1); }},
        {"gated_residual", [&](const Tensor& x) { return weighted_sum(gated_residual(b, x, gate, offsets), 1); }},
        {"attention", [&](const Tensor& x) {
           return weighted_sum(attention(x, matmul(x, Tensor::eye(5)), b, 1, offsets), 1);
         }},
    };
    for (const auto& [name, f] : ops) {
      CAPTURE(name);
      CHECK(grad_check(f, random_tensor({4, 5}, 27)) < 1e-5);
    }
  }

  TEST_CASE("attention matches a per-group loop and stays in the value hull") {
    const std::size_t d = 4, heads = 2, dh = 2;
    const std::size_t offsets[] = {0, 3, 5};
    const Tensor q = random_tensor({5, d}, 28), k = random_tensor({5, d}, 29), v = random_tensor({5, d}, 30);
    const Tensor y = attention(q, k, v, heads, offsets);
    for (std::size_t g = 0; g < 2; ++g)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = offsets[g]; i < offsets[g + 1]; ++i) {
          std::vector<long double> s;
          long double mx = -1e300L;
          for (std::size_t j = offsets[g]; j < offsets[g + 1]; ++j) {
            long double acc = 0.0L;
            for (std::size_t c = 0; c < dh; ++c) acc += static_cast<long double>(q.at(i, h * dh + c)) * k.at(j, h * dh + c);
            s.push_back(acc / std::sqrt(static_cast<long double>(dh)));
            mx = std::max(mx, s.back());
          }
          long double z = 0.0L;
          for (auto& e : s) z += (e = std::exp(e - mx));
          for (std::size_t c = 0; c < dh; ++c) {
            long double out = 0.0L, lo = 1e300L, hi = -1e300L;
            for (std::size_t j = offsets[g]; j < offsets[g + 1]; ++j) {
              const long double vj = v.at(j, h * dh + c);
              out += s[j - offsets[g]] / z * vj;
              lo = std::min(lo, vj);
              hi = std::max(hi, vj);
            }
            const double got = y.at(i, h * dh + c);
            CHECK(std::abs(got - static_cast<double>(out)) < 1e-12);
            CHECK(got >= static_cast<double>(lo) - 1e-12);
            CHECK(got <= static_cast<double>(hi) + 1e-12);
          }
        }
  }
}
