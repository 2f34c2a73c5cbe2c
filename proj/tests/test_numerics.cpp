// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "amoe/errors.hpp"
#include "amoe/ops.hpp"
#include "amoe/tensor.hpp"

using namespace amoe;

namespace {

// relative error with an absolute floor, the tolerance used by every
// gradient check in this suite
double rel_err(double got, double want, double floor_ = 1e-7) {
  const double denom = std::max({std::abs(got), std::abs(want), floor_});
  return std::abs(got - want) / denom;
}

void check_grads_match(const std::vector<double>& got, const std::vector<double>& want,
                       double tol = 1e-4) {
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) {
    INFO("element ", i, ": reverse=", got[i], " fd=", want[i]);
    CHECK(rel_err(got[i], want[i]) < tol);
  }
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  Tensor out = matmul(eye, b);
  CHECK(*out.data == std::vector<double>{3, 4, 5, 6});

  Tensor r = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  CHECK(r.scalar() == doctest::Approx(11.0).epsilon(1e-12));

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("(2x3)") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(42);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
  auto loss_fn = [&]() {
    NoGradGuard ng;
    return mean_all(mul(matmul(a, b), matmul(a, b))).scalar();
  };
  a.ensure_grad();
  b.ensure_grad();
  Tensor prod = matmul(a, b);
  Tensor loss = mean_all(mul(prod, prod));
  backward(loss);
  check_grads_match(*a.grad, finite_difference_grad(loss_fn, *a.data), 1e-6);
  check_grads_match(*b.grad, finite_difference_grad(loss_fn, *b.data), 1e-6);
}

TEST_CASE("softmax basics") {
  Tensor u = softmax(Tensor::from({4}, {0, 0, 0, 0}), 1);
  for (double v : *u.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  // shift invariance forces finiteness on extreme logits
  Tensor big = softmax(Tensor::from({2}, {1000, 0}), 1);
  CHECK((*big.data)[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((*big.data)[1] >= 0.0);
  CHECK(std::isfinite((*big.data)[1]));

  // direct evaluation of the routing softmax on [1,2,3]
  Tensor p = softmax(Tensor::from({3}, {1, 2, 3}), 1);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK((*p.data)[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK((*p.data)[0] == doctest::Approx(0.0900).epsilon(1e-3));
  CHECK((*p.data)[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK((*p.data)[2] == doctest::Approx(0.6652).epsilon(1e-3));

  CHECK_THROWS_AS(softmax(Tensor::from({2}, {std::nan(""), 0.0}), 1), NumericError);
}

TEST_CASE("softmax rows sum to one and shift-invariance holds") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = Tensor::randn({5, 9}, rng, 3.0);
    Tensor p = softmax(x, 1);
    for (long i = 0; i < 5; ++i) {
      double s = 0.0;
      for (long j = 0; j < 9; ++j) s += p.at(i, j);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    Tensor shifted = x.detached_copy();
    const double c = 13.75;
    for (double& v : *shifted.data) v += c;
    Tensor p2 = softmax(shifted, 1);
    for (long i = 0; i < p.numel(); ++i) {
      CHECK(std::abs((*p.data)[i] - (*p2.data)[i]) < 1e-12);
    }
  }
}

TEST_CASE("softmax along axis 0") {
  Tensor x = Tensor::from({2, 2}, {0, 1, 0, 3});
  Tensor p = softmax(x, 0);
  CHECK(p.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.at(0, 1) + p.at(1, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.at(1, 1) > p.at(0, 1));
}

TEST_CASE("cross entropy hand values") {
  // uniform logits over V=4
  Tensor logits = Tensor::zeros({3, 4});
  Tensor loss = cross_entropy(logits, {0, 2, 3}, {true, true, true});
  CHECK(loss.scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // saturated correct logit
  Tensor hot = Tensor::zeros({1, 4});
  hot.at(0, 1) = 1000.0;
  CHECK(cross_entropy(hot, {1}, {true}).scalar() == doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_AS(cross_entropy(logits, {0, 1, 2}, {false, false, false}), ValidationError);
}

TEST_CASE("cross entropy matches per-position brute force") {
  Rng rng(11);
  Tensor logits = Tensor::randn({2, 5}, rng, 2.0);
  std::vector<int> targets = {3, 1};
  Tensor loss = cross_entropy(logits, targets, {true, true});
  // independent evaluation: -mean(log softmax) summed by hand
  double want = 0.0;
  for (long i = 0; i < 2; ++i) {
    double z = 0.0;
    for (long j = 0; j < 5; ++j) z += std::exp(logits.at(i, j));
    want += -std::log(std::exp(logits.at(i, targets[i])) / z);
  }
  want /= 2.0;
  CHECK(loss.scalar() == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("finite difference oracle sanity") {
  std::vector<double> x = {3.0};
  auto f = [&]() { return x[0] * x[0]; };
  auto g = finite_difference_grad(f, x);
  CHECK(std::abs(g[0] - 6.0) < 1e-6);
  CHECK(x[0] == 3.0);  // restored

  // sum of softmax is identically 1, so its gradient vanishes
  std::vector<double> y = {0.3, -1.2, 2.0};
  auto fs = [&]() {
    NoGradGuard ng;
    return sum_all(softmax(Tensor::from({3}, y), 1)).scalar();
  };
  for (double gi : finite_difference_grad(fs, y)) CHECK(std::abs(gi) < 1e-9);
}

TEST_CASE("reverse mode matches finite differences on composite graphs") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
    Tensor w = Tensor::randn({3, 6}, rng, 0.5, true);
    Tensor b = Tensor::randn({3}, rng, 0.5, true);
    Tensor g = Tensor::randn({6}, rng, 0.2, true);
    for (double& v : *g.data) v += 1.0;
    std::vector<int> targets = {0, 2, 1, 2};
    std::vector<bool> mask = {true, true, false, true};

    auto graph = [&]() {
      Tensor h = rmsnorm(x, g);
      Tensor z = add_rowvec(matmul_nt(h, w), b);
      Tensor s = silu(z);
      Tensor p = softmax(z, 1);
      Tensor ce = cross_entropy(z, targets, mask);
      return add(ce, add(mean_all(mul(s, p)), scale(mean_all(sigmoid(z)), 0.5)));
    };
    auto loss_fn = [&]() {
      NoGradGuard ng;
      return graph().scalar();
    };

    Tensor loss = graph();
    backward(loss);
    check_grads_match(*x.grad, finite_difference_grad(loss_fn, *x.data));
    check_grads_match(*w.grad, finite_difference_grad(loss_fn, *w.data));
    check_grads_match(*b.grad, finite_difference_grad(loss_fn, *b.data));
    check_grads_match(*g.grad, finite_difference_grad(loss_fn, *g.data));
  }
}

TEST_CASE("gather, scatter and normalize gradients") {
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn({5, 4}, rng, 1.0, true);
    for (double& v : *x.data) v = std::abs(v) + 0.1;  // keep row sums positive
    std::vector<std::vector<long>> idx = {{0, 2}, {1, 3}, {3, 0}, {2, 2}, {1, 0}};
    std::vector<long> rsel = {4, 1, 2};

    auto graph = [&]() {
      Tensor w = normalize_rows(gather_per_row(x, idx));
      Tensor sub = rows(x, rsel);
      Tensor back = scatter_rows(sub, rsel, 5);
      Tensor weighted = mul_colvec(back, column(x, 1));
      return add(mean_all(w), mean_all(weighted));
    };
    auto loss_fn = [&]() {
      NoGradGuard ng;
      return graph().scalar();
    };
    Tensor loss = graph();
    backward(loss);
    check_grads_match(*x.grad, finite_difference_grad(loss_fn, *x.data));
  }
}

TEST_CASE("frozen parameters accumulate exactly zero gradient") {
  Rng rng(5);
  Parameter w(Tensor::randn({3, 3}, rng, 1.0), ParamTag{ParamKind::Router});
  Parameter v(Tensor::randn({3, 3}, rng, 1.0), ParamTag{ParamKind::Adapter});
  w.set_frozen(true);

  Tensor x = Tensor::randn({2, 3}, rng, 1.0);
  Tensor out = mean_all(matmul_nt(matmul_nt(x, w.value), v.value));
  backward(out);

  for (double gv : *w.value.grad) CHECK(gv == 0.0);  // bit-exact zero
  REQUIRE(v.value.grad != nullptr);
  double norm = 0.0;
  for (double gv : *v.value.grad) norm += std::abs(gv);
  CHECK(norm > 0.0);

  // unfreezing restores the flow
  w.set_frozen(false);
  Tensor out2 = mean_all(matmul_nt(matmul_nt(x, w.value), v.value));
  backward(out2);
  REQUIRE(w.value.grad != nullptr);
  double wnorm = 0.0;
  for (double gv : *w.value.grad) wnorm += std::abs(gv);
  CHECK(wnorm > 0.0);
}

TEST_CASE("gradient flows through frozen parameters to earlier nodes") {
  Rng rng(6);
  Parameter frozen(Tensor::randn({3, 3}, rng, 1.0), ParamTag{ParamKind::Router});
  frozen.set_frozen(true);
  Tensor x = Tensor::randn({2, 3}, rng, 1.0, true);
  Tensor out = mean_all(matmul_nt(x, frozen.value));
  backward(out);
  REQUIRE(x.grad != nullptr);
  double norm = 0.0;
  for (double gv : *x.grad) norm += std::abs(gv);
  CHECK(norm > 0.0);
}
