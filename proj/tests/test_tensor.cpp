#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "slb/gradcheck.hpp"
#include "slb/ops.hpp"
#include "slb/tensor.hpp"

using namespace slb;

TEST_CASE("conv2d: all-ones 3x3 kernel over all-ones 3x3 input sums to 9") {
  Tensor x = Tensor::ones({1, 1, 3, 3});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor y = conv2d(x, w, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0));
}

TEST_CASE("conv2d: identity kernel with pad 1 reproduces the input") {
  Tensor x = oracle::random_tensor({2, 1, 5, 5}, 42);
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;  // center tap
  Tensor w = Tensor::from_data({1, 1, 3, 3}, k);
  Tensor y = conv2d(x, w, 1, 1);
  CHECK(oracle::max_abs_diff(y, x) == doctest::Approx(0.0));
}

TEST_CASE("conv2d: matches the sextuple-loop reference within 1e-12") {
  Tensor x = oracle::random_tensor({2, 3, 8, 8}, 1);
  Tensor w = oracle::random_tensor({4, 3, 3, 3}, 2);
  for (auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}}) {
    Tensor y = conv2d(x, w, stride, pad);
    Tensor ref = oracle::conv2d_reference(x, w, stride, pad);
    CHECK(y.shape() == ref.shape());
    CHECK(oracle::max_abs_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("conv2d: rejects channel mismatch with a dimension message") {
  Tensor x = Tensor::ones({1, 3, 4, 4});
  Tensor w = Tensor::ones({2, 4, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d(x, w, 1, 0), doctest::Contains("channels"),
                       std::invalid_argument);
}

TEST_CASE("softmax: examples and stability") {
  Tensor t = Tensor::from_data({2}, {0.0, 0.0});
  auto y = softmax(t, 0);
  CHECK(y.data()[0] == doctest::Approx(0.5));

  Tensor t2 = Tensor::from_data({2}, {1.0, 0.0});
  auto y2 = softmax(t2, 0);
  CHECK(y2.data()[0] == doctest::Approx(0.73105858).epsilon(1e-7));
  CHECK(y2.data()[1] == doctest::Approx(0.26894142).epsilon(1e-7));

  Tensor t3 = Tensor::from_data({2}, {1000.0, 0.0});
  auto y3 = softmax(t3, 0);
  CHECK(y3.data()[0] == 1.0);
  CHECK(y3.data()[1] == 0.0);
}

TEST_CASE("softmax: sums to one along the reduced axis within 1e-12") {
  Tensor t = oracle::random_tensor({3, 7, 2}, 5, 3.0);
  for (int axis = 0; axis < 3; ++axis) {
    Tensor y = softmax(t, axis);
    Tensor s = sum(y, axis, false);
    for (std::int64_t i = 0; i < s.numel(); ++i) {
      CHECK(std::abs(s.data()[static_cast<std::size_t>(i)] - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("broadcasting matches a naive reference over assorted rank<=5 shapes") {
  const std::vector<std::pair<Shape, Shape>> cases = {
      {{2, 3}, {3}},
      {{4, 1, 5}, {2, 5}},
      {{2, 3, 1, 4, 2}, {1, 3, 2, 1, 2}},
      {{1}, {3, 2, 2}},
      {{5, 4}, {5, 4}},
      {{2, 1, 3, 1, 2}, {2, 2, 1, 4, 1}},
  };
  int k = 0;
  for (const auto& [sa, sb] : cases) {
    Tensor a = oracle::random_tensor(sa, 100 + k, 1.0);
    Tensor b = oracle::random_tensor(sb, 200 + k, 1.0);
    ++k;
    CHECK(oracle::max_abs_diff(add(a, b), oracle::broadcast_reference(
                                              a, b, [](double x, double y) { return x + y; })) == 0.0);
    CHECK(oracle::max_abs_diff(mul(a, b), oracle::broadcast_reference(
                                              a, b, [](double x, double y) { return x * y; })) == 0.0);
  }
  CHECK_THROWS_AS(add(Tensor::ones({2, 3}), Tensor::ones({2, 4})), std::invalid_argument);
}

TEST_CASE("backward: gradient of sum is ones; gradient of sum(w^2)/2 is w") {
  Tensor w = oracle::random_tensor({3, 4}, 9, 1.0, true);
  sum(w).backward();
  for (double g : w.grad()) CHECK(g == 1.0);

  Tensor w2 = oracle::random_tensor({5}, 10, 1.0, true);
  mul_scalar(sum(square(w2)), 0.5).backward();
  for (std::int64_t i = 0; i < 5; ++i) {
    CHECK(w2.grad()[static_cast<std::size_t>(i)] ==
          doctest::Approx(w2.data()[static_cast<std::size_t>(i)]));
  }
}

TEST_CASE("backward: non-scalar loss and double backward are errors") {
  Tensor w = Tensor::ones({3}, true);
  Tensor y = mul_scalar(w, 2.0);
  CHECK_THROWS_AS(y.backward(), std::invalid_argument);

  Tensor loss = sum(y);
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), std::runtime_error);

  // Reusing a consumed intermediate without re-recording is also an error.
  Tensor loss2 = sum(mul_scalar(y, 3.0));
  CHECK_THROWS_AS(loss2.backward(), std::runtime_error);
}

TEST_CASE("backward: every reachable requires_grad tensor ends up with a grad") {
  Tensor a = Tensor::ones({2, 2}, true);
  Tensor b = Tensor::ones({2, 2}, true);
  Tensor loss = sum(mul(a, b));
  loss.backward();
  CHECK(a.has_grad());
  CHECK(b.has_grad());
}

TEST_CASE("no-grad mode records nothing") {
  Tensor w = Tensor::ones({3}, true);
  NoGradGuard ng;
  Tensor y = sum(square(w));
  CHECK(y.is_leaf());
}

TEST_CASE("gradcheck battery: tensor-scope adjoints match central differences") {
  for (const auto& r : run_gradchecks("tensor", 11)) {
    CAPTURE(r.name);
    CHECK(r.max_rel_error < kGradCheckTolerance);
  }
}

TEST_CASE("gradcheck: corrupted adjoint is detected (negative control)") {
  set_softmax_adjoint_fault(true);
  double worst = 0.0;
  for (const auto& r : run_gradchecks("tensor", 11)) worst = std::max(worst, r.max_rel_error);
  set_softmax_adjoint_fault(false);
  CHECK(worst > kGradCheckTolerance);
}

TEST_CASE("forward and backward are bit-identical across thread counts") {
  Tensor x = oracle::random_tensor({4, 3, 10, 10}, 21);
  Tensor w = oracle::random_tensor({8, 3, 3, 3}, 22);

  auto run = [&](int threads) {
    set_num_threads(threads);
    Tensor xi = Tensor::from_data(x.shape(), {x.data().begin(), x.data().end()}, true);
    Tensor wi = Tensor::from_data(w.shape(), {w.data().begin(), w.data().end()}, true);
    Tensor y = conv2d(xi, wi, 1, 1);
    Tensor loss = sum(square(y));
    loss.backward();
    std::vector<std::vector<double>> out;
    out.emplace_back(y.data().begin(), y.data().end());
    out.emplace_back(xi.grad().begin(), xi.grad().end());
    out.emplace_back(wi.grad().begin(), wi.grad().end());
    return out;
  };

  auto one = run(1);
  auto two = run(2);
  set_num_threads(0);
  REQUIRE(one.size() == two.size());
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(one[i] == two[i]);
}

TEST_CASE("maxpool and reductions behave") {
  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0, 3.0, 2.0, -1.0});
  Tensor p = maxpool2d(x, 2, 2);
  CHECK(p.item() == 3.0);

  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s0 = sum(t, 0, false);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.data()[0] == 5.0);
  Tensor m1 = mean(t, 1, true);
  CHECK(m1.shape() == Shape{2, 1});
  CHECK(m1.data()[0] == doctest::Approx(2.0));
  CHECK(mean(t).item() == doctest::Approx(3.5));
}
