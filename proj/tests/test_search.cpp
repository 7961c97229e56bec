#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "slb/gradcheck.hpp"
#include "slb/ops.hpp"
#include "slb/rng.hpp"
#include "slb/search.hpp"

using namespace slb;

namespace {

SearchableWeight from_logits(Shape shape, std::vector<double> logits, int q) {
  SearchableWeight w;
  w.grid = uniform_grid(q);
  w.logits = Tensor::from_data(std::move(shape), std::move(logits), true);
  return w;
}

}  // namespace

TEST_CASE("probabilities: symmetry, softmax value, low-temperature saturation") {
  SearchableWeight w = from_logits({2, 1}, {0.0, 0.0}, 1);
  for (double tau : {0.5, 1.0, 7.0}) {
    Tensor p = probabilities(w, tau);
    CHECK(p.data()[0] == doctest::Approx(0.5));
    CHECK(p.data()[1] == doctest::Approx(0.5));
  }

  SearchableWeight w2 = from_logits({2, 1}, {1.0, 0.0}, 1);
  Tensor p2 = probabilities(w2, 1.0);
  CHECK(p2.data()[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(p2.data()[1] == doctest::Approx(0.2689).epsilon(1e-4));

  Tensor p3 = probabilities(w2, 0.01);
  CHECK(p3.data()[0] == 1.0);
  CHECK(p3.data()[1] == 0.0);

  CHECK_THROWS_AS(probabilities(w2, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(probabilities(w2, -1.0), std::invalid_argument);
}

TEST_CASE("continuous_weights: expectation of grid values") {
  // P = [0.25, 0.75] over {-1,+1} -> 0.5; encode via logits log(p).
  SearchableWeight w = from_logits({2, 1}, {std::log(0.25), std::log(0.75)}, 1);
  CHECK(continuous_weights(w, 1.0).data()[0] == doctest::Approx(0.5));

  // Uniform distribution over the symmetric 2-bit grid has expectation 0.
  SearchableWeight w2 = from_logits({4, 1}, {0, 0, 0, 0}, 2);
  CHECK(continuous_weights(w2, 3.0).data()[0] == doctest::Approx(0.0));

  // Near-one-hot collapses Wc onto Wq.
  SearchableWeight w3 = from_logits({2, 1}, {80.0, 0.0}, 1);
  CHECK(continuous_weights(w3, 1.0).data()[0] == doctest::Approx(-1.0));
  CHECK(discrete_weights(w3).data()[0] == -1.0);
}

TEST_CASE("continuous_weights: always a convex combination within the grid range") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int q = trial % 2 ? 1 : 2;
    SearchableWeight w;
    w.grid = uniform_grid(q);
    w.logits = oracle::random_tensor({w.grid.size(), 3, 2, 2}, 50 + trial, 2.0, true);
    Tensor wc = continuous_weights(w, rng.uniform(0.05, 5.0));
    for (double v : wc.data()) {
      CHECK(v >= -1.0 - 1e-12);
      CHECK(v <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("discrete_weights: argmax selection, lowest-index tie break, tau invariance") {
  SearchableWeight w = from_logits({2, 1}, {std::log(0.3), std::log(0.7)}, 1);
  CHECK(discrete_weights(w).data()[0] == 1.0);

  SearchableWeight tie = from_logits({2, 1}, {0.4, 0.4}, 1);
  CHECK(discrete_weights(tie).data()[0] == -1.0);

  SearchableWeight w2;
  w2.grid = uniform_grid(2);
  w2.logits = oracle::random_tensor({4, 5, 3}, 77, 1.0);
  Tensor wq = discrete_weights(w2);
  for (double tau : {0.1, 1.0, 10.0}) {
    Tensor p = probabilities(w2, tau);
    // argmax over P at any temperature matches argmax over A
    const std::int64_t d = wq.numel();
    for (std::int64_t j = 0; j < d; ++j) {
      std::int64_t best = 0;
      for (std::int64_t i = 1; i < 4; ++i) {
        if (p.data()[static_cast<std::size_t>(i * d + j)] >
            p.data()[static_cast<std::size_t>(best * d + j)]) {
          best = i;
        }
      }
      CHECK(wq.data()[static_cast<std::size_t>(j)] ==
            w2.grid.values[static_cast<std::size_t>(best)]);
    }
  }

  // Adding a constant to all logits at a position leaves the argmax alone.
  SearchableWeight shifted = w2;
  std::vector<double> moved(w2.logits.data().begin(), w2.logits.data().end());
  for (double& v : moved) v += 13.5;
  shifted.logits = Tensor::from_data(w2.logits.shape(), std::move(moved));
  CHECK(oracle::max_abs_diff(discrete_weights(shifted), wq) == 0.0);
}

TEST_CASE("quantization_gap: values and annealing behavior") {
  SearchableWeight onehot = from_logits({2, 1}, {90.0, 0.0}, 1);
  CHECK(std::abs(quantization_gap(onehot, 0.5).data()[0]) < 1e-12);

  SearchableWeight w = from_logits({2, 1}, {std::log(0.25), std::log(0.75)}, 1);
  CHECK(quantization_gap(w, 1.0).data()[0] == doctest::Approx(0.5));

  // Halving tau repeatedly drives the max gap monotonically toward zero.
  SearchableWeight w2;
  w2.grid = uniform_grid(2);
  w2.logits = oracle::random_tensor({4, 6, 4}, 31, 1.0);
  double tau = 2.0;
  double prev = 1e300;
  for (int step = 0; step < 12; ++step) {
    Tensor gap = quantization_gap(w2, tau);
    double mx = 0.0;
    for (double v : gap.data()) mx = std::max(mx, std::abs(v));
    CHECK(mx < prev);
    prev = mx;
    tau *= 0.5;
  }
  CHECK(prev < 1e-6);
}

TEST_CASE("temperature limit: gap bounded by (m-1)(vm-v1)exp(-margin/tau)") {
  Rng rng(12);
  for (int q : {1, 2, 4}) {
    const QuantGrid grid = uniform_grid(q);
    const std::int64_t m = grid.size();
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<double> logits(static_cast<std::size_t>(m));
      for (double& v : logits) v = rng.normal(0.0, 1.0);
      // enforce a unique argmax with margin >= 0.1
      std::size_t k = 0;
      for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[k]) k = i;
      }
      logits[k] += 0.1;
      double margin = 1e300;
      for (std::size_t i = 0; i < logits.size(); ++i) {
        if (i != k) margin = std::min(margin, logits[k] - logits[i]);
      }
      SearchableWeight w;
      w.grid = grid;
      w.logits = Tensor::from_data({m, 1}, logits);
      for (double tau : {1.0, 0.1, 0.01, 0.001}) {
        const double gap = std::abs(quantization_gap(w, tau).data()[0]);
        const double bound = static_cast<double>(m - 1) * 2.0 * std::exp(-margin / tau);
        CHECK(gap <= bound + 1e-15);
        if (tau == 0.001) CHECK(gap < 1e-6);
      }
    }
  }
}

TEST_CASE("init_logits: deterministic per seed, kaiming scale, shape validation") {
  const QuantGrid grid = uniform_grid(1);
  Tensor a = init_logits({2, 16, 8, 3, 3}, grid, 5);
  Tensor b = init_logits({2, 16, 8, 3, 3}, grid, 5);
  CHECK(oracle::max_abs_diff(a, b) == 0.0);
  Tensor c = init_logits({2, 16, 8, 3, 3}, grid, 6);
  CHECK(oracle::max_abs_diff(a, c) > 0.0);

  CHECK_THROWS_AS(init_logits({4, 16, 8, 3, 3}, grid, 5), std::invalid_argument);

  // Sample std over 1e6 draws within 2% of sqrt(2 / fan_in), fan_in = N*Dk*Dk.
  Tensor big = init_logits({4, 250, 10, 10, 1}, uniform_grid(2), 7);
  const double want = std::sqrt(2.0 / (10 * 10 * 1));
  double mean = 0.0;
  for (double v : big.data()) mean += v;
  mean /= static_cast<double>(big.numel());
  double var = 0.0;
  for (double v : big.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(big.numel()));
  CHECK(sd == doctest::Approx(want).epsilon(0.02));
}

TEST_CASE("freeze_report: saturated, tied, and freshly initialized layers") {
  SearchableWeight hot = from_logits({2, 1}, {10.0, 0.0}, 1);
  CHECK(frozen_fraction(hot, 0.1, 0.999) == 1.0);

  SearchableWeight tied = from_logits({2, 1}, {0.0, 0.0}, 1);
  for (double tau : {10.0, 1.0, 0.01, 1e-6}) CHECK(frozen_fraction(tied, tau, 0.999) == 0.0);

  SearchableWeight fresh;
  fresh.grid = uniform_grid(1);
  fresh.logits = init_logits({2, 32, 16, 3, 3}, fresh.grid, 17);
  CHECK(frozen_fraction(fresh, 1.0 / 0.01, 0.999) == doctest::Approx(0.0).epsilon(1e-6));

  CHECK_THROWS_AS(frozen_fraction(hot, 0.1, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(frozen_fraction(hot, 0.1, 1.0), std::invalid_argument);

  FreezeReport rep = freeze_report({{"a", &hot}, {"b", &tied}}, 0.1, 0.999);
  CHECK(rep.fraction_frozen == doctest::Approx(0.5));
  REQUIRE(rep.per_layer.size() == 2);
  CHECK(rep.per_layer[0].second == 1.0);
  CHECK(rep.per_layer[1].second == 0.0);
}

TEST_CASE("gradcheck battery: slb_search scope") {
  for (const auto& r : run_gradchecks("slb_search", 13)) {
    CAPTURE(r.name);
    CHECK(r.max_rel_error < kGradCheckTolerance);
  }
}
