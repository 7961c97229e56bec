#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "slb/gradcheck.hpp"
#include "slb/ops.hpp"
#include "slb/sbn.hpp"

using namespace slb;

TEST_CASE("sbn: constant per-channel input normalizes to zero") {
  SbnLayer sbn(3);
  Tensor y = Tensor::zeros({4, 3, 2, 2});
  auto d = y.mutable_data();
  for (std::int64_t i = 0; i < y.numel(); ++i) d[i] = static_cast<double>((i / 4) % 3) * 5.0;
  Tensor out = sbn.forward_continuous(y, true);
  for (double v : out.data()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("sbn: training output has per-channel mean 0 and variance 1") {
  Tensor y = oracle::random_tensor({16, 4, 5, 5}, 3, 2.5);
  SbnLayer sbn(4);
  Tensor out = sbn.forward_continuous(y, true);
  const std::int64_t B = 16, C = 4, HW = 25;
  for (std::int64_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < HW; ++i) mean += out.data()[static_cast<std::size_t>((b * C + c) * HW + i)];
    mean /= static_cast<double>(B * HW);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < HW; ++i) {
        const double d = out.data()[static_cast<std::size_t>((b * C + c) * HW + i)] - mean;
        var += d * d;
      }
    var /= static_cast<double>(B * HW);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("sbn: matches the two-pass reference, including a nontrivial affine") {
  Tensor y = oracle::random_tensor({8, 5, 4, 4}, 9, 1.7);
  SbnLayer sbn(5);
  std::vector<double> gamma{1.0, 0.5, 2.0, -1.0, 0.1};
  std::vector<double> beta{0.0, 1.0, -2.0, 0.25, 3.0};
  std::copy(gamma.begin(), gamma.end(), sbn.gamma.mutable_data().begin());
  std::copy(beta.begin(), beta.end(), sbn.beta.mutable_data().begin());
  Tensor out = sbn.forward_continuous(y, true);
  Tensor ref = oracle::batchnorm_reference(y, gamma, beta, sbn.eps());
  CHECK(oracle::max_abs_diff(out, ref) < 1e-10);
}

TEST_CASE("sbn: running statistics follow the EMA with unbiased variance") {
  SbnLayer sbn(1, 0.1, 1e-5);
  // batch of 4 scalars per channel: values 1,2,3,4
  Tensor y = Tensor::from_data({4, 1, 1, 1}, {1.0, 2.0, 3.0, 4.0});
  sbn.forward_continuous(y, true);
  const double mu = 2.5;
  const double biased = (2.25 + 0.25 + 0.25 + 2.25) / 4.0;
  const double unbiased = biased * 4.0 / 3.0;
  CHECK(sbn.running_mean(SbnLayer::Track::Continuous)[0] ==
        doctest::Approx(0.9 * 0.0 + 0.1 * mu));
  CHECK(sbn.running_var(SbnLayer::Track::Continuous)[0] ==
        doctest::Approx(0.9 * 1.0 + 0.1 * unbiased));

  // second identical batch advances the same recurrence
  sbn.forward_continuous(y, true);
  CHECK(sbn.running_mean(SbnLayer::Track::Continuous)[0] ==
        doctest::Approx(0.9 * (0.1 * mu) + 0.1 * mu));
  CHECK(sbn.running_var(SbnLayer::Track::Continuous)[0] ==
        doctest::Approx(0.9 * (0.9 + 0.1 * unbiased) + 0.1 * unbiased));

  // discrete track is untouched by continuous updates
  CHECK(sbn.running_mean(SbnLayer::Track::Discrete)[0] == 0.0);
  CHECK_FALSE(sbn.track_initialized(SbnLayer::Track::Discrete));
}

TEST_CASE("sbn: identical inputs drive both tracks to identical statistics") {
  SbnLayer sbn(2);
  Tensor y = oracle::random_tensor({8, 2, 3, 3}, 4, 1.0);
  for (int step = 0; step < 5; ++step) {
    sbn.forward_continuous(y, true);
    sbn.forward_discrete(y, true);
  }
  for (int c = 0; c < 2; ++c) {
    CHECK(sbn.running_mean(SbnLayer::Track::Continuous)[c] ==
          doctest::Approx(sbn.running_mean(SbnLayer::Track::Discrete)[c]));
    CHECK(sbn.running_var(SbnLayer::Track::Continuous)[c] ==
          doctest::Approx(sbn.running_var(SbnLayer::Track::Discrete)[c]));
  }
}

TEST_CASE("sbn: shifted discrete outputs are exactly what the second track corrects") {
  SbnLayer sbn(2);
  Tensor yc = oracle::random_tensor({16, 2, 3, 3}, 5, 1.0);
  Tensor yq = add_scalar(yc, 0.1);
  for (int step = 0; step < 50; ++step) {
    sbn.forward_continuous(yc, true);
    sbn.forward_discrete(yq, true);
  }
  // Normalizing y_q with its own track recenters it; the continuous-track
  // statistics leave the 0.1 shift in place.
  Tensor with_q = sbn.forward_discrete(yq, false);
  Tensor with_c = sbn.forward_continuous(yq, false);
  CHECK(oracle::max_abs_diff(with_q, with_c) > 0.05);

  double mean_q = 0.0;
  for (double v : with_q.data()) mean_q += v;
  mean_q /= static_cast<double>(with_q.numel());
  double mean_c = 0.0;
  for (double v : with_c.data()) mean_c += v;
  mean_c /= static_cast<double>(with_c.numel());
  CHECK(std::abs(mean_q) < std::abs(mean_c));
}

TEST_CASE("sbn: eval mode never mutates running statistics") {
  SbnLayer sbn(2);
  Tensor y = oracle::random_tensor({8, 2, 3, 3}, 6, 1.0);
  sbn.forward_continuous(y, true);
  auto mean_before = sbn.running_mean(SbnLayer::Track::Continuous);
  auto var_before = sbn.running_var(SbnLayer::Track::Continuous);
  sbn.forward_continuous(oracle::random_tensor({8, 2, 3, 3}, 7, 3.0), false);
  CHECK(sbn.running_mean(SbnLayer::Track::Continuous) == mean_before);
  CHECK(sbn.running_var(SbnLayer::Track::Continuous) == var_before);
}

TEST_CASE("sbn: eval mode selection and uninitialized-track errors") {
  SbnLayer sbn(2);
  Tensor y = oracle::random_tensor({8, 2, 3, 3}, 8, 1.0);
  CHECK_THROWS_AS(sbn.forward_continuous(y, false), std::runtime_error);
  CHECK_THROWS_AS(sbn.select_eval_mode(SbnLayer::Track::Discrete), std::runtime_error);

  sbn.forward_continuous(y, true);
  auto norm = sbn.select_eval_mode(SbnLayer::Track::Continuous);
  Tensor out = norm(y);
  CHECK(out.shape() == y.shape());
  CHECK_THROWS_AS(sbn.forward_discrete(y, false), std::runtime_error);
  sbn.forward_discrete(y, true);
  CHECK_NOTHROW(sbn.select_eval_mode(SbnLayer::Track::Discrete));
}

TEST_CASE("sbn: channel mismatch is rejected") {
  SbnLayer sbn(3);
  CHECK_THROWS_AS(sbn.forward_continuous(Tensor::ones({2, 4, 2, 2}), true),
                  std::invalid_argument);
  CHECK_THROWS_AS(sbn.forward_continuous(Tensor::ones({2, 3}), true), std::invalid_argument);
}

TEST_CASE("sbn: one affine pair serves both tracks") {
  SbnLayer sbn(2);
  Tensor y = oracle::random_tensor({8, 2, 3, 3}, 10, 1.0);
  sbn.forward_continuous(y, true);
  sbn.forward_discrete(y, true);

  Tensor out_c1 = sbn.forward_continuous(y, false);
  Tensor out_q1 = sbn.forward_discrete(y, false);
  // mutate the shared affine once; both eval paths move in lockstep
  sbn.gamma.mutable_data()[0] = 3.0;
  sbn.beta.mutable_data()[1] = -2.0;
  Tensor out_c2 = sbn.forward_continuous(y, false);
  Tensor out_q2 = sbn.forward_discrete(y, false);
  CHECK(oracle::max_abs_diff(out_c1, out_c2) > 0.0);
  CHECK(oracle::max_abs_diff(out_q1, out_q2) > 0.0);
  // identical stats here, so the two tracks agree before and after
  CHECK(oracle::max_abs_diff(out_c2, out_q2) < 1e-12);
}

TEST_CASE("gradcheck battery: sbn scope") {
  for (const auto& r : run_gradchecks("sbn", 15)) {
    CAPTURE(r.name);
    CHECK(r.max_rel_error < kGradCheckTolerance);
  }
}
