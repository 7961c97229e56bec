#include "slb/sbn.hpp"

#include <cmath>
#include <stdexcept>

#include "slb/ops.hpp"

namespace slb {

SbnLayer::SbnLayer(std::int64_t channels, double momentum, double eps, std::uint64_t)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  if (channels < 1) throw std::invalid_argument("sbn: channels must be >= 1");
  gamma = Tensor::ones({channels}, true);
  beta = Tensor::zeros({channels}, true);
  mean_c_.assign(static_cast<std::size_t>(channels), 0.0);
  var_c_.assign(static_cast<std::size_t>(channels), 1.0);
  mean_q_.assign(static_cast<std::size_t>(channels), 0.0);
  var_q_.assign(static_cast<std::size_t>(channels), 1.0);
}

void SbnLayer::check_input(const Tensor& y) const {
  if (y.rank() != 4) {
    throw std::invalid_argument("sbn: input must be [B,C,H,W], got " + shape_str(y.shape()));
  }
  if (y.dim(1) != channels_) {
    throw std::invalid_argument("sbn: channel extent " + std::to_string(y.dim(1)) +
                                " does not match layer channels " + std::to_string(channels_));
  }
}

std::vector<double>& SbnLayer::running_mean(Track track) {
  return track == Track::Continuous ? mean_c_ : mean_q_;
}
std::vector<double>& SbnLayer::running_var(Track track) {
  return track == Track::Continuous ? var_c_ : var_q_;
}
const std::vector<double>& SbnLayer::running_mean(Track track) const {
  return track == Track::Continuous ? mean_c_ : mean_q_;
}
const std::vector<double>& SbnLayer::running_var(Track track) const {
  return track == Track::Continuous ? var_c_ : var_q_;
}

bool SbnLayer::track_initialized(Track track) const {
  return track == Track::Continuous ? init_c_ : init_q_;
}

void SbnLayer::mark_initialized(Track track, bool value) {
  (track == Track::Continuous ? init_c_ : init_q_) = value;
}

void SbnLayer::mirror_continuous_to_discrete() {
  mean_q_ = mean_c_;
  var_q_ = var_c_;
  init_q_ = init_c_;
}

Tensor SbnLayer::forward(const Tensor& y, Track track, bool training) {
  check_input(y);
  const std::int64_t count = y.dim(0) * y.dim(2) * y.dim(3);
  Tensor gamma_r = reshape(gamma, {1, channels_, 1, 1});
  Tensor beta_r = reshape(beta, {1, channels_, 1, 1});

  if (training) {
    if (count < 2) throw std::invalid_argument("sbn: training batch too small to normalize");
    // Batch statistics over (B,H,W), biased variance.
    Tensor mu = mean(mean(mean(y, 0, true), 2, true), 3, true);          // [1,C,1,1]
    Tensor centered = sub(y, mu);
    Tensor var = mean(mean(mean(square(centered), 0, true), 2, true), 3, true);
    Tensor xhat = div(centered, sqrt(add_scalar(var, eps_)));
    Tensor out = add(mul(gamma_r, xhat), beta_r);

    // EMA update; running variance carries the unbiased correction.
    auto& rm = running_mean(track);
    auto& rv = running_var(track);
    const double* mu_d = mu.data().data();
    const double* var_d = var.data().data();
    const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
    for (std::int64_t c = 0; c < channels_; ++c) {
      rm[static_cast<std::size_t>(c)] =
          (1.0 - momentum_) * rm[static_cast<std::size_t>(c)] + momentum_ * mu_d[c];
      rv[static_cast<std::size_t>(c)] =
          (1.0 - momentum_) * rv[static_cast<std::size_t>(c)] + momentum_ * var_d[c] * unbias;
    }
    mark_initialized(track);
    return out;
  }

  if (!track_initialized(track)) {
    throw std::runtime_error("sbn: statistics for the requested track are uninitialized; "
                             "run a training update or load a checkpoint first");
  }
  const auto& rm = running_mean(track);
  const auto& rv = running_var(track);
  std::vector<double> scale(static_cast<std::size_t>(channels_));
  std::vector<double> shift(static_cast<std::size_t>(channels_));
  for (std::int64_t c = 0; c < channels_; ++c) {
    scale[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(rv[static_cast<std::size_t>(c)] + eps_);
    shift[static_cast<std::size_t>(c)] = -rm[static_cast<std::size_t>(c)] * scale[static_cast<std::size_t>(c)];
  }
  Tensor scale_t = Tensor::from_data({1, channels_, 1, 1}, std::move(scale));
  Tensor shift_t = Tensor::from_data({1, channels_, 1, 1}, std::move(shift));
  Tensor xhat = add(mul(y, scale_t), shift_t);
  return add(mul(gamma_r, xhat), beta_r);
}

Tensor SbnLayer::EvalNormalizer::operator()(const Tensor& y) const {
  return const_cast<SbnLayer*>(layer)->forward(y, track, false);
}

SbnLayer::EvalNormalizer SbnLayer::select_eval_mode(Track track) const {
  if (!track_initialized(track)) {
    throw std::runtime_error("sbn: statistics for the requested track are uninitialized; "
                             "run a training update or load a checkpoint first");
  }
  return EvalNormalizer{this, track};
}

}  // namespace slb
