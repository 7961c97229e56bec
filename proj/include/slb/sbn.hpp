#pragma once

#include <cstdint>
#include <vector>

#include "slb/tensor.hpp"

namespace slb {

// State Batch Normalization: one affine pair (gamma, beta), two running
// statistics tracks. The continuous track is estimated from outputs of the
// continuous-state weights and the discrete track from outputs of the
// discrete-state weights; sharing the affine pair lets an exported model
// swap statistics without retraining the scale and shift.
class SbnLayer {
 public:
  enum class Track { Continuous, Discrete };

  SbnLayer() = default;
  SbnLayer(std::int64_t channels, double momentum = 0.1, double eps = 1e-5,
           std::uint64_t unused_seed = 0);

  // Training: normalize y by its batch statistics (biased variance) and
  // update the track's running stats (unbiased variance, EMA with
  // new = (1-momentum)*old + momentum*batch). Eval: normalize by the
  // track's running statistics; requires the track to be initialized.
  Tensor forward(const Tensor& y, Track track, bool training);

  Tensor forward_continuous(const Tensor& y, bool training) {
    return forward(y, Track::Continuous, training);
  }
  Tensor forward_discrete(const Tensor& y, bool training) {
    return forward(y, Track::Discrete, training);
  }

  // Eval-time normalizer bound to one statistics track (shared affine).
  struct EvalNormalizer {
    const SbnLayer* layer;
    Track track;
    Tensor operator()(const Tensor& y) const;
  };
  EvalNormalizer select_eval_mode(Track track) const;

  bool track_initialized(Track track) const;

  std::int64_t channels() const { return channels_; }
  double momentum() const { return momentum_; }
  double eps() const { return eps_; }

  // Shared affine; exactly one storage serves both tracks.
  Tensor gamma;
  Tensor beta;

  std::vector<double>& running_mean(Track track);
  std::vector<double>& running_var(Track track);
  const std::vector<double>& running_mean(Track track) const;
  const std::vector<double>& running_var(Track track) const;
  void mark_initialized(Track track, bool value = true);

  // Copies the continuous track over the discrete one; used by training
  // modes whose forward weights are already discrete (fp32 / ste), where
  // the two tracks are the same distribution by construction.
  void mirror_continuous_to_discrete();

 private:
  void check_input(const Tensor& y) const;

  std::int64_t channels_ = 0;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  std::vector<double> mean_c_, var_c_, mean_q_, var_q_;
  bool init_c_ = false;
  bool init_q_ = false;
};

}  // namespace slb
