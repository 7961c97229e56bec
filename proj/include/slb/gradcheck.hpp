#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "slb/tensor.hpp"

namespace slb {

// Central-difference verification of recorded adjoints. The numeric side
// only ever runs forward passes, so it stays independent of the backward
// implementation it checks.
struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
};

// loss_fn must re-record and return the scalar loss from the current
// parameter values. For tensors larger than sample_cap, a deterministic
// random subset of elements is probed (0 = probe everything).
double gradcheck_max_rel(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         double step = 1e-5, std::int64_t sample_cap = 0,
                         std::uint64_t seed = 7);

// The standard battery. Scopes: tensor, slb_search, sbn, model, all.
std::vector<GradCheckResult> run_gradchecks(const std::string& scope, std::uint64_t seed);

constexpr double kGradCheckTolerance = 1e-4;

}  // namespace slb
