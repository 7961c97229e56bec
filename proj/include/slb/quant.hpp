#pragma once

#include <cstdint>
#include <vector>

#include "slb/tensor.hpp"

namespace slb {

// Sorted discrete value set with the thresholds that partition the real
// line into one interval per value. Uniform grids span [-1, 1] inclusive;
// thresholds sit at the midpoints, and a value exactly on a threshold maps
// to the upper interval.
struct QuantGrid {
  int q = 0;                       // bitwidth, m = 2^q values
  std::vector<double> values;      // strictly increasing
  std::vector<double> thresholds;  // m-1 entries

  std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
  bool is_binary() const { return q == 1 && values[0] == -1.0 && values[1] == 1.0; }
};

QuantGrid uniform_grid(int q);

// Index of the interval x falls into (0-based into values).
std::int64_t quantize_index(double x, const QuantGrid& grid);
double quantize_value(double x, const QuantGrid& grid);

// Elementwise projection onto the grid. Pure data transform, no graph.
Tensor quantize(const Tensor& x, const QuantGrid& grid);

// Straight-through quantization: forward Q(latent), backward passes the
// gradient where |latent| <= 1 and zeroes it elsewhere.
Tensor ste_quantize(const Tensor& latent, const QuantGrid& grid);

// Gradient-side half of the straight-through estimator, exposed for tests
// and for optimizers that apply the clip outside a recorded graph.
Tensor ste_backward(const Tensor& grad_wq, const Tensor& latent);

// DoReFa-style activation quantization. q_a = 32 is a pass-through; other
// bitwidths clip to [0,1] and round onto {k/(2^q_a - 1)}. Rounding is
// half-away-from-zero. The backward mask passes gradient where 0 <= a <= 1.
Tensor act_quantize(const Tensor& a, int q_a);

// Latent full-precision weights trained with the STE; inference only ever
// sees Q(latent).
struct SteWeight {
  Tensor latent;
  QuantGrid grid;

  static SteWeight create(const Shape& shape, const QuantGrid& grid, std::uint64_t seed);
  Tensor forward() const { return ste_quantize(latent, grid); }
  // Keeps the latent inside the pass-through band after an update.
  void clamp_latent();
};

struct ActQuantizer {
  int q_a = 32;
  Tensor forward(const Tensor& a) const { return act_quantize(a, q_a); }
};

bool valid_bitwidth(int q);  // {1,2,4,8,32}

}  // namespace slb
