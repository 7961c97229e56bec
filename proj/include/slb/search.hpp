#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "slb/quant.hpp"
#include "slb/tensor.hpp"

namespace slb {

// A quantized weight represented as a distribution over its value grid.
// The logit tensor has shape [m, d1..dn]; axis 0 ranges over the grid
// values. Temperature is supplied per call by the schedule, never stored.
struct SearchableWeight {
  QuantGrid grid;
  Tensor logits;

  static SearchableWeight create(const Shape& weight_shape, const QuantGrid& grid,
                                 std::uint64_t seed);

  Shape weight_shape() const;  // logits shape minus the value axis
};

// Kaiming-initialized logits for a weight of the given shape (value axis
// prepended). fan_in is taken over the weight dims excluding the output
// channel, i.e. N*Dk*Dk for a convolution.
Tensor init_logits(const Shape& logits_shape, const QuantGrid& grid, std::uint64_t seed);

// softmax(A / tau) along the value axis. Differentiable w.r.t. A. Every
// call asserts the distributions sum to 1 within 1e-12.
Tensor probabilities(const SearchableWeight& w, double tau);

// Expectation of grid values under the distribution: sum_i P_i * v_i.
Tensor continuous_weights(const SearchableWeight& w, double tau);

// Argmax selection of grid values. Temperature-free and graph-free.
Tensor discrete_weights(const SearchableWeight& w);

// W_q - W_c at the given temperature (graph-free).
Tensor quantization_gap(const SearchableWeight& w, double tau);

struct FreezeReport {
  double threshold = 0.999;
  double fraction_frozen = 0.0;  // over all positions of all layers
  std::vector<std::pair<std::string, double>> per_layer;
};

// Share of weight positions whose max probability exceeds the threshold.
double frozen_fraction(const SearchableWeight& w, double tau, double threshold);

FreezeReport freeze_report(
    const std::vector<std::pair<std::string, const SearchableWeight*>>& layers, double tau,
    double threshold = 0.999);

}  // namespace slb
