#include "slb/search.hpp"

#include <cmath>
#include <stdexcept>

#include "op_common.hpp"
#include "slb/ops.hpp"
#include "slb/rng.hpp"

namespace slb {

namespace {

void check_logits_shape(const Shape& shape, const QuantGrid& grid) {
  if (shape.size() < 2) {
    throw std::invalid_argument("searchable weight: logits must be [m, d1..dn], got " +
                                shape_str(shape));
  }
  if (shape[0] != grid.size()) {
    throw std::invalid_argument("searchable weight: value axis extent " +
                                std::to_string(shape[0]) + " does not match grid size " +
                                std::to_string(grid.size()));
  }
}

void check_tau(double tau) {
  if (!(tau > 0.0)) {
    throw std::invalid_argument("searchable weight: temperature must be positive, got " +
                                std::to_string(tau));
  }
}

}  // namespace

Tensor init_logits(const Shape& logits_shape, const QuantGrid& grid, std::uint64_t seed) {
  check_logits_shape(logits_shape, grid);
  // fan_in over the weight dims excluding the value axis and the output
  // channel: for conv logits [m, M, N, Dk, Dk] this is N*Dk*Dk.
  std::int64_t fan_in = 1;
  for (std::size_t i = 2; i < logits_shape.size(); ++i) fan_in *= logits_shape[i];
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Rng rng(seed);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(logits_shape)));
  for (double& v : data) v = rng.normal(0.0, stddev);
  return Tensor::from_data(logits_shape, std::move(data), true);
}

SearchableWeight SearchableWeight::create(const Shape& weight_shape, const QuantGrid& grid,
                                          std::uint64_t seed) {
  Shape logits_shape;
  logits_shape.push_back(grid.size());
  logits_shape.insert(logits_shape.end(), weight_shape.begin(), weight_shape.end());
  SearchableWeight w;
  w.grid = grid;
  w.logits = init_logits(logits_shape, grid, seed);
  return w;
}

Shape SearchableWeight::weight_shape() const {
  const Shape& s = logits.shape();
  return Shape(s.begin() + 1, s.end());
}

Tensor probabilities(const SearchableWeight& w, double tau) {
  check_tau(tau);
  check_logits_shape(w.logits.shape(), w.grid);
  Tensor p = softmax(mul_scalar(w.logits, 1.0 / tau), 0);

  // Normalization is part of the contract; verify it on every forward.
  const std::int64_t m = w.grid.size();
  const std::int64_t d = p.numel() / m;
  const double* pd = p.data().data();
  for (std::int64_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::int64_t i = 0; i < m; ++i) s += pd[i * d + j];
    if (std::abs(s - 1.0) > 1e-12) {
      throw std::runtime_error("searchable weight: probabilities sum to " + std::to_string(s) +
                               ", outside 1 +/- 1e-12");
    }
  }
  return p;
}

Tensor continuous_weights(const SearchableWeight& w, double tau) {
  Tensor p = probabilities(w, tau);
  Shape vshape(w.logits.shape().size(), 1);
  vshape[0] = w.grid.size();
  Tensor values = Tensor::from_data(vshape, w.grid.values);
  return sum(mul(p, values), 0, false);
}

Tensor discrete_weights(const SearchableWeight& w) {
  const std::int64_t m = w.grid.size();
  const std::int64_t d = w.logits.numel() / m;
  const double* a = w.logits.data().data();
  std::vector<double> out(static_cast<std::size_t>(d));
  for (std::int64_t j = 0; j < d; ++j) {
    // softmax is monotone, so the argmax over A equals the argmax over P.
    // Ties resolve to the lowest index.
    std::int64_t best = 0;
    double bv = a[j];
    for (std::int64_t i = 1; i < m; ++i) {
      const double v = a[i * d + j];
      if (v > bv) {
        bv = v;
        best = i;
      }
    }
    out[static_cast<std::size_t>(j)] = w.grid.values[static_cast<std::size_t>(best)];
  }
  return Tensor::from_data(w.weight_shape(), std::move(out));
}

Tensor quantization_gap(const SearchableWeight& w, double tau) {
  check_tau(tau);
  NoGradGuard ng;
  Tensor wq = discrete_weights(w);
  Tensor wc = continuous_weights(w, tau);
  return sub(wq, wc);
}

double frozen_fraction(const SearchableWeight& w, double tau, double threshold) {
  check_tau(tau);
  if (!(threshold > 0.5 && threshold < 1.0)) {
    throw std::invalid_argument("freeze: threshold must lie in (0.5, 1), got " +
                                std::to_string(threshold));
  }
  NoGradGuard ng;
  Tensor p = probabilities(w, tau);
  const std::int64_t m = w.grid.size();
  const std::int64_t d = p.numel() / m;
  const double* pd = p.data().data();
  std::int64_t frozen = 0;
  for (std::int64_t j = 0; j < d; ++j) {
    double mx = pd[j];
    for (std::int64_t i = 1; i < m; ++i) mx = std::max(mx, pd[i * d + j]);
    if (mx > threshold) ++frozen;
  }
  return static_cast<double>(frozen) / static_cast<double>(d);
}

FreezeReport freeze_report(
    const std::vector<std::pair<std::string, const SearchableWeight*>>& layers, double tau,
    double threshold) {
  FreezeReport report;
  report.threshold = threshold;
  std::int64_t total = 0;
  double frozen = 0.0;
  for (const auto& [name, w] : layers) {
    const double f = frozen_fraction(*w, tau, threshold);
    const std::int64_t d = w->logits.numel() / w->grid.size();
    report.per_layer.emplace_back(name, f);
    frozen += f * static_cast<double>(d);
    total += d;
  }
  report.fraction_frozen = total == 0 ? 0.0 : frozen / static_cast<double>(total);
  return report;
}

}  // namespace slb
