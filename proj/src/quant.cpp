#include "slb/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "op_common.hpp"
#include "slb/rng.hpp"

namespace slb {

bool valid_bitwidth(int q) { return q == 1 || q == 2 || q == 4 || q == 8 || q == 32; }

QuantGrid uniform_grid(int q) {
  if (q < 1 || q > 8) {
    throw std::invalid_argument("uniform_grid: bitwidth must be in [1,8], got " +
                                std::to_string(q));
  }
  const std::int64_t m = std::int64_t{1} << q;
  QuantGrid grid;
  grid.q = q;
  grid.values.resize(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    grid.values[static_cast<std::size_t>(i)] =
        -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(m - 1);
  }
  grid.thresholds.resize(static_cast<std::size_t>(m - 1));
  for (std::int64_t i = 0; i + 1 < m; ++i) {
    grid.thresholds[static_cast<std::size_t>(i)] =
        0.5 * (grid.values[static_cast<std::size_t>(i)] + grid.values[static_cast<std::size_t>(i + 1)]);
  }
  return grid;
}

std::int64_t quantize_index(double x, const QuantGrid& grid) {
  // First interval whose threshold exceeds x; x == threshold goes up.
  const auto it = std::upper_bound(grid.thresholds.begin(), grid.thresholds.end(), x,
                                   [](double v, double t) { return v < t; });
  return static_cast<std::int64_t>(it - grid.thresholds.begin());
}

double quantize_value(double x, const QuantGrid& grid) {
  return grid.values[static_cast<std::size_t>(quantize_index(x, grid))];
}

Tensor quantize(const Tensor& x, const QuantGrid& grid) {
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* px = x.data().data();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    out[static_cast<std::size_t>(i)] = quantize_value(px[i], grid);
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

Tensor ste_quantize(const Tensor& latent, const QuantGrid& grid) {
  Tensor out = quantize(latent, grid);
  if (detail::wants_grad({&latent})) {
    auto li = latent.impl();
    detail::attach_node(out, {li}, [li](detail::TensorImpl& self) {
      if (!li->requires_grad && li->parents.empty() && !li->backward_fn) return;
      li->ensure_grad();
      const double* g = self.grad.data();
      const double* lat = li->data.data();
      double* dst = li->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(self.grad.size());
      for (std::int64_t i = 0; i < n; ++i) {
        if (std::abs(lat[i]) <= 1.0) dst[i] += g[i];
      }
    });
  }
  return out;
}

Tensor ste_backward(const Tensor& grad_wq, const Tensor& latent) {
  if (grad_wq.shape() != latent.shape()) {
    throw std::invalid_argument("ste_backward: shape mismatch " + shape_str(grad_wq.shape()) +
                                " vs " + shape_str(latent.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(grad_wq.numel()));
  const double* g = grad_wq.data().data();
  const double* lat = latent.data().data();
  for (std::int64_t i = 0; i < grad_wq.numel(); ++i) {
    out[static_cast<std::size_t>(i)] = std::abs(lat[i]) <= 1.0 ? g[i] : 0.0;
  }
  return Tensor::from_data(grad_wq.shape(), std::move(out));
}

namespace {

double round_half_away(double x) {
  return x >= 0.0 ? std::floor(x + 0.5) : std::ceil(x - 0.5);
}

}  // namespace

Tensor act_quantize(const Tensor& a, int q_a) {
  if (!valid_bitwidth(q_a)) {
    throw std::invalid_argument("act_quantize: bitwidth must be one of {1,2,4,8,32}, got " +
                                std::to_string(q_a));
  }
  if (q_a == 32) return a;

  const double levels = static_cast<double>((std::int64_t{1} << q_a) - 1);
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    const std::int64_t n = a.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (n > 16384 && num_threads() > 1)
#endif
    for (std::int64_t i = 0; i < n; ++i) {
      const double c = std::clamp(pa[i], 0.0, 1.0);
      po[i] = round_half_away(c * levels) / levels;
    }
  }

  if (detail::wants_grad({&a})) {
    auto ai = a.impl();
    detail::attach_node(out, {ai}, [ai](detail::TensorImpl& self) {
      if (!ai->requires_grad && ai->parents.empty() && !ai->backward_fn) return;
      ai->ensure_grad();
      const double* g = self.grad.data();
      const double* src = ai->data.data();
      double* dst = ai->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(self.grad.size());
      for (std::int64_t i = 0; i < n; ++i) {
        if (src[i] >= 0.0 && src[i] <= 1.0) dst[i] += g[i];
      }
    });
  }
  return out;
}

SteWeight SteWeight::create(const Shape& shape, const QuantGrid& grid, std::uint64_t seed) {
  if (shape.size() < 2) {
    throw std::invalid_argument("SteWeight: weight must have rank >= 2");
  }
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Rng rng(seed);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : data) v = rng.normal(0.0, stddev);
  SteWeight w;
  w.latent = Tensor::from_data(shape, std::move(data), true);
  w.grid = grid;
  return w;
}

void SteWeight::clamp_latent() {
  for (double& v : latent.mutable_data()) v = std::clamp(v, -1.0, 1.0);
}

}  // namespace slb
