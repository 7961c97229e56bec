#pragma once

// Independent references the unit and acceptance tests check the library
// against. These deliberately use the most direct formulation available
// (nested loops, two-pass statistics) and share no code with the
// implementations they verify.

#include <cmath>
#include <vector>

#include "slb/rng.hpp"
#include "slb/tensor.hpp"

namespace oracle {

// Direct sextuple-loop convolution.
inline slb::Tensor conv2d_reference(const slb::Tensor& x, const slb::Tensor& w, int stride,
                                    int pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto M = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto OH = (H + 2 * pad - kh) / stride + 1;
  const auto OW = (W + 2 * pad - kw) / stride + 1;
  slb::Tensor out = slb::Tensor::zeros({B, M, OH, OW});
  auto o = out.mutable_data();
  const auto xd = x.data();
  const auto wd = w.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t m = 0; m < M; ++m)
      for (std::int64_t oh = 0; oh < OH; ++oh)
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t ki = 0; ki < kh; ++ki)
              for (std::int64_t kj = 0; kj < kw; ++kj) {
                const std::int64_t ih = oh * stride - pad + ki;
                const std::int64_t iw = ow * stride - pad + kj;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += xd[((b * C + c) * H + ih) * W + iw] * wd[((m * C + c) * kh + ki) * kw + kj];
              }
          o[((b * M + m) * OH + oh) * OW + ow] = acc;
        }
  return out;
}

// Two-pass per-channel batch normalization (biased variance), affine.
inline slb::Tensor batchnorm_reference(const slb::Tensor& y, const std::vector<double>& gamma,
                                       const std::vector<double>& beta, double eps) {
  const auto B = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
  const double n = static_cast<double>(B * H * W);
  slb::Tensor out = slb::Tensor::zeros(y.shape());
  auto o = out.mutable_data();
  const auto d = y.data();
  for (std::int64_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < H * W; ++i) mean += d[(b * C + c) * H * W + i];
    mean /= n;
    double var = 0.0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < H * W; ++i) {
        const double dd = d[(b * C + c) * H * W + i] - mean;
        var += dd * dd;
      }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < H * W; ++i) {
        const std::size_t k = static_cast<std::size_t>((b * C + c) * H * W + i);
        o[k] = gamma[static_cast<std::size_t>(c)] * (d[k] - mean) * inv +
               beta[static_cast<std::size_t>(c)];
      }
  }
  return out;
}

// Naive broadcast binary op on explicit index arithmetic.
template <typename F>
slb::Tensor broadcast_reference(const slb::Tensor& a, const slb::Tensor& b, F f) {
  const std::size_t rank = std::max(a.shape().size(), b.shape().size());
  auto pad = [rank](const slb::Shape& s) {
    slb::Shape p(rank, 1);
    std::copy(s.begin(), s.end(), p.begin() + static_cast<std::ptrdiff_t>(rank - s.size()));
    return p;
  };
  const slb::Shape as = pad(a.shape()), bs = pad(b.shape());
  slb::Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = std::max(as[i], bs[i]);
  slb::Tensor out = slb::Tensor::zeros(os);
  auto o = out.mutable_data();
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<std::int64_t> idx(rank, 0);
  for (std::int64_t flat = 0; flat < out.numel(); ++flat) {
    std::int64_t ra = 0, rb = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      ra = ra * as[d] + (as[d] == 1 ? 0 : idx[d]);
      rb = rb * bs[d] + (bs[d] == 1 ? 0 : idx[d]);
    }
    o[static_cast<std::size_t>(flat)] = f(ad[ra], bd[rb]);
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  return out;
}

inline slb::Tensor random_tensor(const slb::Shape& shape, std::uint64_t seed, double scale = 1.0,
                                 bool requires_grad = false) {
  slb::Rng rng(seed);
  std::vector<double> data(static_cast<std::size_t>(slb::shape_numel(shape)));
  for (double& v : data) v = rng.normal(0.0, scale);
  return slb::Tensor::from_data(shape, std::move(data), requires_grad);
}

inline double max_abs_diff(const slb::Tensor& a, const slb::Tensor& b) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(a.data()[static_cast<std::size_t>(i)] -
                                     b.data()[static_cast<std::size_t>(i)]));
  }
  return worst;
}

}  // namespace oracle
