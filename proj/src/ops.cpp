#include "slb/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "op_common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace slb {

namespace {

bool g_softmax_fault = false;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Shape pad_shape(const Shape& s, std::size_t rank) {
  Shape out(rank, 1);
  std::copy(s.begin(), s.end(), out.begin() + (rank - s.size()));
  return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  const Shape ap = pad_shape(a, rank);
  const Shape bp = pad_shape(b, rank);
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] == bp[i]) {
      out[i] = ap[i];
    } else if (ap[i] == 1 || bp[i] == 1) {
      out[i] = std::max(ap[i], bp[i]);
    } else {
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " +
                                  shape_str(b));
    }
  }
  return out;
}

// Row-major strides of `in` (already padded to out rank), zeroed on axes the
// input broadcasts over.
std::vector<std::int64_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> st(out.size(), 0);
  std::int64_t acc = 1;
  for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = (in[static_cast<std::size_t>(i)] == 1) ? 0 : acc;
    acc *= in[static_cast<std::size_t>(i)];
  }
  return st;
}

struct BinPlan {
  std::int64_t inner = 1;
  int a_step = 1;  // 0 or 1 within the inner run
  int b_step = 1;
  std::vector<std::int64_t> outer_extents;  // outermost first
  std::vector<std::int64_t> a_outer;
  std::vector<std::int64_t> b_outer;
  std::int64_t n_outer = 1;
};

// Coalesces trailing axes into one contiguous run as long as each operand
// keeps a single mode (fully indexed vs broadcast) across the block.
BinPlan make_bin_plan(const Shape& a, const Shape& b, const Shape& out) {
  const std::size_t rank = out.size();
  const Shape ap = pad_shape(a, rank);
  const Shape bp = pad_shape(b, rank);
  const auto as = bcast_strides(ap, out);
  const auto bs = bcast_strides(bp, out);

  BinPlan plan;
  int k = static_cast<int>(rank) - 1;
  int a_mode = -1;
  int b_mode = -1;
  for (; k >= 0; --k) {
    const auto ku = static_cast<std::size_t>(k);
    if (out[ku] == 1) continue;
    const int am = as[ku] == 0 ? 0 : 1;
    const int bm = bs[ku] == 0 ? 0 : 1;
    if (a_mode == -1) {
      a_mode = am;
      b_mode = bm;
    } else if (am != a_mode || bm != b_mode) {
      break;
    }
    plan.inner *= out[ku];
  }
  plan.a_step = a_mode == -1 ? 0 : a_mode;
  plan.b_step = b_mode == -1 ? 0 : b_mode;
  for (int i = 0; i <= k; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    if (out[iu] == 1) continue;
    plan.outer_extents.push_back(out[iu]);
    plan.a_outer.push_back(as[iu]);
    plan.b_outer.push_back(bs[iu]);
    plan.n_outer *= out[iu];
  }
  return plan;
}

template <typename F>
void binary_exec(const BinPlan& p, const double* a, const double* b, double* out, F f) {
  const std::int64_t n_outer = p.n_outer;
  const std::int64_t inner = p.inner;
  const int nd = static_cast<int>(p.outer_extents.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (n_outer * inner > 16384 && num_threads() > 1)
#endif
  for (std::int64_t oi = 0; oi < n_outer; ++oi) {
    std::int64_t rem = oi;
    std::int64_t aoff = 0;
    std::int64_t boff = 0;
    for (int d = nd - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      const std::int64_t idx = rem % p.outer_extents[du];
      rem /= p.outer_extents[du];
      aoff += idx * p.a_outer[du];
      boff += idx * p.b_outer[du];
    }
    const double* pa = a + aoff;
    const double* pb = b + boff;
    double* po = out + oi * inner;
    if (p.a_step && p.b_step) {
      for (std::int64_t j = 0; j < inner; ++j) po[j] = f(pa[j], pb[j]);
    } else if (p.a_step) {
      const double bv = pb[0];
      for (std::int64_t j = 0; j < inner; ++j) po[j] = f(pa[j], bv);
    } else if (p.b_step) {
      const double av = pa[0];
      for (std::int64_t j = 0; j < inner; ++j) po[j] = f(av, pb[j]);
    } else {
      const double v = f(pa[0], pb[0]);
      for (std::int64_t j = 0; j < inner; ++j) po[j] = v;
    }
  }
}

struct ReducePlan {
  std::vector<std::int64_t> kept_extents, kept_src, kept_dst;
  std::vector<std::int64_t> red_extents, red_src;
  std::int64_t n_kept = 1;
  std::int64_t n_red = 1;
};

// `to` must be `from` with some axes collapsed to 1 (ranks equal).
ReducePlan make_reduce_plan(const Shape& from, const Shape& to) {
  ReducePlan p;
  std::vector<std::int64_t> from_st(from.size()), to_st(to.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(from.size()) - 1; i >= 0; --i) {
    from_st[static_cast<std::size_t>(i)] = acc;
    acc *= from[static_cast<std::size_t>(i)];
  }
  acc = 1;
  for (int i = static_cast<int>(to.size()) - 1; i >= 0; --i) {
    to_st[static_cast<std::size_t>(i)] = acc;
    acc *= to[static_cast<std::size_t>(i)];
  }
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (to[i] == from[i]) {
      if (from[i] > 1) {
        p.kept_extents.push_back(from[i]);
        p.kept_src.push_back(from_st[i]);
        p.kept_dst.push_back(to_st[i]);
        p.n_kept *= from[i];
      }
    } else if (to[i] == 1) {
      p.red_extents.push_back(from[i]);
      p.red_src.push_back(from_st[i]);
      p.n_red *= from[i];
    } else {
      throw std::invalid_argument("reduce: shape " + shape_str(to) +
                                  " is not a collapse of " + shape_str(from));
    }
  }
  return p;
}

// dst[to-index] += sum over collapsed axes of src. Each destination element
// is owned by one worker and accumulated in a fixed order.
void reduce_into(const double* src, const Shape& from, double* dst, const Shape& to) {
  const ReducePlan p = make_reduce_plan(from, to);
  const int nk = static_cast<int>(p.kept_extents.size());
  const int nr = static_cast<int>(p.red_extents.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (p.n_kept >= 64 && num_threads() > 1)
#endif
  for (std::int64_t ki = 0; ki < p.n_kept; ++ki) {
    std::int64_t rem = ki;
    std::int64_t soff = 0;
    std::int64_t doff = 0;
    for (int d = nk - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      const std::int64_t idx = rem % p.kept_extents[du];
      rem /= p.kept_extents[du];
      soff += idx * p.kept_src[du];
      doff += idx * p.kept_dst[du];
    }
    double acc = 0.0;
    if (nr == 0) {
      acc = src[soff];
    } else if (nr == 1) {
      const std::int64_t e = p.red_extents[0], s = p.red_src[0];
      const double* ps = src + soff;
      for (std::int64_t r = 0; r < e; ++r) acc += ps[r * s];
    } else {
      std::vector<std::int64_t> idx(static_cast<std::size_t>(nr), 0);
      for (std::int64_t r = 0; r < p.n_red; ++r) {
        std::int64_t off = soff;
        for (int d = 0; d < nr; ++d) off += idx[static_cast<std::size_t>(d)] * p.red_src[static_cast<std::size_t>(d)];
        acc += src[off];
        for (int d = nr - 1; d >= 0; --d) {
          const auto du = static_cast<std::size_t>(d);
          if (++idx[du] < p.red_extents[du]) break;
          idx[du] = 0;
        }
      }
    }
    dst[doff] += acc;
  }
}

// dst (out_shape, dense) += src broadcast from src_shape.
void add_broadcast_into(double* dst, const Shape& out_shape, const double* src,
                        const Shape& src_shape) {
  const BinPlan p = make_bin_plan(out_shape, src_shape, out_shape);
  const int nd = static_cast<int>(p.outer_extents.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (p.n_outer * p.inner > 16384 && num_threads() > 1)
#endif
  for (std::int64_t oi = 0; oi < p.n_outer; ++oi) {
    std::int64_t rem = oi;
    std::int64_t soff = 0;
    for (int d = nd - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      const std::int64_t idx = rem % p.outer_extents[du];
      rem /= p.outer_extents[du];
      soff += idx * p.b_outer[du];
    }
    double* po = dst + oi * p.inner;
    const double* ps = src + soff;
    if (p.b_step) {
      for (std::int64_t j = 0; j < p.inner; ++j) po[j] += ps[j];
    } else {
      const double v = ps[0];
      for (std::int64_t j = 0; j < p.inner; ++j) po[j] += v;
    }
  }
}

// Accumulates reduce(g * factor) into parent's grad, where factor may be
// null (plain pass-through). g has out_shape; parent may broadcast.
void accum_bcast_grad(const std::shared_ptr<detail::TensorImpl>& parent, const double* g,
                      const Shape& out_shape, const std::vector<double>* factor_full) {
  if (!parent->requires_grad && parent->parents.empty() && !parent->backward_fn) return;
  parent->ensure_grad();
  const Shape pshape = pad_shape(parent->shape, out_shape.size());
  if (factor_full == nullptr && pshape == out_shape) {
    double* dst = parent->grad.data();
    const std::int64_t n = static_cast<std::int64_t>(parent->grad.size());
    for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
    return;
  }
  if (factor_full == nullptr) {
    reduce_into(g, out_shape, parent->grad.data(), pshape);
  } else {
    reduce_into(factor_full->data(), out_shape, parent->grad.data(), pshape);
  }
}

bool needs_grad(const std::shared_ptr<detail::TensorImpl>& impl) {
  return impl->requires_grad || impl->backward_fn || !impl->parents.empty();
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::zeros(out_shape);
  const BinPlan plan = make_bin_plan(a.shape(), b.shape(), out_shape);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  switch (op) {
    case BinOp::Add: binary_exec(plan, pa, pb, po, [](double x, double y) { return x + y; }); break;
    case BinOp::Sub: binary_exec(plan, pa, pb, po, [](double x, double y) { return x - y; }); break;
    case BinOp::Mul: binary_exec(plan, pa, pb, po, [](double x, double y) { return x * y; }); break;
    case BinOp::Div: binary_exec(plan, pa, pb, po, [](double x, double y) { return x / y; }); break;
  }

  if (detail::wants_grad({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    detail::attach_node(out, {ai, bi}, [ai, bi, op, out_shape](detail::TensorImpl& self) {
      const double* g = self.grad.data();
      const std::int64_t n = static_cast<std::int64_t>(self.grad.size());
      const BinPlan plan = make_bin_plan(ai->shape, bi->shape, out_shape);
      switch (op) {
        case BinOp::Add: {
          if (needs_grad(ai)) accum_bcast_grad(ai, g, out_shape, nullptr);
          if (needs_grad(bi)) accum_bcast_grad(bi, g, out_shape, nullptr);
          break;
        }
        case BinOp::Sub: {
          if (needs_grad(ai)) accum_bcast_grad(ai, g, out_shape, nullptr);
          if (needs_grad(bi)) {
            std::vector<double> tmp(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = -g[i];
            accum_bcast_grad(bi, g, out_shape, &tmp);
          }
          break;
        }
        case BinOp::Mul: {
          if (needs_grad(ai)) {
            std::vector<double> tmp(static_cast<std::size_t>(n));
            binary_exec(make_bin_plan(out_shape, bi->shape, out_shape), g, bi->data.data(),
                        tmp.data(), [](double x, double y) { return x * y; });
            accum_bcast_grad(ai, g, out_shape, &tmp);
          }
          if (needs_grad(bi)) {
            std::vector<double> tmp(static_cast<std::size_t>(n));
            binary_exec(make_bin_plan(out_shape, ai->shape, out_shape), g, ai->data.data(),
                        tmp.data(), [](double x, double y) { return x * y; });
            accum_bcast_grad(bi, g, out_shape, &tmp);
          }
          break;
        }
        case BinOp::Div: {
          if (needs_grad(ai)) {
            std::vector<double> tmp(static_cast<std::size_t>(n));
            binary_exec(make_bin_plan(out_shape, bi->shape, out_shape), g, bi->data.data(),
                        tmp.data(), [](double x, double y) { return x / y; });
            accum_bcast_grad(ai, g, out_shape, &tmp);
          }
          if (needs_grad(bi)) {
            // d/db (a/b) = -a / b^2 = -out / b
            std::vector<double> tmp(static_cast<std::size_t>(n));
            binary_exec(make_bin_plan(out_shape, ai->shape, out_shape), g, ai->data.data(),
                        tmp.data(), [](double x, double y) { return x * y; });
            std::vector<double> tmp2(static_cast<std::size_t>(n));
            binary_exec(make_bin_plan(out_shape, bi->shape, out_shape), tmp.data(),
                        bi->data.data(), tmp2.data(),
                        [](double x, double y) { return -x / (y * y); });
            accum_bcast_grad(bi, g, out_shape, &tmp2);
          }
          break;
        }
      }
      (void)plan;
    });
  }
  return out;
}

template <typename FwdF, typename GradF>
Tensor unary_op(const Tensor& a, FwdF f, GradF dfdx_from_saved, bool save_output) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  const std::int64_t n = a.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (n > 16384 && num_threads() > 1)
#endif
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);

  if (detail::wants_grad({&a})) {
    auto ai = a.impl();
    auto oi = out.impl();
    detail::attach_node(out, {ai},
                        [ai, dfdx_from_saved, save_output](detail::TensorImpl& self) {
                          if (!needs_grad(ai)) return;
                          ai->ensure_grad();
                          const double* g = self.grad.data();
                          const double* saved = save_output ? self.data.data() : ai->data.data();
                          double* dst = ai->grad.data();
                          const std::int64_t n = static_cast<std::int64_t>(self.grad.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (n > 16384 && num_threads() > 1)
#endif
                          for (std::int64_t i = 0; i < n; ++i) {
                            dst[i] += g[i] * dfdx_from_saved(saved[i]);
                          }
                        });
  }
  return out;
}

// C[M,N] (+)= op(A) * B with op(A) = A [M,K] row-major, or transpose of
// A stored [K,M] when transA. i-k-j order: the inner j loop is contiguous in
// both C and B and vectorizes without reassociation, so results do not
// depend on the thread count.
void gemm(bool transA, std::int64_t M, std::int64_t N, std::int64_t K, const double* A,
          const double* B, double* C, bool accumulate, bool parallel) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (parallel && num_threads() > 1)
#else
  (void)parallel;
#endif
  for (std::int64_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    if (!accumulate) std::fill(c, c + N, 0.0);
    for (std::int64_t k = 0; k < K; ++k) {
      const double a = transA ? A[k * M + i] : A[i * K + k];
      const double* b = B + k * N;
      for (std::int64_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

struct ConvDims {
  std::int64_t B, C, H, W, M, kh, kw, OH, OW;
  int stride, pad;
  std::int64_t ck2() const { return C * kh * kw; }
  std::int64_t ohow() const { return OH * OW; }
};

void im2col(const double* x, const ConvDims& d, double* col) {
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        double* dst = col + ((c * d.kh + ki) * d.kw + kj) * d.ohow();
        for (std::int64_t oh = 0; oh < d.OH; ++oh) {
          const std::int64_t ih = oh * d.stride - d.pad + ki;
          double* row = dst + oh * d.OW;
          if (ih < 0 || ih >= d.H) {
            std::fill(row, row + d.OW, 0.0);
            continue;
          }
          const double* src = x + (c * d.H + ih) * d.W;
          if (d.stride == 1) {
            const std::int64_t iw0 = -d.pad + kj;
            std::int64_t lo = std::max<std::int64_t>(0, -iw0);
            std::int64_t hi = std::min<std::int64_t>(d.OW, d.W - iw0);
            if (hi < lo) hi = lo;
            std::fill(row, row + lo, 0.0);
            std::memcpy(row + lo, src + iw0 + lo, static_cast<std::size_t>(hi - lo) * sizeof(double));
            std::fill(row + hi, row + d.OW, 0.0);
          } else {
            for (std::int64_t ow = 0; ow < d.OW; ++ow) {
              const std::int64_t iw = ow * d.stride - d.pad + kj;
              row[ow] = (iw >= 0 && iw < d.W) ? src[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* dx) {
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        const double* src = col + ((c * d.kh + ki) * d.kw + kj) * d.ohow();
        for (std::int64_t oh = 0; oh < d.OH; ++oh) {
          const std::int64_t ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.H) continue;
          double* row = dx + (c * d.H + ih) * d.W;
          const double* srow = src + oh * d.OW;
          for (std::int64_t ow = 0; ow < d.OW; ++ow) {
            const std::int64_t iw = ow * d.stride - d.pad + kj;
            if (iw >= 0 && iw < d.W) row[iw] += srow[ow];
          }
        }
      }
    }
  }
}

thread_local std::vector<double> tl_col;
thread_local std::vector<double> tl_col2;

}  // namespace

void set_softmax_adjoint_fault(bool enabled) { g_softmax_fault = enabled; }

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Div); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double) { return 1.0; }, false);
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; }, [s](double) { return s; }, false);
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double y) { return y; }, true);
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; },
                  false);
}

Tensor sqrt(const Tensor& a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double y) { return 0.5 / y; }, true);
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; }, false);
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x) { return x > 0.0 ? 1.0 : 0.0; }, false);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 operands, got " +
                                            shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  check(b.dim(0) == K, "matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
  Tensor out = Tensor::zeros({M, N});
  gemm(false, M, N, K, a.data().data(), b.data().data(), out.mutable_data().data(), false,
       M * N * K > 32768);

  if (detail::wants_grad({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    detail::attach_node(out, {ai, bi}, [ai, bi, M, N, K](detail::TensorImpl& self) {
      const double* g = self.grad.data();
      if (needs_grad(ai)) {
        ai->ensure_grad();
        // dA += G * B^T
        std::vector<double> bt(static_cast<std::size_t>(K * N));
        const double* pb = bi->data.data();
        for (std::int64_t k = 0; k < K; ++k) {
          for (std::int64_t j = 0; j < N; ++j) bt[static_cast<std::size_t>(j * K + k)] = pb[k * N + j];
        }
        gemm(false, M, K, N, g, bt.data(), ai->grad.data(), true, M * K * N > 32768);
      }
      if (needs_grad(bi)) {
        bi->ensure_grad();
        // dB += A^T * G
        gemm(true, K, N, M, ai->data.data(), g, bi->grad.data(), true, M * K * N > 32768);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  return add(matmul(x, w), bias);
}

Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding) {
  check(input.rank() == 4, "conv2d: input must be [B,C,H,W], got " + shape_str(input.shape()));
  check(weight.rank() == 4, "conv2d: weight must be [M,N,Dk,Dk], got " + shape_str(weight.shape()));
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(padding >= 0, "conv2d: padding must be >= 0");
  ConvDims d;
  d.B = input.dim(0);
  d.C = input.dim(1);
  d.H = input.dim(2);
  d.W = input.dim(3);
  d.M = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.stride = stride;
  d.pad = padding;
  check(weight.dim(1) == d.C, "conv2d: weight input channels " + std::to_string(weight.dim(1)) +
                                  " do not match input channels " + std::to_string(d.C));
  check(d.H + 2 * padding >= d.kh && d.W + 2 * padding >= d.kw,
        "conv2d: kernel larger than padded input");
  d.OH = (d.H + 2 * padding - d.kh) / stride + 1;
  d.OW = (d.W + 2 * padding - d.kw) / stride + 1;

  Tensor out = Tensor::zeros({d.B, d.M, d.OH, d.OW});
  {
    const double* px = input.data().data();
    const double* pw = weight.data().data();
    double* po = out.mutable_data().data();
    const std::int64_t in_sz = d.C * d.H * d.W;
    const std::int64_t out_sz = d.M * d.ohow();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) if (num_threads() > 1)
#endif
    for (std::int64_t b = 0; b < d.B; ++b) {
      tl_col.resize(static_cast<std::size_t>(d.ck2() * d.ohow()));
      im2col(px + b * in_sz, d, tl_col.data());
      gemm(false, d.M, d.ohow(), d.ck2(), pw, tl_col.data(), po + b * out_sz, false, false);
    }
  }

  if (detail::wants_grad({&input, &weight})) {
    auto xi = input.impl();
    auto wi = weight.impl();
    detail::attach_node(out, {xi, wi}, [xi, wi, d](detail::TensorImpl& self) {
      const double* g = self.grad.data();
      const std::int64_t in_sz = d.C * d.H * d.W;
      const std::int64_t out_sz = d.M * d.ohow();
      if (needs_grad(wi)) {
        wi->ensure_grad();
        const double* px = xi->data.data();
        std::vector<double>& col = tl_col;
        std::vector<double>& colT = tl_col2;
        col.resize(static_cast<std::size_t>(d.ck2() * d.ohow()));
        colT.resize(col.size());
        // Sequential over the batch; the row-parallel gemm keeps each dW
        // element's accumulation order independent of the thread count.
        for (std::int64_t b = 0; b < d.B; ++b) {
          im2col(px + b * in_sz, d, col.data());
          const std::int64_t n = d.ohow();
          const std::int64_t k2 = d.ck2();
          for (std::int64_t r = 0; r < k2; ++r) {
            for (std::int64_t c = 0; c < n; ++c) colT[static_cast<std::size_t>(c * k2 + r)] = col[static_cast<std::size_t>(r * n + c)];
          }
          gemm(false, d.M, k2, n, g + b * out_sz, colT.data(), wi->grad.data(), true, true);
        }
      }
      if (needs_grad(xi)) {
        xi->ensure_grad();
        const double* pw = wi->data.data();
        double* dx = xi->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) if (num_threads() > 1)
#endif
        for (std::int64_t b = 0; b < d.B; ++b) {
          tl_col.resize(static_cast<std::size_t>(d.ck2() * d.ohow()));
          gemm(true, d.ck2(), d.ohow(), d.M, pw, g + b * out_sz, tl_col.data(), false, false);
          col2im_add(tl_col.data(), d, dx + b * in_sz);
        }
      }
    });
  }
  return out;
}

Tensor maxpool2d(const Tensor& input, int kernel, int stride) {
  check(input.rank() == 4, "maxpool2d: input must be [B,C,H,W], got " + shape_str(input.shape()));
  check(kernel >= 1 && stride >= 1, "maxpool2d: kernel and stride must be >= 1");
  const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  check(H >= kernel && W >= kernel, "maxpool2d: kernel larger than input");
  const std::int64_t OH = (H - kernel) / stride + 1;
  const std::int64_t OW = (W - kernel) / stride + 1;
  Tensor out = Tensor::zeros({B, C, OH, OW});

  auto indices = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(B * C * OH * OW));
  {
    const double* px = input.data().data();
    double* po = out.mutable_data().data();
    std::int64_t* pi = indices->data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) if (num_threads() > 1)
#endif
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const double* plane = px + bc * H * W;
      double* oplane = po + bc * OH * OW;
      std::int64_t* iplane = pi + bc * OH * OW;
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_idx = 0;
          for (std::int64_t ki = 0; ki < kernel; ++ki) {
            for (std::int64_t kj = 0; kj < kernel; ++kj) {
              const std::int64_t ih = oh * stride + ki;
              const std::int64_t iw = ow * stride + kj;
              const double v = plane[ih * W + iw];
              if (v > best) {
                best = v;
                best_idx = bc * H * W + ih * W + iw;
              }
            }
          }
          oplane[oh * OW + ow] = best;
          iplane[oh * OW + ow] = best_idx;
        }
      }
    }
  }

  if (detail::wants_grad({&input})) {
    auto xi = input.impl();
    detail::attach_node(out, {xi}, [xi, indices](detail::TensorImpl& self) {
      if (!needs_grad(xi)) return;
      xi->ensure_grad();
      const double* g = self.grad.data();
      double* dst = xi->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(self.grad.size());
      // Serial: overlapping windows may hit the same input element.
      for (std::int64_t i = 0; i < n; ++i) dst[(*indices)[static_cast<std::size_t>(i)]] += g[i];
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input) {
  check(input.rank() == 4, "global_avg_pool: input must be [B,C,H,W], got " +
                               shape_str(input.shape()));
  const std::int64_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  Tensor out = Tensor::zeros({B, C});
  {
    const double* px = input.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      double acc = 0.0;
      const double* p = px + bc * HW;
      for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
      po[bc] = acc / static_cast<double>(HW);
    }
  }
  if (detail::wants_grad({&input})) {
    auto xi = input.impl();
    detail::attach_node(out, {xi}, [xi, HW](detail::TensorImpl& self) {
      if (!needs_grad(xi)) return;
      xi->ensure_grad();
      const double* g = self.grad.data();
      double* dst = xi->grad.data();
      const std::int64_t BC = static_cast<std::int64_t>(self.grad.size());
      const double inv = 1.0 / static_cast<double>(HW);
      for (std::int64_t bc = 0; bc < BC; ++bc) {
        const double gv = g[bc] * inv;
        double* p = dst + bc * HW;
        for (std::int64_t i = 0; i < HW; ++i) p[i] += gv;
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& t, int axis) {
  check(axis >= 0 && axis < t.rank(), "softmax: axis " + std::to_string(axis) +
                                          " out of range for " + shape_str(t.shape()));
  const Shape& s = t.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < t.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t m = s[static_cast<std::size_t>(axis)];

  Tensor out = Tensor::zeros(s);
  {
    const double* px = t.data().data();
    double* po = out.mutable_data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (outer * inner > 1024 && num_threads() > 1)
#endif
    for (std::int64_t oi = 0; oi < outer * inner; ++oi) {
      const std::int64_t o = oi / inner;
      const std::int64_t in = oi % inner;
      const std::int64_t base = o * m * inner + in;
      double mx = px[base];
      for (std::int64_t a = 1; a < m; ++a) mx = std::max(mx, px[base + a * inner]);
      double sum = 0.0;
      for (std::int64_t a = 0; a < m; ++a) {
        const double e = std::exp(px[base + a * inner] - mx);
        po[base + a * inner] = e;
        sum += e;
      }
      const double invsum = 1.0 / sum;
      for (std::int64_t a = 0; a < m; ++a) po[base + a * inner] *= invsum;
    }
  }

  if (detail::wants_grad({&t})) {
    auto xi = t.impl();
    detail::attach_node(out, {xi}, [xi, outer, inner, m](detail::TensorImpl& self) {
      if (!needs_grad(xi)) return;
      xi->ensure_grad();
      const double* g = self.grad.data();
      const double* y = self.data.data();
      double* dst = xi->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (outer * inner > 1024 && num_threads() > 1)
#endif
      for (std::int64_t oi = 0; oi < outer * inner; ++oi) {
        const std::int64_t o = oi / inner;
        const std::int64_t in = oi % inner;
        const std::int64_t base = o * m * inner + in;
        double dot = 0.0;
        for (std::int64_t a = 0; a < m; ++a) dot += g[base + a * inner] * y[base + a * inner];
        for (std::int64_t a = 0; a < m; ++a) {
          dst[base + a * inner] += y[base + a * inner] * (g[base + a * inner] - dot);
        }
      }
      if (g_softmax_fault) dst[0] += 1e-3;
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check(logits.rank() == 2, "cross_entropy: logits must be [B,K], got " +
                                shape_str(logits.shape()));
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  check(static_cast<std::int64_t>(labels.size()) == B,
        "cross_entropy: batch size mismatch between logits and labels");
  for (int y : labels) check(y >= 0 && y < K, "cross_entropy: label out of range");

  const double* pz = logits.data().data();
  double loss = 0.0;
  for (std::int64_t i = 0; i < B; ++i) {
    const double* z = pz + i * K;
    double mx = z[0];
    for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < K; ++j) sum += std::exp(z[j] - mx);
    loss += std::log(sum) + mx - z[labels[static_cast<std::size_t>(i)]];
  }
  loss /= static_cast<double>(B);
  Tensor out = Tensor::scalar(loss);

  if (detail::wants_grad({&logits})) {
    auto zi = logits.impl();
    auto lab = std::make_shared<std::vector<int>>(labels);
    detail::attach_node(out, {zi}, [zi, lab, B, K](detail::TensorImpl& self) {
      if (!needs_grad(zi)) return;
      zi->ensure_grad();
      const double g = self.grad[0] / static_cast<double>(B);
      const double* pz = zi->data.data();
      double* dst = zi->grad.data();
      for (std::int64_t i = 0; i < B; ++i) {
        const double* z = pz + i * K;
        double mx = z[0];
        for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, z[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < K; ++j) sum += std::exp(z[j] - mx);
        const double invsum = 1.0 / sum;
        double* row = dst + i * K;
        for (std::int64_t j = 0; j < K; ++j) {
          const double p = std::exp(z[j] - mx) * invsum;
          row[j] += g * (p - (j == (*lab)[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& t) {
  const double* p = t.data().data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) acc += p[i];
  Tensor out = Tensor::scalar(acc);
  if (detail::wants_grad({&t})) {
    auto xi = t.impl();
    detail::attach_node(out, {xi}, [xi](detail::TensorImpl& self) {
      if (!needs_grad(xi)) return;
      xi->ensure_grad();
      const double g = self.grad[0];
      for (double& v : xi->grad) v += g;
    });
  }
  return out;
}

Tensor sum(const Tensor& t, int axis, bool keepdim) {
  check(axis >= 0 && axis < t.rank(), "sum: axis " + std::to_string(axis) +
                                          " out of range for " + shape_str(t.shape()));
  Shape kept = t.shape();
  kept[static_cast<std::size_t>(axis)] = 1;
  Tensor out = Tensor::zeros(kept);
  reduce_into(t.data().data(), t.shape(), out.mutable_data().data(), kept);

  Shape final_shape = kept;
  if (!keepdim) final_shape.erase(final_shape.begin() + axis);

  if (detail::wants_grad({&t})) {
    auto xi = t.impl();
    const Shape from = t.shape();
    detail::attach_node(out, {xi}, [xi, from, kept](detail::TensorImpl& self) {
      if (!needs_grad(xi)) return;
      xi->ensure_grad();
      add_broadcast_into(xi->grad.data(), from, self.grad.data(), kept);
    });
  }
  if (!keepdim) {
    out.impl()->shape = final_shape;
  }
  return out;
}

Tensor mean(const Tensor& t) { return mul_scalar(sum(t), 1.0 / static_cast<double>(t.numel())); }

Tensor mean(const Tensor& t, int axis, bool keepdim) {
  const double inv = 1.0 / static_cast<double>(t.dim(axis));
  return mul_scalar(sum(t, axis, keepdim), inv);
}

Tensor reshape(const Tensor& t, Shape shape) {
  check(shape_numel(shape) == t.numel(), "reshape: cannot view " + shape_str(t.shape()) +
                                             " as " + shape_str(shape));
  Tensor out = Tensor::from_data(shape, std::vector<double>(t.data().begin(), t.data().end()));
  if (detail::wants_grad({&t})) {
    auto xi = t.impl();
    detail::attach_node(out, {xi}, [xi](detail::TensorImpl& self) {
      if (!needs_grad(xi)) return;
      xi->ensure_grad();
      detail::axpy(xi->grad, self.grad);
    });
  }
  return out;
}

Tensor flatten2d(const Tensor& t) {
  check(t.rank() >= 1, "flatten2d: rank must be >= 1");
  return reshape(t, {t.dim(0), t.numel() / t.dim(0)});
}

Tensor subsample_pad_channels(const Tensor& x, int stride, std::int64_t out_channels) {
  check(x.rank() == 4, "subsample: input must be [B,C,H,W]");
  check(stride >= 1, "subsample: stride must be >= 1");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(out_channels >= C, "subsample: out_channels must be >= input channels");
  const std::int64_t OH = (H + stride - 1) / stride;
  const std::int64_t OW = (W + stride - 1) / stride;
  Tensor out = Tensor::zeros({B, out_channels, OH, OW});
  {
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t c = 0; c < C; ++c) {
        const double* plane = px + (b * C + c) * H * W;
        double* oplane = po + (b * out_channels + c) * OH * OW;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            oplane[oh * OW + ow] = plane[(oh * stride) * W + (ow * stride)];
          }
        }
      }
    }
  }
  if (detail::wants_grad({&x})) {
    auto xi = x.impl();
    const int s = stride;
    detail::attach_node(out, {xi}, [xi, B, C, H, W, OH, OW, out_channels, s](detail::TensorImpl& self) {
      if (!needs_grad(xi)) return;
      xi->ensure_grad();
      const double* g = self.grad.data();
      double* dst = xi->grad.data();
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
          double* plane = dst + (b * C + c) * H * W;
          const double* gplane = g + (b * out_channels + c) * OH * OW;
          for (std::int64_t oh = 0; oh < OH; ++oh) {
            for (std::int64_t ow = 0; ow < OW; ++ow) {
              plane[(oh * s) * W + (ow * s)] += gplane[oh * OW + ow];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace slb
