#pragma once

#include <vector>

#include "slb/tensor.hpp"

namespace slb {

// Elementwise binary ops with numpy-style trailing-axis broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);

// a: [M,K], b: [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [B,K], w: [K,N], bias: [N] -> [B,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// input: [B,C,H,W], weight: [M,C,Dk,Dk]; adjoints defined for both.
Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding);
Tensor maxpool2d(const Tensor& input, int kernel, int stride);
Tensor global_avg_pool(const Tensor& input);  // [B,C,H,W] -> [B,C]

// Numerically stable (max-subtracted) softmax along `axis`.
Tensor softmax(const Tensor& t, int axis);
// Mean softmax cross-entropy over the batch; logits [B,K], labels in [0,K).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

Tensor sum(const Tensor& t);
Tensor sum(const Tensor& t, int axis, bool keepdim);
Tensor mean(const Tensor& t);
Tensor mean(const Tensor& t, int axis, bool keepdim);

Tensor reshape(const Tensor& t, Shape shape);
Tensor flatten2d(const Tensor& t);  // [d0, rest]

// Parameter-free shortcut for strided residual blocks: picks every
// `stride`-th pixel and zero-pads channels up to out_channels.
Tensor subsample_pad_channels(const Tensor& x, int stride, std::int64_t out_channels);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Fault injection for the gradcheck negative control: when enabled the
// softmax adjoint is deliberately perturbed.
void set_softmax_adjoint_fault(bool enabled);

}  // namespace slb
