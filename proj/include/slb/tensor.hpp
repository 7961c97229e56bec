#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace slb {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  // Autodiff links. A non-leaf node carries the inputs it was derived from
  // and a closure that pushes this node's gradient into them. Both are
  // released once a backward pass has consumed the node.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  bool consumed = false;

  void ensure_grad();
};

}  // namespace detail

// Dense row-major fp64 tensor with reverse-mode autodiff. Value-semantic
// handle over shared storage; data is written only at creation time and by
// the optimizer (single writer), grad buffers are the one mutable slot
// during backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  std::int64_t numel() const;
  std::int64_t dim(int axis) const;

  std::span<const double> data() const;
  // Mutation points: parameter updates and buffer fills. Never call on a
  // tensor that participates in a recorded graph.
  std::span<double> mutable_data();

  double item() const;  // scalar tensors only

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Reverse-mode sweep from a scalar loss. Visits the recorded graph in
  // exact reverse topological order; running it twice on the same recording
  // is an error.
  void backward() const;

  bool is_leaf() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Grad recording is on by default; NoGradGuard disables it for a scope
// (discrete-state forward passes, evaluation).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Worker count for the parallel kernels. Every kernel assigns each output
// element to exactly one worker and accumulates it in a fixed sequential
// order, so results are bit-identical for any thread count; 1 gives the
// mandated single-threaded mode.
void set_num_threads(int n);
int num_threads();

}  // namespace slb
