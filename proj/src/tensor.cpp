#include "slb/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace slb {

std::int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), static_cast<std::int64_t>(1),
                         std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

void TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}

}  // namespace detail

namespace {

thread_local int g_no_grad_depth = 0;
int g_num_threads = 0;  // 0 = library default

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data,
                                              bool requires_grad) {
  const std::int64_t n = shape_numel(shape);
  if (n < 0) throw std::invalid_argument("tensor: negative extent in shape " + shape_str(shape));
  if (static_cast<std::int64_t>(data.size()) != n) {
    throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() : prev_(true) { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

void set_num_threads(int n) { g_num_threads = n < 1 ? 1 : n; }

int num_threads() {
  if (g_num_threads > 0) return g_num_threads;
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return wrap(make_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return wrap(make_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return wrap(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw std::invalid_argument("tensor: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(impl_->shape));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("tensor: item() requires a scalar, got shape " +
                                shape_str(impl_->shape));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (value && !is_leaf()) {
    throw std::invalid_argument("tensor: requires_grad can only be toggled on leaves");
  }
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) throw std::runtime_error("tensor: grad not populated");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::is_leaf() const { return impl_->parents.empty() && !impl_->backward_fn; }

void Tensor::backward() const {
  if (!impl_) throw std::runtime_error("backward: undefined tensor");
  if (numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(impl_->shape));
  }
  if (impl_->consumed) {
    throw std::runtime_error("backward: graph already consumed; re-record the forward pass");
  }

  // Iterative DFS post-order. The recording order of a define-by-run graph
  // is topological, so the post-order here reproduces it and the reverse
  // walk below is exact reverse topological order. The order list holds
  // owning references: interior nodes must outlive the sweep even after
  // their edges are released.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<detail::TensorImpl*> seen;
  struct Frame {
    std::shared_ptr<detail::TensorImpl> node;
    std::size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_, 0});
  seen.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.node->parents.size()) {
      std::shared_ptr<detail::TensorImpl> child = f.node->parents[f.next_child];
      ++f.next_child;
      if (seen.insert(child.get()).second) stack.push_back({std::move(child), 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  for (const auto& node : order) {
    if (node->consumed) {
      throw std::runtime_error("backward: graph already consumed; re-record the forward pass");
    }
  }

  impl_->ensure_grad();
  impl_->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = it->get();
    if (node->backward_fn) {
      if (!node->grad.empty()) node->backward_fn(*node);
      node->consumed = true;
      // Drop saved inputs eagerly; the recording is spent either way.
      node->backward_fn = nullptr;
      node->parents.clear();
    }
    if (node->requires_grad) node->ensure_grad();
  }
}

}  // namespace slb
