#pragma once

// Internal helpers shared by the op implementations (ops.cpp, quant.cpp,
// search.cpp). Not installed.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "slb/tensor.hpp"

namespace slb::detail {

inline bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void attach_node(Tensor& out, std::vector<std::shared_ptr<TensorImpl>> parents,
                        std::function<void(TensorImpl&)> backward_fn) {
  auto impl = out.impl();
  impl->requires_grad = true;
  impl->parents = std::move(parents);
  impl->backward_fn = std::move(backward_fn);
}

// Fixed-order accumulation: dst[i] += src[i].
inline void axpy(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace slb::detail
