#pragma once

#include <cmath>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "downscale/error.hpp"
#include "downscale/tensor.hpp"

namespace downscale::detail {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Builds the result node of an op. The backward closure and inputs are only
// retained when grad mode is on and some input requires a gradient.
template <typename T, typename Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<NodePtr<T>> inputs, Backward&& backward) {
#ifndef NDEBUG
  for (const T& v : value) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError(std::string("non-finite value produced by ") + op);
    }
  }
#endif
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->leaf = false;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  node->leaf = !needs;
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

// Accumulation target for input i, or nullptr when it needs no gradient.
template <typename T>
T* grad_of(Node<T>& self, std::size_t i) {
  Node<T>& in = *self.inputs[i];
  return in.requires_grad ? in.grad_buffer().data() : nullptr;
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

}  // namespace downscale::detail
