#include "downscale/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "downscale/error.hpp"

namespace downscale {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }
void set_grad_enabled(bool enabled) { t_grad_enabled = enabled; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> values(numel(shape), value);
  return from_values(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_values(Shape shape, std::vector<T> values,
                                 bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " holds " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_values({}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(shape()));
  }
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_values(node_->shape, node_->value, false);
}

template <typename T>
Graph<T> Graph<T>::from_loss(const Tensor<T>& loss) {
  Graph graph;
  graph.root_ = loss.node_ptr();
  // Iterative post-order DFS restricted to nodes that carry gradients.
  std::unordered_set<const Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(graph.root_.get(), 0);
  visited.insert(graph.root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      graph.order_.push_back(node);
      stack.pop_back();
    }
  }
  return graph;
}

template <typename T>
void Graph<T>::run_backward() {
  Node<T>& root = *root_;
  auto& seed = root.grad_buffer();
  seed[0] += T(1);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node<T>& node = **it;
    if (!node.leaf && node.backward) node.backward(node);
  }
  for (Node<T>* node : order_) {
    if (node->leaf) continue;
    node->consumed = true;
    node->backward = nullptr;
    node->inputs.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " +
                     to_string(loss.shape()));
  }
  if (loss.node().consumed) {
    throw GraphError("stale graph: backward already ran for this loss");
  }
  if (!loss.requires_grad()) {
    throw GraphError("loss does not depend on any leaf requiring a gradient");
  }
  auto graph = Graph<T>::from_loss(loss);
  graph.run_backward();
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace downscale
