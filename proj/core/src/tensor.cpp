#include "mixri/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace mixri {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

void TensorImpl::ensure_grad() {
  if (!grad) {
    grad = std::make_shared<Storage>();
    grad->set_dtype(storage->dtype());
    grad->resize(numel());
  }
}

Tensor Tensor::zeros(const Shape& shape, Dtype dt, bool requires_grad) {
  for (int64_t d : shape)
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->storage = std::make_shared<Storage>(dt, shape_numel(shape));
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::full(const Shape& shape, double value, Dtype dt) {
  Tensor t = zeros(shape, dt);
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) t.set_value(i, value);
  return t;
}

Tensor Tensor::from_values(const Shape& shape, const std::vector<double>& values, Dtype dt,
                           bool requires_grad) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape))
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  Tensor t = zeros(shape, dt, requires_grad);
  for (size_t i = 0; i < values.size(); ++i) t.set_value(static_cast<int64_t>(i), values[i]);
  return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return from_values({1}, {value}, dt); }

int64_t Tensor::dim(int i) const {
  if (i < 0) i += ndim();
  return impl_->shape[static_cast<size_t>(i)];
}

double Tensor::scalar_value() const {
  if (numel() != 1) throw std::logic_error("scalar_value on tensor of shape " + shape_str(shape()));
  return value_at(0);
}

Tensor Tensor::grad() const {
  if (!impl_->grad) throw std::logic_error("tensor has no gradient");
  Tensor g = Tensor::zeros(shape(), dtype());
  for (int64_t i = 0; i < numel(); ++i) g.set_value(i, impl_->grad->at(i));
  return g;
}

void Tensor::zero_grad() {
  if (impl_->grad) impl_->grad->resize(numel());
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->storage = impl_->storage;
  impl->requires_grad = false;
  return Tensor(impl);
}

Tensor Tensor::clone() const {
  Tensor t = Tensor::zeros(shape(), dtype());
  for (int64_t i = 0; i < numel(); ++i) t.set_value(i, value_at(i));
  return t;
}

Tensor Tensor::to(Dtype dt) const {
  Tensor t = Tensor::zeros(shape(), dt);
  for (int64_t i = 0; i < numel(); ++i) t.set_value(i, value_at(i));
  return t;
}

Graph Graph::from(const Tensor& root) {
  Graph g;
  g.root_ = root;
  // Iterative post-order DFS; parents end up before children.
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  std::unordered_set<TensorImpl*> on_stack;
  std::unordered_map<TensorImpl*, std::shared_ptr<TensorImpl>> owners;
  stack.emplace_back(root.raw(), 0);
  on_stack.insert(root.raw());
  owners.emplace(root.raw(), root.impl());

  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      const std::shared_ptr<TensorImpl>& child_sp = node->parents[next_child];
      TensorImpl* child = child_sp.get();
      ++next_child;
      if (!visited.count(child)) {
        if (on_stack.count(child)) throw std::logic_error("autodiff graph contains a cycle");
        owners.emplace(child, child_sp);
        stack.emplace_back(child, 0);
        on_stack.insert(child);
      }
    } else {
      visited.insert(node);
      on_stack.erase(node);
      g.topo_.push_back(owners.at(node));
      stack.pop_back();
    }
  }
  g.records_.reserve(g.topo_.size());
  for (size_t i = 0; i < g.topo_.size(); ++i)
    g.records_.push_back({g.topo_[i].get(), g.topo_[i]->op_name, static_cast<int>(i)});
  return g;
}

void Graph::backward(const Tensor* seed) {
  TensorImpl* root = root_.raw();
  root->ensure_grad();
  if (seed) {
    if (seed->numel() != root->numel())
      throw std::invalid_argument("backward seed shape " + shape_str(seed->shape()) +
                                  " does not match root " + shape_str(root->shape));
    for (int64_t i = 0; i < root->numel(); ++i) root->grad->set(i, seed->value_at(i));
  } else {
    if (root->numel() != 1)
      throw std::invalid_argument("backward without seed requires a scalar root, got " +
                                  shape_str(root->shape));
    root->grad->set(0, 1.0);
  }
  // topo_ has parents before children; traverse children-first.
  for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
    TensorImpl* node = it->get();
    if (node->backward_fn && node->grad) node->backward_fn();
  }
}

void backward(const Tensor& root) {
  Graph g = Graph::from(root);
  g.backward();
}

}  // namespace mixri
