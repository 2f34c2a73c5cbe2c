// SPDX-License-Identifier: Apache-2.0
#include "amoe/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "amoe/errors.hpp"

namespace amoe {

namespace {
thread_local bool g_grad_enabled = true;

long shape_numel(const std::vector<long>& shape) {
  long n = 1;
  for (long d : shape) n *= d;
  return shape.empty() ? 0 : n;
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(std::vector<long> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<long> shape, double value, bool requires_grad) {
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(shape_numel(t.shape), value);
  t.requires_grad = requires_grad;
  // Allocate grad up front so every copy of this tensor shares one buffer;
  // lazy allocation would split accumulation across copies.
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::from(std::vector<long> shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<long>(values.size())) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values do not fill shape " + Tensor::zeros(shape).shape_str());
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::randn(std::vector<long> shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : *t.data) v = dist(rng);
  return t;
}

long Tensor::numel() const { return data ? static_cast<long>(data->size()) : 0; }

double Tensor::scalar() const {
  if (numel() != 1) throw ShapeError("scalar(): tensor has shape " + shape_str());
  return (*data)[0];
}

void Tensor::ensure_grad() {
  if (!grad) grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Tensor::detached_copy() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(*data);
  t.requires_grad = false;
  return t;
}

std::string Tensor::shape_str() const {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

void backward(Tensor& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + root.shape_str());
  }
  if (!root.requires_grad) return;
  root.ensure_grad();
  (*root.grad)[0] += 1.0;

  // Iterative post-order DFS over graph nodes; reverse gives topological order.
  std::vector<Tensor*> order;
  std::vector<std::pair<Tensor*, size_t>> stack;
  std::unordered_set<Node*> visited;
  if (root.node && visited.insert(root.node.get()).second) stack.push_back({&root, 0});
  while (!stack.empty()) {
    auto& frame = stack.back();
    Tensor* t = frame.first;
    auto& parents = t->node->parents;
    if (frame.second < parents.size()) {
      Tensor& p = parents[frame.second++];
      if (p.node && p.requires_grad && visited.insert(p.node.get()).second) {
        stack.push_back({&p, 0});
      }
    } else {
      order.push_back(t);
      stack.pop_back();
    }
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor& t = **it;
    if (t.node->backward) t.node->backward(t);
  }
}

const char* param_kind_name(ParamKind kind) {
  switch (kind) {
    case ParamKind::Router: return "router";
    case ParamKind::RoutedExpert: return "routed_expert";
    case ParamKind::SharedExpert: return "shared_expert";
    case ParamKind::DenseFfn: return "dense_ffn";
    case ParamKind::Adapter: return "adapter";
    case ParamKind::Embedding: return "embedding";
    case ParamKind::Position: return "position";
    case ParamKind::Head: return "head";
    case ParamKind::Attention: return "attention";
    case ParamKind::Norm: return "norm";
  }
  return "unknown";
}

}  // namespace amoe
