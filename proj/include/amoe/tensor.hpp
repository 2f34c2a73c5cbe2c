// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "amoe/rng.hpp"

namespace amoe {

struct Tensor;

// One step of the reverse pass: reads out.grad and accumulates into the
// grads of out.node->parents.
struct Node {
  std::vector<Tensor> parents;
  std::function<void(Tensor&)> backward;
};

// Dense row-major tensor of 64-bit reals with an optional autograd node.
// Copies are shallow: they share data, grad and graph node.
struct Tensor {
  std::vector<long> shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;
  std::shared_ptr<std::vector<double>> grad;
  std::shared_ptr<Node> node;

  Tensor() = default;

  static Tensor zeros(std::vector<long> shape, bool requires_grad = false);
  static Tensor full(std::vector<long> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<long> shape, std::vector<double> values,
                     bool requires_grad = false);
  // Gaussian init, mean 0 / given stddev, drawn from the caller's generator.
  static Tensor randn(std::vector<long> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  long numel() const;
  long rows() const { return shape.empty() ? 0 : shape[0]; }
  long cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(long i, long j) { return (*data)[i * cols() + j]; }
  double at(long i, long j) const { return (*data)[i * cols() + j]; }

  // Value of a single-element tensor.
  double scalar() const;

  void ensure_grad();
  void zero_grad();
  // Deep copy of values only (no graph, no grad).
  Tensor detached_copy() const;

  std::string shape_str() const;
};

// Reverse pass from a scalar root: topological order over the graph, seeding
// d(root)/d(root) = 1. Frozen/non-requires-grad tensors accumulate nothing.
void backward(Tensor& root);

// Thread-local switch; ops record graph nodes only while enabled.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Parameter grouping for freeze policies and per-group change reporting.
enum class ParamKind {
  Router,
  RoutedExpert,
  SharedExpert,  // shared experts inside MoE sublayers
  DenseFfn,      // the dense first-layer feed-forward
  Adapter,
  Embedding,     // token embedding tables
  Position,      // positional table
  Head,
  Attention,
  Norm,
};

const char* param_kind_name(ParamKind kind);

struct ParamTag {
  ParamKind kind;
  int layer = -1;   // model layer, where applicable
  int expert = -1;  // routed/shared expert index within the layer
  int stream = -1;  // audio stream index for per-stream embeddings/heads
};

// A trainable tensor. Freezing drops requires_grad so no backward pass can
// accumulate into it; unfreezing restores it.
struct Parameter {
  Tensor value;
  ParamTag tag;
  bool frozen = false;

  Parameter() = default;
  Parameter(Tensor v, ParamTag t) : value(std::move(v)), tag(t) {
    value.requires_grad = true;
    value.ensure_grad();
  }

  void set_frozen(bool f) {
    frozen = f;
    value.requires_grad = !f;
    if (!f) value.ensure_grad();
  }
};

}  // namespace amoe
