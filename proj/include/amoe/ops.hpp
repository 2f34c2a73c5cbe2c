// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "amoe/tensor.hpp"

namespace amoe {

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// Adds a length-m row vector to every row of an n×m tensor.
Tensor add_rowvec(const Tensor& x, const Tensor& bias);

// C = A·B for 2-D tensors (n×k by k×m).
Tensor matmul(const Tensor& a, const Tensor& b);
// C = A·Bᵀ where b is stored m×k; the natural layout for weight matrices.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor sigmoid(const Tensor& x);
// x · sigmoid(x), the expert nonlinearity.
Tensor silu(const Tensor& x);

// Max-subtraction stabilized softmax along rows (axis=1) or columns (axis=0)
// of a 2-D tensor. -inf logits yield exactly-zero probabilities; NaN inputs
// raise NumericError.
Tensor softmax(const Tensor& x, int axis = 1);

// RMS normalization over each row, scaled by a length-m weight vector.
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps = 1e-6);

// Mean negative log-likelihood of targets under row-wise softmax(logits),
// restricted to positions where mask is true. Errors when the mask is empty.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<bool>& mask);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Row gather: out[i] = x[indices[i]]. Backward scatter-adds.
Tensor rows(const Tensor& x, const std::vector<long>& indices);
// Inverse of rows(): places row i of x at out[indices[i]] in an n_rows×m
// tensor of zeros. Indices must be distinct.
Tensor scatter_rows(const Tensor& x, const std::vector<long>& indices, long n_rows);

// out[i][j] = x[i][indices[i][j]]; per-row column gather (n×E -> n×k).
Tensor gather_per_row(const Tensor& x, const std::vector<std::vector<long>>& indices);
// Column j of a 2-D tensor as n×1.
Tensor column(const Tensor& x, long j);
// Rows rescaled to sum to 1.
Tensor normalize_rows(const Tensor& x);
// Scales row i of x by c[i] (c is n×1).
Tensor mul_colvec(const Tensor& x, const Tensor& c);

// Stacks 2-D tensors of equal width along rows.
Tensor concat_rows(const std::vector<Tensor>& parts);

// Central finite differences with step h on the given buffer; f is evaluated
// with elements of x perturbed in place and must be deterministic.
std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                           std::vector<double>& x, double h = 1e-5);

}  // namespace amoe
