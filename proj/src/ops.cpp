// SPDX-License-Identifier: Apache-2.0
#include "amoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "amoe/errors.hpp"

namespace amoe {

namespace {

bool want_grad(const Tensor& t) { return grad_enabled() && t.requires_grad; }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

void check_2d(const Tensor& t, const char* op) {
  if (t.shape.size() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
  }
}

Tensor make_out(std::vector<long> shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

void attach(Tensor& out, std::vector<Tensor> parents, std::function<void(Tensor&)> bw) {
  if (!out.requires_grad) return;
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(bw);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(b));
  const long n = a.numel();
  for (long i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  attach(out, {a, b}, [](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    Tensor& pb = o.node->parents[1];
    const long n2 = o.numel();
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (long i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (long i = 0; i < n2; ++i) (*pb.grad)[i] += (*o.grad)[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(b));
  const long n = a.numel();
  for (long i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  attach(out, {a, b}, [](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    Tensor& pb = o.node->parents[1];
    const long n2 = o.numel();
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (long i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (long i = 0; i < n2; ++i) (*pb.grad)[i] -= (*o.grad)[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(b));
  const long n = a.numel();
  for (long i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  attach(out, {a, b}, [](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    Tensor& pb = o.node->parents[1];
    const long n2 = o.numel();
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (long i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i] * (*pb.data)[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (long i = 0; i < n2; ++i) (*pb.grad)[i] += (*o.grad)[i] * (*pa.data)[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_out(a.shape, want_grad(a));
  const long n = a.numel();
  for (long i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * c;
  attach(out, {a}, [c](Tensor& o) {
    Tensor& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const long n2 = o.numel();
    for (long i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i] * c;
  });
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  check_2d(x, "add_rowvec");
  if (bias.numel() != x.cols()) {
    throw ShapeError("add_rowvec: bias " + bias.shape_str() + " does not match row width of " +
                     x.shape_str());
  }
  Tensor out = make_out(x.shape, want_grad(x) || want_grad(bias));
  const long n = x.rows(), m = x.cols();
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < m; ++j) out.at(i, j) = x.at(i, j) + (*bias.data)[j];
  attach(out, {x, bias}, [](Tensor& o) {
    Tensor& px = o.node->parents[0];
    Tensor& pb = o.node->parents[1];
    const long n2 = o.rows(), m2 = o.cols();
    if (px.requires_grad) {
      px.ensure_grad();
      const long total = o.numel();
      for (long i = 0; i < total; ++i) (*px.grad)[i] += (*o.grad)[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (long i = 0; i < n2; ++i)
        for (long j = 0; j < m2; ++j) (*pb.grad)[j] += (*o.grad)[i * m2 + j];
    }
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  const long n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = make_out({n, m}, want_grad(a) || want_grad(b));
  const double* pa = a.data->data();
  const double* pb = b.data->data();
  double* po = out.data->data();
  for (long i = 0; i < n; ++i) {
    for (long p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * m;
      double* orow = po + i * m;
      for (long j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  attach(out, {a, b}, [](Tensor& o) {
    Tensor& A = o.node->parents[0];
    Tensor& B = o.node->parents[1];
    const long n2 = A.rows(), k2 = A.cols(), m2 = B.cols();
    const double* g = o.grad->data();
    if (A.requires_grad) {
      A.ensure_grad();
      double* ga = A.grad->data();
      const double* pb2 = B.data->data();
      // dA = dC·Bᵀ
      for (long i = 0; i < n2; ++i)
        for (long p = 0; p < k2; ++p) {
          double s = 0.0;
          const double* grow = g + i * m2;
          const double* brow = pb2 + p * m2;
          for (long j = 0; j < m2; ++j) s += grow[j] * brow[j];
          ga[i * k2 + p] += s;
        }
    }
    if (B.requires_grad) {
      B.ensure_grad();
      double* gb = B.grad->data();
      const double* pa2 = A.data->data();
      // dB = Aᵀ·dC
      for (long i = 0; i < n2; ++i)
        for (long p = 0; p < k2; ++p) {
          const double av = pa2[i * k2 + p];
          if (av == 0.0) continue;
          const double* grow = g + i * m2;
          double* gbrow = gb + p * m2;
          for (long j = 0; j < m2; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions disagree " + a.shape_str() + " vs " +
                     b.shape_str() + " (transposed)");
  }
  const long n = a.rows(), k = a.cols(), m = b.rows();
  Tensor out = make_out({n, m}, want_grad(a) || want_grad(b));
  const double* pa = a.data->data();
  const double* pb = b.data->data();
  double* po = out.data->data();
  for (long i = 0; i < n; ++i) {
    const double* arow = pa + i * k;
    double* orow = po + i * m;
    for (long j = 0; j < m; ++j) {
      const double* brow = pb + j * k;
      double s = 0.0;
      for (long p = 0; p < k; ++p) s += arow[p] * brow[p];
      orow[j] = s;
    }
  }
  attach(out, {a, b}, [](Tensor& o) {
    Tensor& A = o.node->parents[0];
    Tensor& B = o.node->parents[1];
    const long n2 = A.rows(), k2 = A.cols(), m2 = B.rows();
    const double* g = o.grad->data();
    if (A.requires_grad) {
      A.ensure_grad();
      double* ga = A.grad->data();
      const double* pb2 = B.data->data();
      // dA = dC·B
      for (long i = 0; i < n2; ++i) {
        const double* grow = g + i * m2;
        double* garow = ga + i * k2;
        for (long j = 0; j < m2; ++j) {
          const double gv = grow[j];
          if (gv == 0.0) continue;
          const double* brow = pb2 + j * k2;
          for (long p = 0; p < k2; ++p) garow[p] += gv * brow[p];
        }
      }
    }
    if (B.requires_grad) {
      B.ensure_grad();
      double* gb = B.grad->data();
      const double* pa2 = A.data->data();
      // dB = dCᵀ·A
      for (long i = 0; i < n2; ++i) {
        const double* grow = g + i * m2;
        const double* arow = pa2 + i * k2;
        for (long j = 0; j < m2; ++j) {
          const double gv = grow[j];
          if (gv == 0.0) continue;
          double* gbrow = gb + j * k2;
          for (long p = 0; p < k2; ++p) gbrow[p] += gv * arow[p];
        }
      }
    }
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = make_out(x.shape, want_grad(x));
  const long n = x.numel();
  for (long i = 0; i < n; ++i) (*out.data)[i] = 1.0 / (1.0 + std::exp(-(*x.data)[i]));
  attach(out, {x}, [](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const long n2 = o.numel();
    for (long i = 0; i < n2; ++i) {
      const double s = (*o.data)[i];
      (*px.grad)[i] += (*o.grad)[i] * s * (1.0 - s);
    }
  });
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = make_out(x.shape, want_grad(x));
  const long n = x.numel();
  for (long i = 0; i < n; ++i) {
    const double v = (*x.data)[i];
    (*out.data)[i] = v / (1.0 + std::exp(-v));
  }
  attach(out, {x}, [](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const long n2 = o.numel();
    for (long i = 0; i < n2; ++i) {
      const double v = (*px.data)[i];
      const double s = 1.0 / (1.0 + std::exp(-v));
      (*px.grad)[i] += (*o.grad)[i] * s * (1.0 + v * (1.0 - s));
    }
  });
  return out;
}

namespace {

// Softmax of one stride-strided slice; -inf logits produce exact zeros.
void softmax_slice(const double* in, double* out, long count, long stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (long i = 0; i < count; ++i) {
    const double v = in[i * stride];
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
    mx = std::max(mx, v);
  }
  if (mx == -std::numeric_limits<double>::infinity()) {
    throw NumericError("softmax: all logits are -inf");
  }
  double sum = 0.0;
  for (long i = 0; i < count; ++i) {
    const double v = in[i * stride];
    const double e = (v == -std::numeric_limits<double>::infinity()) ? 0.0 : std::exp(v - mx);
    out[i * stride] = e;
    sum += e;
  }
  for (long i = 0; i < count; ++i) out[i * stride] /= sum;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  if (x.shape.size() == 1) {
    Tensor out = make_out(x.shape, want_grad(x));
    softmax_slice(x.data->data(), out.data->data(), x.numel(), 1);
    attach(out, {x}, [](Tensor& o) {
      Tensor& px = o.node->parents[0];
      if (!px.requires_grad) return;
      px.ensure_grad();
      const long n2 = o.numel();
      double dot = 0.0;
      for (long i = 0; i < n2; ++i) dot += (*o.grad)[i] * (*o.data)[i];
      for (long i = 0; i < n2; ++i)
        (*px.grad)[i] += (*o.data)[i] * ((*o.grad)[i] - dot);
    });
    return out;
  }
  check_2d(x, "softmax");
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  const long n = x.rows(), m = x.cols();
  Tensor out = make_out(x.shape, want_grad(x));
  if (axis == 1) {
    for (long i = 0; i < n; ++i)
      softmax_slice(x.data->data() + i * m, out.data->data() + i * m, m, 1);
  } else {
    for (long j = 0; j < m; ++j)
      softmax_slice(x.data->data() + j, out.data->data() + j, n, m);
  }
  attach(out, {x}, [axis](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const long n2 = o.rows(), m2 = o.cols();
    const long slices = (axis == 1) ? n2 : m2;
    const long count = (axis == 1) ? m2 : n2;
    const long stride = (axis == 1) ? 1 : m2;
    for (long s = 0; s < slices; ++s) {
      const long base = (axis == 1) ? s * m2 : s;
      double dot = 0.0;
      for (long i = 0; i < count; ++i)
        dot += (*o.grad)[base + i * stride] * (*o.data)[base + i * stride];
      for (long i = 0; i < count; ++i) {
        const double p = (*o.data)[base + i * stride];
        (*px.grad)[base + i * stride] += p * ((*o.grad)[base + i * stride] - dot);
      }
    }
  });
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  check_2d(x, "rmsnorm");
  if (weight.numel() != x.cols()) {
    throw ShapeError("rmsnorm: weight " + weight.shape_str() + " does not match row width of " +
                     x.shape_str());
  }
  const long n = x.rows(), m = x.cols();
  Tensor out = make_out(x.shape, want_grad(x) || want_grad(weight));
  for (long i = 0; i < n; ++i) {
    double ss = 0.0;
    for (long j = 0; j < m; ++j) ss += x.at(i, j) * x.at(i, j);
    const double inv_r = 1.0 / std::sqrt(ss / m + eps);
    for (long j = 0; j < m; ++j) out.at(i, j) = x.at(i, j) * inv_r * (*weight.data)[j];
  }
  attach(out, {x, weight}, [eps](Tensor& o) {
    Tensor& px = o.node->parents[0];
    Tensor& pw = o.node->parents[1];
    const long n2 = px.rows(), m2 = px.cols();
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    for (long i = 0; i < n2; ++i) {
      double ss = 0.0;
      for (long j = 0; j < m2; ++j) ss += px.at(i, j) * px.at(i, j);
      const double r2 = ss / m2 + eps;
      const double inv_r = 1.0 / std::sqrt(r2);
      if (pw.requires_grad) {
        for (long j = 0; j < m2; ++j)
          (*pw.grad)[j] += (*o.grad)[i * m2 + j] * px.at(i, j) * inv_r;
      }
      if (px.requires_grad) {
        double dot = 0.0;  // Σ_j g_j w_j x_j
        for (long j = 0; j < m2; ++j)
          dot += (*o.grad)[i * m2 + j] * (*pw.data)[j] * px.at(i, j);
        const double c = dot / (m2 * r2 * std::sqrt(r2));
        for (long j = 0; j < m2; ++j) {
          (*px.grad)[i * m2 + j] +=
              (*o.grad)[i * m2 + j] * (*pw.data)[j] * inv_r - px.at(i, j) * c;
        }
      }
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<bool>& mask) {
  check_2d(logits, "cross_entropy");
  const long n = logits.rows(), v = logits.cols();
  if (static_cast<long>(targets.size()) != n || static_cast<long>(mask.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for " +
                     std::to_string(n) + " rows");
  }
  long active = 0;
  for (long i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++active;
    if (targets[i] < 0 || targets[i] >= v) {
      throw ValidationError("cross_entropy: target " + std::to_string(targets[i]) +
                            " outside vocabulary of size " + std::to_string(v));
    }
  }
  if (active == 0) throw ValidationError("cross_entropy: mask selects no positions");

  double loss = 0.0;
  for (long i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double* row = logits.data->data() + i * v;
    double mx = row[0];
    for (long j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    if (std::isnan(mx)) throw NumericError("cross_entropy: NaN logits");
    double sum = 0.0;
    for (long j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    loss += std::log(sum) + mx - row[targets[i]];
  }
  Tensor out = Tensor::from({1}, {loss / active}, want_grad(logits));
  const long count = active;
  attach(out, {logits}, [targets, mask, count](Tensor& o) {
    Tensor& pl = o.node->parents[0];
    if (!pl.requires_grad) return;
    pl.ensure_grad();
    const long n2 = pl.rows(), v2 = pl.cols();
    const double g = (*o.grad)[0] / count;
    for (long i = 0; i < n2; ++i) {
      if (!mask[i]) continue;
      const double* row = pl.data->data() + i * v2;
      double* grow = pl.grad->data() + i * v2;
      double mx = row[0];
      for (long j = 1; j < v2; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (long j = 0; j < v2; ++j) sum += std::exp(row[j] - mx);
      for (long j = 0; j < v2; ++j) grow[j] += g * std::exp(row[j] - mx) / sum;
      grow[targets[i]] -= g;
    }
  });
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : *x.data) s += v;
  Tensor out = Tensor::from({1}, {s}, want_grad(x));
  attach(out, {x}, [](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const double g = (*o.grad)[0];
    for (double& gv : *px.grad) gv += g;
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  const long n = x.numel();
  double s = 0.0;
  for (double v : *x.data) s += v;
  Tensor out = Tensor::from({1}, {s / n}, want_grad(x));
  attach(out, {x}, [n](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const double g = (*o.grad)[0] / n;
    for (double& gv : *px.grad) gv += g;
  });
  return out;
}

Tensor rows(const Tensor& x, const std::vector<long>& indices) {
  check_2d(x, "rows");
  const long m = x.cols();
  Tensor out = make_out({static_cast<long>(indices.size()), m}, want_grad(x));
  for (size_t i = 0; i < indices.size(); ++i) {
    const long r = indices[i];
    if (r < 0 || r >= x.rows()) {
      throw ShapeError("rows: index " + std::to_string(r) + " out of range for " + x.shape_str());
    }
    std::copy_n(x.data->data() + r * m, m, out.data->data() + i * m);
  }
  attach(out, {x}, [indices](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const long m2 = px.cols();
    for (size_t i = 0; i < indices.size(); ++i) {
      const double* grow = o.grad->data() + i * m2;
      double* prow = px.grad->data() + indices[i] * m2;
      for (long j = 0; j < m2; ++j) prow[j] += grow[j];
    }
  });
  return out;
}

Tensor scatter_rows(const Tensor& x, const std::vector<long>& indices, long n_rows) {
  check_2d(x, "scatter_rows");
  if (static_cast<long>(indices.size()) != x.rows()) {
    throw ShapeError("scatter_rows: " + std::to_string(indices.size()) + " indices for " +
                     x.shape_str());
  }
  const long m = x.cols();
  Tensor out = make_out({n_rows, m}, want_grad(x));
  for (size_t i = 0; i < indices.size(); ++i) {
    const long r = indices[i];
    if (r < 0 || r >= n_rows) {
      throw ShapeError("scatter_rows: index " + std::to_string(r) + " out of range for " +
                       std::to_string(n_rows) + " rows");
    }
    std::copy_n(x.data->data() + i * m, m, out.data->data() + r * m);
  }
  attach(out, {x}, [indices](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const long m2 = px.cols();
    for (size_t i = 0; i < indices.size(); ++i) {
      const double* grow = o.grad->data() + indices[i] * m2;
      double* prow = px.grad->data() + i * m2;
      for (long j = 0; j < m2; ++j) prow[j] += grow[j];
    }
  });
  return out;
}

Tensor gather_per_row(const Tensor& x, const std::vector<std::vector<long>>& indices) {
  check_2d(x, "gather_per_row");
  const long n = x.rows(), m = x.cols();
  if (static_cast<long>(indices.size()) != n) {
    throw ShapeError("gather_per_row: " + std::to_string(indices.size()) + " index rows for " +
                     x.shape_str());
  }
  const long k = indices.empty() ? 0 : static_cast<long>(indices[0].size());
  Tensor out = make_out({n, k}, want_grad(x));
  for (long i = 0; i < n; ++i) {
    if (static_cast<long>(indices[i].size()) != k) {
      throw ShapeError("gather_per_row: ragged index rows");
    }
    for (long j = 0; j < k; ++j) {
      const long c = indices[i][j];
      if (c < 0 || c >= m) {
        throw ShapeError("gather_per_row: column " + std::to_string(c) + " out of range for " +
                         x.shape_str());
      }
      out.at(i, j) = x.at(i, c);
    }
  }
  attach(out, {x}, [indices](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const long k2 = o.cols(), m2 = px.cols();
    for (long i = 0; i < o.rows(); ++i)
      for (long j = 0; j < k2; ++j)
        (*px.grad)[i * m2 + indices[i][j]] += (*o.grad)[i * k2 + j];
  });
  return out;
}

Tensor column(const Tensor& x, long j) {
  check_2d(x, "column");
  if (j < 0 || j >= x.cols()) {
    throw ShapeError("column: index " + std::to_string(j) + " out of range for " + x.shape_str());
  }
  const long n = x.rows();
  Tensor out = make_out({n, 1}, want_grad(x));
  for (long i = 0; i < n; ++i) (*out.data)[i] = x.at(i, j);
  attach(out, {x}, [j](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const long m2 = px.cols();
    for (long i = 0; i < o.rows(); ++i) (*px.grad)[i * m2 + j] += (*o.grad)[i];
  });
  return out;
}

Tensor normalize_rows(const Tensor& x) {
  check_2d(x, "normalize_rows");
  const long n = x.rows(), m = x.cols();
  Tensor out = make_out(x.shape, want_grad(x));
  for (long i = 0; i < n; ++i) {
    double s = 0.0;
    for (long j = 0; j < m; ++j) s += x.at(i, j);
    if (s == 0.0) throw NumericError("normalize_rows: zero row sum at row " + std::to_string(i));
    for (long j = 0; j < m; ++j) out.at(i, j) = x.at(i, j) / s;
  }
  attach(out, {x}, [](Tensor& o) {
    Tensor& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const long n2 = o.rows(), m2 = o.cols();
    for (long i = 0; i < n2; ++i) {
      double s = 0.0;
      for (long j = 0; j < m2; ++j) s += px.at(i, j);
      double dot = 0.0;  // Σ_j g_j out_j
      for (long j = 0; j < m2; ++j) dot += (*o.grad)[i * m2 + j] * (*o.data)[i * m2 + j];
      for (long j = 0; j < m2; ++j)
        (*px.grad)[i * m2 + j] += ((*o.grad)[i * m2 + j] - dot) / s;
    }
  });
  return out;
}

Tensor mul_colvec(const Tensor& x, const Tensor& c) {
  check_2d(x, "mul_colvec");
  if (c.rows() != x.rows() || c.cols() != 1) {
    throw ShapeError("mul_colvec: column vector " + c.shape_str() + " does not match " +
                     x.shape_str());
  }
  const long n = x.rows(), m = x.cols();
  Tensor out = make_out(x.shape, want_grad(x) || want_grad(c));
  for (long i = 0; i < n; ++i) {
    const double cv = (*c.data)[i];
    for (long j = 0; j < m; ++j) out.at(i, j) = x.at(i, j) * cv;
  }
  attach(out, {x, c}, [](Tensor& o) {
    Tensor& px = o.node->parents[0];
    Tensor& pc = o.node->parents[1];
    const long n2 = o.rows(), m2 = o.cols();
    if (px.requires_grad) {
      px.ensure_grad();
      for (long i = 0; i < n2; ++i) {
        const double cv = (*pc.data)[i];
        for (long j = 0; j < m2; ++j) (*px.grad)[i * m2 + j] += (*o.grad)[i * m2 + j] * cv;
      }
    }
    if (pc.requires_grad) {
      pc.ensure_grad();
      for (long i = 0; i < n2; ++i) {
        double s = 0.0;
        for (long j = 0; j < m2; ++j) s += (*o.grad)[i * m2 + j] * (*px.data)[i * m2 + j];
        (*pc.grad)[i] += s;
      }
    }
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const long m = parts[0].cols();
  long n = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_rows");
    if (p.cols() != m) {
      throw ShapeError("concat_rows: width mismatch " + parts[0].shape_str() + " vs " +
                       p.shape_str());
    }
    n += p.rows();
    rg = rg || want_grad(p);
  }
  Tensor out = make_out({n, m}, rg);
  long at = 0;
  for (const Tensor& p : parts) {
    std::copy_n(p.data->data(), p.numel(), out.data->data() + at);
    at += p.numel();
  }
  attach(out, parts, [](Tensor& o) {
    long offset = 0;
    for (Tensor& p : o.node->parents) {
      const long count = p.numel();
      if (p.requires_grad) {
        p.ensure_grad();
        for (long i = 0; i < count; ++i) (*p.grad)[i] += (*o.grad)[offset + i];
      }
      offset += count;
    }
  });
  return out;
}

std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                           std::vector<double>& x, double h) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f();
    x[i] = saved - h;
    const double fm = f();
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_grad: non-finite objective");
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace amoe
