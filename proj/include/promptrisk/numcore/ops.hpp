#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "promptrisk/numcore/graph.hpp"

namespace promptrisk::nc {

namespace detail {

inline Graph& graph_of(Var v) { return *v.graph; }

inline void same_graph(Var a, Var b, const char* op) {
  if (a.graph != b.graph) throw DimensionError(std::string(op) + ": operands belong to different graphs");
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// C = A B
inline Var matmul(Var a, Var b) {
  detail::same_graph(a, b, "matmul");
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  detail::require(B.rows() == k, "matmul", [&] { return "inner dimensions differ: " + shape_str(A.shape) + " x " + shape_str(B.shape); });
  Tensor C = Tensor::matrix(m, n);
  kernel::gemm_nn_acc(A.data.data(), B.data.data(), C.data.data(), m, k, n);
  return g.record(std::move(C), {a, b}, [a, b, m, k, n](Var out) {
    Graph& g = *out.graph;
    const auto& dC = g.grad(out);
    if (g.requires_grad(a)) kernel::gemm_nt_acc(dC.data(), g.value(b).data.data(), g.grad(a).data(), m, n, k);
    if (g.requires_grad(b)) kernel::gemm_tn_acc(g.value(a).data.data(), dC.data(), g.grad(b).data(), m, k, n);
  });
}

// C = A B^T
inline Var matmul_bt(Var a, Var b) {
  detail::same_graph(a, b, "matmul_bt");
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require_matrix(A, "matmul_bt");
  detail::require_matrix(B, "matmul_bt");
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  detail::require(B.cols() == k, "matmul_bt", [&] { return "inner dimensions differ: " + shape_str(A.shape) + " x " + shape_str(B.shape) + "^T"; });
  Tensor C = Tensor::matrix(m, n);
  kernel::gemm_nt_acc(A.data.data(), B.data.data(), C.data.data(), m, k, n);
  return g.record(std::move(C), {a, b}, [a, b, m, k, n](Var out) {
    Graph& g = *out.graph;
    const auto& dC = g.grad(out);
    if (g.requires_grad(a)) kernel::gemm_nn_acc(dC.data(), g.value(b).data.data(), g.grad(a).data(), m, n, k);
    if (g.requires_grad(b)) kernel::gemm_tn_acc(dC.data(), g.value(a).data.data(), g.grad(b).data(), m, n, k);
  });
}

inline Var add(Var a, Var b) {
  detail::same_graph(a, b, "add");
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require(A.shape == B.shape, "add", [&] { return "shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape); });
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
  return g.record(std::move(C), {a, b}, [a, b](Var out) {
    Graph& g = *out.graph;
    const auto& dC = g.grad(out);
    if (g.requires_grad(a)) detail::add_into(g.grad(a), dC);
    if (g.requires_grad(b)) detail::add_into(g.grad(b), dC);
  });
}

// x[m,n] + bias[n] broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  detail::same_graph(x, bias, "add_bias");
  Graph& g = *x.graph;
  const Tensor& X = g.value(x);
  const Tensor& B = g.value(bias);
  const std::size_t m = X.rows(), n = X.cols();
  detail::require(B.size() == n, "add_bias", [&] { return "bias of size " + std::to_string(B.size()) + " for " + shape_str(X.shape); });
  Tensor C = X;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.data[i * n + j] += B.data[j];
  return g.record(std::move(C), {x, bias}, [x, bias, m, n](Var out) {
    Graph& g = *out.graph;
    const auto& dC = g.grad(out);
    if (g.requires_grad(x)) detail::add_into(g.grad(x), dC);
    if (g.requires_grad(bias)) {
      auto& dB = g.grad(bias);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dB[j] += dC[i * n + j];
    }
  });
}

inline Var scale(Var x, double s) {
  Graph& g = *x.graph;
  Tensor C = g.value(x);
  for (double& v : C.data) v *= s;
  return g.record(std::move(C), {x}, [x, s](Var out) {
    Graph& g = *out.graph;
    const auto& dC = g.grad(out);
    auto& dX = g.grad(x);
    for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += s * dC[i];
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::same_graph(a, b, "mul");
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require(A.shape == B.shape, "mul", [&] { return "shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape); });
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] *= B.data[i];
  return g.record(std::move(C), {a, b}, [a, b](Var out) {
    Graph& g = *out.graph;
    const auto& dC = g.grad(out);
    const auto& Av = g.value(a).data;
    const auto& Bv = g.value(b).data;
    if (g.requires_grad(a)) {
      auto& dA = g.grad(a);
      for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += dC[i] * Bv[i];
    }
    if (g.requires_grad(b)) {
      auto& dB = g.grad(b);
      for (std::size_t i = 0; i < dB.size(); ++i) dB[i] += dC[i] * Av[i];
    }
  });
}

inline Var tanh(Var x) {
  Graph& g = *x.graph;
  Tensor Y = g.value(x);
  for (double& v : Y.data) v = std::tanh(v);
  return g.record(std::move(Y), {x}, [x](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    const auto& Y = g.value(out).data;
    auto& dX = g.grad(x);
    for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += dY[i] * (1.0 - Y[i] * Y[i]);
  });
}

// Exact GELU: x * Phi(x).
inline Var gelu(Var x) {
  Graph& g = *x.graph;
  Tensor Y = g.value(x);
  for (double& v : Y.data) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return g.record(std::move(Y), {x}, [x](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    const auto& X = g.value(x).data;
    auto& dX = g.grad(x);
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < dX.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(X[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * X[i] * X[i]);
      dX[i] += dY[i] * (cdf + X[i] * pdf);
    }
  });
}

// Row-wise softmax over the last dimension.
inline Var softmax(Var x) {
  Graph& g = *x.graph;
  Tensor Y = g.value(x);
  const std::size_t m = Y.rows(), n = Y.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* r = Y.data.data() + i * n;
    const double mx = *std::max_element(r, r + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (r[j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < n; ++j) r[j] /= s;
  }
  return g.record(std::move(Y), {x}, [x, m, n](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    const auto& Y = g.value(out).data;
    auto& dX = g.grad(x);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dY[i * n + j] * Y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) dX[i * n + j] += Y[i * n + j] * (dY[i * n + j] - dot);
    }
  });
}

// Row-wise normalisation followed by the affine map gamma * xhat + beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::same_graph(x, gamma, "layer_norm");
  detail::same_graph(x, beta, "layer_norm");
  Graph& g = *x.graph;
  const Tensor& X = g.value(x);
  const std::size_t m = X.rows(), n = X.cols();
  detail::require(g.value(gamma).size() == n && g.value(beta).size() == n, "layer_norm", [&] { return
                  "affine parameters must have size " + std::to_string(n); });
  const auto& G = g.value(gamma).data;
  const auto& Bt = g.value(beta).data;
  Tensor Y(X.shape);
  std::vector<double> xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = X.data.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += r[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (r[j] - mean) * inv_std[i];
      Y.data[i * n + j] = G[j] * xhat[i * n + j] + Bt[j];
    }
  }
  return g.record(std::move(Y), {x, gamma, beta},
                  [x, gamma, beta, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Var out) {
                    Graph& g = *out.graph;
                    const auto& dY = g.grad(out);
                    if (g.requires_grad(gamma)) {
                      auto& dG = g.grad(gamma);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dG[j] += dY[i * n + j] * xhat[i * n + j];
                    }
                    if (g.requires_grad(beta)) {
                      auto& dB = g.grad(beta);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dB[j] += dY[i * n + j];
                    }
                    if (g.requires_grad(x)) {
                      const auto& G = g.value(gamma).data;
                      auto& dX = g.grad(x);
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t i = 0; i < m; ++i) {
                        double s1 = 0.0, s2 = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double dxh = dY[i * n + j] * G[j];
                          s1 += dxh;
                          s2 += dxh * xhat[i * n + j];
                        }
                        for (std::size_t j = 0; j < n; ++j) {
                          const double dxh = dY[i * n + j] * G[j];
                          dX[i * n + j] += inv_std[i] * (dxh - s1 * inv_n - xhat[i * n + j] * s2 * inv_n);
                        }
                      }
                    }
                  });
}

// Rows of `table` selected by `ids`.
inline Var embedding(Var table, std::span<const std::int32_t> ids) {
  Graph& g = *table.graph;
  const Tensor& T = g.value(table);
  detail::require_matrix(T, "embedding");
  const std::size_t d = T.cols();
  Tensor Y = Tensor::matrix(ids.size(), d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    detail::require(ids[t] >= 0 && static_cast<std::size_t>(ids[t]) < T.rows(), "embedding", [&] { return
                    "id " + std::to_string(ids[t]) + " out of range for table " + shape_str(T.shape); });
    std::copy_n(T.data.data() + static_cast<std::size_t>(ids[t]) * d, d, Y.data.data() + t * d);
  }
  return g.record(std::move(Y), {table}, [table, d, ids = std::vector<std::int32_t>(ids.begin(), ids.end())](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    auto& dT = g.grad(table);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      double* dst = dT.data() + static_cast<std::size_t>(ids[t]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += dY[t * d + j];
    }
  });
}

// Stacks matrices with equal column counts.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Graph& g = *parts[0].graph;
  const std::size_t n = g.value(parts[0]).cols();
  std::size_t m = 0;
  for (Var p : parts) {
    detail::same_graph(parts[0], p, "concat_rows");
    detail::require(g.value(p).cols() == n, "concat_rows", "column counts differ");
    m += g.value(p).rows();
  }
  Tensor Y = Tensor::matrix(m, n);
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& v = g.value(p).data;
    std::copy(v.begin(), v.end(), Y.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return g.record_many(std::move(Y), parts, [keep](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    std::size_t off = 0;
    for (Var p : keep) {
      const std::size_t sz = g.value(p).size();
      if (g.requires_grad(p)) {
        auto& dP = g.grad(p);
        for (std::size_t i = 0; i < sz; ++i) dP[i] += dY[off + i];
      }
      off += sz;
    }
  });
}

inline Var slice_cols(Var x, std::size_t start, std::size_t width) {
  Graph& g = *x.graph;
  const Tensor& X = g.value(x);
  const std::size_t m = X.rows(), n = X.cols();
  detail::require(start + width <= n, "slice_cols", [&] {
    return "columns [" + std::to_string(start) + ", " + std::to_string(start + width) + ") outside " + shape_str(X.shape);
  });
  Tensor Y = Tensor::matrix(m, width);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(X.data.data() + i * n + start, width, Y.data.data() + i * width);
  return g.record(std::move(Y), {x}, [x, m, n, start, width](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    auto& dX = g.grad(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < width; ++j) dX[i * n + start + j] += dY[i * width + j];
  });
}

// Joins matrices with equal row counts side by side.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Graph& g = *parts[0].graph;
  const std::size_t m = g.value(parts[0]).rows();
  std::size_t n = 0;
  for (Var p : parts) {
    detail::same_graph(parts[0], p, "concat_cols");
    detail::require(g.value(p).rows() == m, "concat_cols", "row counts differ");
    n += g.value(p).cols();
  }
  Tensor Y = Tensor::matrix(m, n);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& P = g.value(p);
    const std::size_t w = P.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(P.data.data() + i * w, w, Y.data.data() + i * n + off);
    off += w;
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return g.record_many(std::move(Y), parts, [keep, m, n](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    std::size_t off = 0;
    for (Var p : keep) {
      const std::size_t w = g.value(p).cols();
      if (g.requires_grad(p)) {
        auto& dP = g.grad(p);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) dP[i * w + j] += dY[i * n + off + j];
      }
      off += w;
    }
  });
}

inline Var select_rows(Var x, std::vector<std::size_t> rows) {
  Graph& g = *x.graph;
  const Tensor& X = g.value(x);
  const std::size_t n = X.cols();
  Tensor Y = Tensor::matrix(rows.size(), n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::require(rows[r] < X.rows(), "select_rows", [&] { return "row " + std::to_string(rows[r]) + " outside " + shape_str(X.shape); });
    std::copy_n(X.data.data() + rows[r] * n, n, Y.data.data() + r * n);
  }
  return g.record(std::move(Y), {x}, [x, n, rows = std::move(rows)](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    auto& dX = g.grad(x);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) dX[rows[r] * n + j] += dY[r * n + j];
  });
}

// Inverted dropout; identity when rate is zero.
inline Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  Graph& g = *x.graph;
  Tensor Y = g.value(x);
  std::vector<double> mask(Y.size());
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < Y.size(); ++i) {
    mask[i] = keep(rng) ? s : 0.0;
    Y.data[i] *= mask[i];
  }
  return g.record(std::move(Y), {x}, [x, mask = std::move(mask)](Var out) {
    Graph& g = *out.graph;
    const auto& dY = g.grad(out);
    auto& dX = g.grad(x);
    for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += dY[i] * mask[i];
  });
}

inline Var sum(Var x) {
  Graph& g = *x.graph;
  double s = 0.0;
  for (double v : g.value(x).data) s += v;
  return g.record(Tensor::scalar(s), {x}, [x](Var out) {
    Graph& g = *out.graph;
    const double d = g.grad(out)[0];
    for (double& v : g.grad(x)) v += d;
  });
}

inline Var mean(Var x) {
  const auto n = x.graph->value(x).size();
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

// Mean softmax cross-entropy of logits[m, classes] against integer targets.
inline Var cross_entropy(Var logits, std::span<const std::int32_t> targets) {
  Graph& g = *logits.graph;
  const Tensor& L = g.value(logits);
  detail::require_matrix(L, "cross_entropy");
  const std::size_t m = L.rows(), c = L.cols();
  detail::require(targets.size() == m, "cross_entropy", [&] { return
                  std::to_string(targets.size()) + " targets for " + std::to_string(m) + " rows"; });
  detail::require(m > 0, "cross_entropy", "no rows");
  std::vector<double> probs(m * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    detail::require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < c, "cross_entropy", "target out of range");
    const double* r = L.data.data() + i * c;
    const double mx = *std::max_element(r, r + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (probs[i * c + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    loss += (mx + std::log(s)) - r[targets[i]];
  }
  loss /= static_cast<double>(m);
  return g.record(Tensor::scalar(loss), {logits},
                  [logits, m, c, probs = std::move(probs), t = std::vector<std::int32_t>(targets.begin(), targets.end())](Var out) {
                    Graph& g = *out.graph;
                    const double d = g.grad(out)[0] / static_cast<double>(m);
                    auto& dL = g.grad(logits);
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t j = 0; j < c; ++j) dL[i * c + j] += d * probs[i * c + j];
                      dL[i * c + static_cast<std::size_t>(t[i])] -= d;
                    }
                  });
}

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// Mean binary cross-entropy of sigmoid(logits) against labels in [0, 1].
inline Var bce_with_logits(Var logits, std::span<const double> labels) {
  Graph& g = *logits.graph;
  const Tensor& Z = g.value(logits);
  detail::require(Z.size() == labels.size() && !labels.empty(), "bce_with_logits", [&] { return
                  std::to_string(labels.size()) + " labels for " + std::to_string(Z.size()) + " logits"; });
  double loss = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) {
    const double z = Z.data[i];
    loss += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(Z.size());
  return g.record(Tensor::scalar(loss), {logits}, [logits, y = std::vector<double>(labels.begin(), labels.end())](Var out) {
    Graph& g = *out.graph;
    const double d = g.grad(out)[0] / static_cast<double>(y.size());
    const auto& Z = g.value(logits).data;
    auto& dZ = g.grad(logits);
    for (std::size_t i = 0; i < y.size(); ++i) dZ[i] += d * (sigmoid(Z[i]) - y[i]);
  });
}

}  // namespace promptrisk::nc
