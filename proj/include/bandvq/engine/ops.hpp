#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "bandvq/engine/tensor.hpp"
#include "bandvq/fft.hpp"
#include "bandvq/rng.hpp"

// Differentiable primitives. Every op computes its value eagerly and, when an
// input requires grad, records a closure that accumulates into the parents.

namespace bandvq::engine {

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MapR = Eigen::Map<MatR<T>>;

template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

template <class T>
CMapR<T> cmat(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return CMapR<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
MapR<T> mat(std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return MapR<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_rank(const char* op, const Shape& s, std::size_t r) {
  if (s.size() != r) shape_fail(op, s, "must have rank " + std::to_string(r));
}

template <class T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> identity(const Tensor<T>& x) {
  return Tensor<T>::from_op("identity", x.shape(), x.values(), {x.node()}, [](Node<T>& n) {
    auto& gx = n.parents[0]->grad;
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("add", a, b);
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor<T>::from_op("add", a.shape(), std::move(out), {a.node(), b.node()},
                            [](Node<T>& n) {
                              for (int k = 0; k < 2; ++k) {
                                auto& p = *n.parents[k];
                                if (!p.requires_grad) continue;
                                for (std::size_t i = 0; i < n.grad.size(); ++i)
                                  p.grad[i] += n.grad[i];
                              }
                            });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("sub", a, b);
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor<T>::from_op("sub", a.shape(), std::move(out), {a.node(), b.node()},
                            [](Node<T>& n) {
                              auto& pa = *n.parents[0];
                              auto& pb = *n.parents[1];
                              for (std::size_t i = 0; i < n.grad.size(); ++i) {
                                if (pa.requires_grad) pa.grad[i] += n.grad[i];
                                if (pb.requires_grad) pb.grad[i] -= n.grad[i];
                              }
                            });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("mul", a, b);
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return Tensor<T>::from_op("mul", a.shape(), std::move(out), {a.node(), b.node()},
                            [](Node<T>& n) {
                              auto& pa = *n.parents[0];
                              auto& pb = *n.parents[1];
                              for (std::size_t i = 0; i < n.grad.size(); ++i) {
                                if (pa.requires_grad) pa.grad[i] += n.grad[i] * pb.value[i];
                                if (pb.requires_grad) pb.grad[i] += n.grad[i] * pa.value[i];
                              }
                            });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.values());
  for (auto& v : out) v *= c;
  return Tensor<T>::from_op("scale", x.shape(), std::move(out), {x.node()}, [c](Node<T>& n) {
    auto& gx = n.parents[0]->grad;
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += c * n.grad[i];
  });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = std::abs(v);
  return Tensor<T>::from_op("abs", x.shape(), std::move(out), {x.node()}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const T v = p.value[i];
      p.grad[i] += v > T(0) ? n.grad[i] : (v < T(0) ? -n.grad[i] : T(0));
    }
  });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v *= v;
  return Tensor<T>::from_op("square", x.shape(), std::move(out), {x.node()}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += T(2) * p.value[i] * n.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return Tensor<T>::from_op("sum", {}, {s}, {x.node()}, [](Node<T>& n) {
    auto& gx = n.parents[0]->grad;
    for (auto& g : gx) g += n.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) shape_fail("mean", x.shape(), "is empty");
  const T inv = T(1) / static_cast<T>(x.numel());
  T s = T(0);
  for (T v : x.values()) s += v;
  return Tensor<T>::from_op("mean", {}, {s * inv}, {x.node()}, [inv](Node<T>& n) {
    auto& gx = n.parents[0]->grad;
    for (auto& g : gx) g += n.grad[0] * inv;
  });
}

/// Sum of scalars (loss terms) as one node.
template <class T>
Tensor<T> add_scalars(const std::vector<Tensor<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("add_scalars: weight count mismatch");
  T s = T(0);
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].numel() != 1) shape_fail("add_scalars", terms[i].shape(), "is not a scalar");
    s += weights[i] * terms[i].item();
    parents.push_back(terms[i].node());
  }
  return Tensor<T>::from_op("add_scalars", {}, {s}, std::move(parents), [weights](Node<T>& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i)
      if (n.parents[i]->requires_grad) n.parents[i]->grad[0] += weights[i] * n.grad[0];
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  return Tensor<T>::from_op("reshape", std::move(shape), x.values(), {x.node()}, [](Node<T>& n) {
    auto& gx = n.parents[0]->grad;
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank("transpose", x.shape(), 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  const auto& v = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return Tensor<T>::from_op("transpose", {c, r}, std::move(out), {x.node()},
                            [r, c](Node<T>& n) {
                              auto& gx = n.parents[0]->grad;
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  gx[i * c + j] += n.grad[j * r + i];
                            });
}

/// Columns [start, start + count) of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_rank("slice_cols", x.shape(), 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (start + count > c) shape_fail("slice_cols", x.shape(), "is too narrow for the slice");
  std::vector<T> out(r * count);
  const auto& v = x.values();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * c + start), count,
                out.begin() + static_cast<std::ptrdiff_t>(i * count));
  return Tensor<T>::from_op("slice_cols", {r, count}, std::move(out), {x.node()},
                            [r, c, start, count](Node<T>& n) {
                              auto& gx = n.parents[0]->grad;
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < count; ++j)
                                  gx[i * c + start + j] += n.grad[i * count + j];
                            });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& p : parts) {
    detail::require_rank("concat_cols", p.shape(), 2);
    if (p.dim(0) != r) shape_fail("concat_cols", parts[0].shape(), p.shape());
    widths.push_back(p.dim(1));
    total += p.dim(1);
    parents.push_back(p.node());
  }
  std::vector<T> out(r * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].values();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = v[i * widths[k] + j];
    off += widths[k];
  }
  return Tensor<T>::from_op("concat_cols", {r, total}, std::move(out), std::move(parents),
                            [r, total, widths](Node<T>& n) {
                              std::size_t o = 0;
                              for (std::size_t k = 0; k < widths.size(); ++k) {
                                auto& p = *n.parents[k];
                                if (p.requires_grad)
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < widths[k]; ++j)
                                      p.grad[i * widths[k] + j] += n.grad[i * total + o + j];
                                o += widths[k];
                              }
                            });
}

/// Stacks tensors along their leading dimension; trailing dims must agree.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.rank() == 0) shape_fail("concat_rows", p.shape(), "has no leading dimension");
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) shape_fail("concat_rows", parts[0].shape(), p.shape());
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node());
  }
  Shape shape = tail;
  shape.insert(shape.begin(), rows);
  return Tensor<T>::from_op("concat_rows", std::move(shape), std::move(out), std::move(parents),
                            [](Node<T>& n) {
                              std::size_t o = 0;
                              for (auto& p : n.parents) {
                                const std::size_t m = p->value.size();
                                if (p->requires_grad)
                                  for (std::size_t i = 0; i < m; ++i) p->grad[i] += n.grad[o + i];
                                o += m;
                              }
                            });
}

/// Rows [start, start + count) along the leading dimension.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  if (x.rank() == 0 || start + count > x.dim(0))
    shape_fail("slice_rows", x.shape(), "is too short for the slice");
  const std::size_t row = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  std::vector<T> out(x.values().begin() + static_cast<std::ptrdiff_t>(start * row),
                     x.values().begin() + static_cast<std::ptrdiff_t>((start + count) * row));
  return Tensor<T>::from_op("slice_rows", std::move(shape), std::move(out), {x.node()},
                            [start, row](Node<T>& n) {
                              auto& gx = n.parents[0]->grad;
                              for (std::size_t i = 0; i < n.grad.size(); ++i)
                                gx[start * row + i] += n.grad[i];
                            });
}

/// Selects rows of a matrix by index (repeats allowed).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  detail::require_rank("gather_rows", x.shape(), 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(idx.size() * c);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= r)
      throw ArgumentError("gather_rows: index " + std::to_string(idx[k]) + " out of range for " +
                          shape_str(x.shape()));
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(idx[k] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(k * c));
  }
  return Tensor<T>::from_op("gather_rows", {idx.size(), c}, std::move(out), {x.node()},
                            [idx, c](Node<T>& n) {
                              auto& gx = n.parents[0]->grad;
                              for (std::size_t k = 0; k < idx.size(); ++k)
                                for (std::size_t j = 0; j < c; ++j)
                                  gx[idx[k] * c + j] += n.grad[k * c + j];
                            });
}

/// Value of x, no gradient flows back.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), x.values());
}

/// Forward value is z_q; the incoming gradient is routed unchanged to z_e.
template <class T>
Tensor<T> straight_through(const Tensor<T>& z_e, const Tensor<T>& z_q) {
  detail::require_same("straight_through", z_e, z_q);
  return Tensor<T>::from_op("straight_through", z_q.shape(), z_q.values(), {z_e.node()},
                            [](Node<T>& n) {
                              auto& gx = n.parents[0]->grad;
                              for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
                            });
}

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

/// [m,k] x [k,n] -> [m,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_fail("matmul", a.shape(), b.shape());
  std::vector<T> out(m * n);
  detail::mat(out, m, n).noalias() = detail::cmat(a.values(), m, k) * detail::cmat(b.values(), k, n);
  return Tensor<T>::from_op("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                            [m, k, n](Node<T>& nd) {
                              auto g = detail::cmat(nd.grad, m, n);
                              auto& pa = *nd.parents[0];
                              auto& pb = *nd.parents[1];
                              if (pa.requires_grad)
                                detail::mat(pa.grad, m, k).noalias() +=
                                    g * detail::cmat(pb.value, k, n).transpose();
                              if (pb.requires_grad)
                                detail::mat(pb.grad, k, n).noalias() +=
                                    detail::cmat(pa.value, m, k).transpose() * g;
                            });
}

/// [m,k] x [n,k]^T -> [m,n]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul_nt", a.shape(), 2);
  detail::require_rank("matmul_nt", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) shape_fail("matmul_nt", a.shape(), b.shape());
  std::vector<T> out(m * n);
  detail::mat(out, m, n).noalias() =
      detail::cmat(a.values(), m, k) * detail::cmat(b.values(), n, k).transpose();
  return Tensor<T>::from_op("matmul_nt", {m, n}, std::move(out), {a.node(), b.node()},
                            [m, k, n](Node<T>& nd) {
                              auto g = detail::cmat(nd.grad, m, n);
                              auto& pa = *nd.parents[0];
                              auto& pb = *nd.parents[1];
                              if (pa.requires_grad)
                                detail::mat(pa.grad, m, k).noalias() +=
                                    g * detail::cmat(pb.value, n, k);
                              if (pb.requires_grad)
                                detail::mat(pb.grad, n, k).noalias() +=
                                    g.transpose() * detail::cmat(pa.value, m, k);
                            });
}

/// Adds a length-n vector to every row of an [m,n] matrix.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank("add_bias", x.shape(), 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) shape_fail("add_bias", x.shape(), bias.shape());
  std::vector<T> out(x.values());
  const auto& b = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return Tensor<T>::from_op("add_bias", x.shape(), std::move(out), {x.node(), bias.node()},
                            [m, n](Node<T>& nd) {
                              auto& px = *nd.parents[0];
                              auto& pb = *nd.parents[1];
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j) {
                                  const T g = nd.grad[i * n + j];
                                  if (px.requires_grad) px.grad[i * n + j] += g;
                                  if (pb.requires_grad) pb.grad[j] += g;
                                }
                            });
}

/// x [m,in] * w[out,in]^T + b
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  auto y = matmul_nt(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<T> out(x.values());
  for (auto& v : out) v = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  return Tensor<T>::from_op("gelu", x.shape(), std::move(out), {x.node()}, [](Node<T>& n) {
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double v = p.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      p.grad[i] += static_cast<T>(n.grad[i] * (cdf + v * pdf));
    }
  });
}

/// Softmax over the last dimension.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) shape_fail("softmax", x.shape(), "has no last dimension");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.values());
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= s;
  }
  return Tensor<T>::from_op("softmax", x.shape(), std::move(out), {x.node()},
                            [rows, n](Node<T>& nd) {
                              auto& gx = nd.parents[0]->grad;
                              for (std::size_t r = 0; r < rows; ++r) {
                                const T* y = nd.value.data() + r * n;
                                const T* g = nd.grad.data() + r * n;
                                T dot = T(0);
                                for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
                                for (std::size_t j = 0; j < n; ++j)
                                  gx[r * n + j] += y[j] * (g[j] - dot);
                              }
                            });
}

/// Mean cross-entropy of row-wise logits [m,K] against integer targets.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  detail::require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  if (targets.size() != m)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.shape()) + " logits");
  if (m == 0) shape_fail("cross_entropy", logits.shape(), "has no rows");
  std::vector<T> probs(m * k);
  double loss = 0.0;
  const auto& v = logits.values();
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= k)
      throw ArgumentError("cross_entropy: target " + std::to_string(targets[r]) +
                          " out of range for " + std::to_string(k) + " classes");
    const T* row = v.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(s);
    loss += lse - static_cast<double>(row[targets[r]]);
    for (std::size_t j = 0; j < k; ++j)
      probs[r * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
  }
  const T inv_m = T(1) / static_cast<T>(m);
  return Tensor<T>::from_op(
      "cross_entropy", {}, {static_cast<T>(loss / static_cast<double>(m))}, {logits.node()},
      [probs = std::move(probs), targets, m, k, inv_m](Node<T>& nd) {
        auto& gx = nd.parents[0]->grad;
        const T g = nd.grad[0] * inv_m;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < k; ++j)
            gx[r * k + j] += g * (probs[r * k + j] - (j == targets[r] ? T(1) : T(0)));
      });
}

/// Row-wise layer normalization of [m,n] with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  detail::require_rank("layer_norm", x.shape(), 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n) shape_fail("layer_norm", x.shape(), gamma.shape());
  std::vector<T> xhat(m * n), inv_std(m), out(m * n);
  const auto& v = x.values();
  const auto& g = gamma.values();
  const auto& b = beta.values();
  for (std::size_t r = 0; r < m; ++r) {
    T mu = T(0);
    for (std::size_t j = 0; j < n; ++j) mu += v[r * n + j];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T d = v[r * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (v[r * n + j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * g[j] + b[j];
    }
  }
  return Tensor<T>::from_op(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pg = *nd.parents[1];
        auto& pb = *nd.parents[2];
        for (std::size_t r = 0; r < m; ++r) {
          const T* gy = nd.grad.data() + r * n;
          const T* xh = xhat.data() + r * n;
          if (pg.requires_grad || pb.requires_grad)
            for (std::size_t j = 0; j < n; ++j) {
              if (pg.requires_grad) pg.grad[j] += gy[j] * xh[j];
              if (pb.requires_grad) pb.grad[j] += gy[j];
            }
          if (!px.requires_grad) continue;
          T mean_dxh = T(0), mean_dxh_xh = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            const T dxh = gy[j] * pg.value[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh /= static_cast<T>(n);
          mean_dxh_xh /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T dxh = gy[j] * pg.value[j];
            px.grad[r * n + j] += inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
          }
        }
      });
}

/// Rows of `table` [V,d] selected by `ids`.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  detail::require_rank("embedding", table.shape(), 2);
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab)
      throw ArgumentError("embedding: id " + std::to_string(ids[i]) + " out of range for vocab " +
                          std::to_string(vocab));
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return Tensor<T>::from_op("embedding", {ids.size(), d}, std::move(out), {table.node()},
                            [ids, d](Node<T>& nd) {
                              auto& gt = nd.parents[0]->grad;
                              for (std::size_t i = 0; i < ids.size(); ++i)
                                for (std::size_t j = 0; j < d; ++j)
                                  gt[ids[i] * d + j] += nd.grad[i * d + j];
                            });
}

/// Inverted dropout; identity when not training or p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) return scale(x, T(0));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = bernoulli(rng, p) ? T(0) : keep_scale;
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return Tensor<T>::from_op("dropout", x.shape(), std::move(out), {x.node()},
                            [mask = std::move(mask)](Node<T>& nd) {
                              auto& gx = nd.parents[0]->grad;
                              for (std::size_t i = 0; i < mask.size(); ++i)
                                gx[i] += nd.grad[i] * mask[i];
                            });
}

// ---------------------------------------------------------------------------
// Convolutions on [batch, channels, length]
// ---------------------------------------------------------------------------

struct Conv1dGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t output_pad = 0;  // transposed convolution only
};

/// Cross-correlation, weight [out_ch, in_ch, kernel], bias [out_ch] (optional).
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Conv1dGeometry geo) {
  detail::require_rank("conv1d", x.shape(), 3);
  detail::require_rank("conv1d", w.shape(), 3);
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = w.dim(0), kw = w.dim(2);
  if (w.dim(1) != cin) shape_fail("conv1d", x.shape(), w.shape());
  if (bias.defined() && bias.numel() != cout) shape_fail("conv1d", w.shape(), bias.shape());
  if (len + 2 * geo.pad < kw || geo.stride == 0)
    shape_fail("conv1d", x.shape(), "is shorter than the kernel");
  const std::size_t lout = (len + 2 * geo.pad - kw) / geo.stride + 1;
  const std::size_t rows = cin * kw, cols = batch * lout;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(geo.pad);
  const std::size_t stride = geo.stride;

  std::vector<T> col(rows * cols, T(0));
  const auto& xv = x.values();
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t k = 0; k < kw; ++k) {
      T* crow = col.data() + (ci * kw + k) * cols;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* xrow = xv.data() + (b * cin + ci) * len;
        for (std::size_t t = 0; t < lout; ++t) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t * stride + k) - pad;
          if (s >= 0 && s < static_cast<std::ptrdiff_t>(len)) crow[b * lout + t] = xrow[s];
        }
      }
    }
  std::vector<T> y2(cout * cols);
  detail::mat(y2, cout, cols).noalias() = detail::cmat(w.values(), cout, rows) * detail::cmat(col, rows, cols);
  std::vector<T> out(batch * cout * lout);
  for (std::size_t co = 0; co < cout; ++co) {
    const T bval = bias.defined() ? bias.values()[co] : T(0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < lout; ++t)
        out[(b * cout + co) * lout + t] = y2[co * cols + b * lout + t] + bval;
  }
  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
  const bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias.node());
  return Tensor<T>::from_op(
      "conv1d", {batch, cout, lout}, std::move(out), std::move(parents),
      [col = std::move(col), batch, cin, len, cout, kw, lout, rows, cols, pad, stride,
       has_bias](Node<T>& nd) {
        std::vector<T> gy2(cout * cols);
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < lout; ++t)
              gy2[co * cols + b * lout + t] = nd.grad[(b * cout + co) * lout + t];
        auto gy = detail::cmat(gy2, cout, cols);
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        if (pw.requires_grad)
          detail::mat(pw.grad, cout, rows).noalias() += gy * detail::cmat(col, rows, cols).transpose();
        if (has_bias && nd.parents[2]->requires_grad) {
          auto& gb = nd.parents[2]->grad;
          for (std::size_t co = 0; co < cout; ++co) {
            T s = T(0);
            for (std::size_t j = 0; j < cols; ++j) s += gy2[co * cols + j];
            gb[co] += s;
          }
        }
        if (!px.requires_grad) return;
        std::vector<T> gcol(rows * cols);
        detail::mat(gcol, rows, cols).noalias() = detail::cmat(pw.value, cout, rows).transpose() * gy;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t k = 0; k < kw; ++k) {
            const T* crow = gcol.data() + (ci * kw + k) * cols;
            for (std::size_t b = 0; b < batch; ++b) {
              T* gxrow = px.grad.data() + (b * cin + ci) * len;
              for (std::size_t t = 0; t < lout; ++t) {
                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t * stride + k) - pad;
                if (s >= 0 && s < static_cast<std::ptrdiff_t>(len)) gxrow[s] += crow[b * lout + t];
              }
            }
          }
      });
}

/// Transposed convolution, weight [in_ch, out_ch, kernel], bias [out_ch].
/// Output length (len - 1) * stride - 2 * pad + kernel + output_pad.
template <class T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           Conv1dGeometry geo) {
  detail::require_rank("conv_transpose1d", x.shape(), 3);
  detail::require_rank("conv_transpose1d", w.shape(), 3);
  const std::size_t batch = x.dim(0), cin = x.dim(1), lin = x.dim(2);
  const std::size_t cout = w.dim(1), kw = w.dim(2);
  if (w.dim(0) != cin) shape_fail("conv_transpose1d", x.shape(), w.shape());
  if (bias.defined() && bias.numel() != cout)
    shape_fail("conv_transpose1d", w.shape(), bias.shape());
  if (lin == 0 || geo.stride == 0) shape_fail("conv_transpose1d", x.shape(), "is empty");
  const std::ptrdiff_t full =
      static_cast<std::ptrdiff_t>((lin - 1) * geo.stride + kw + geo.output_pad) -
      2 * static_cast<std::ptrdiff_t>(geo.pad);
  if (full <= 0) shape_fail("conv_transpose1d", x.shape(), "yields an empty output");
  const std::size_t lout = static_cast<std::size_t>(full);
  const std::size_t rows = cout * kw, cols = batch * lin;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(geo.pad);
  const std::size_t stride = geo.stride;

  std::vector<T> x2(cin * cols);
  const auto& xv = x.values();
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((b * cin + ci) * lin), lin,
                  x2.begin() + static_cast<std::ptrdiff_t>(ci * cols + b * lin));
  std::vector<T> cols_v(rows * cols);
  detail::mat(cols_v, rows, cols).noalias() =
      detail::cmat(w.values(), cin, rows).transpose() * detail::cmat(x2, cin, cols);
  std::vector<T> out(batch * cout * lout, T(0));
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t k = 0; k < kw; ++k) {
      const T* crow = cols_v.data() + (co * kw + k) * cols;
      for (std::size_t b = 0; b < batch; ++b) {
        T* yrow = out.data() + (b * cout + co) * lout;
        for (std::size_t j = 0; j < lin; ++j) {
          const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(j * stride + k) - pad;
          if (t >= 0 && t < static_cast<std::ptrdiff_t>(lout)) yrow[t] += crow[b * lin + j];
        }
      }
    }
  if (bias.defined())
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t t = 0; t < lout; ++t) out[(b * cout + co) * lout + t] += bias.values()[co];

  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
  const bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias.node());
  return Tensor<T>::from_op(
      "conv_transpose1d", {batch, cout, lout}, std::move(out), std::move(parents),
      [x2 = std::move(x2), batch, cin, lin, cout, kw, lout, rows, cols, pad, stride,
       has_bias](Node<T>& nd) {
        std::vector<T> gcols(rows * cols, T(0));
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t k = 0; k < kw; ++k) {
            T* crow = gcols.data() + (co * kw + k) * cols;
            for (std::size_t b = 0; b < batch; ++b) {
              const T* gyrow = nd.grad.data() + (b * cout + co) * lout;
              for (std::size_t j = 0; j < lin; ++j) {
                const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(j * stride + k) - pad;
                if (t >= 0 && t < static_cast<std::ptrdiff_t>(lout)) crow[b * lin + j] = gyrow[t];
              }
            }
          }
        auto gc = detail::cmat(gcols, rows, cols);
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        if (pw.requires_grad)
          detail::mat(pw.grad, cin, rows).noalias() += detail::cmat(x2, cin, cols) * gc.transpose();
        if (has_bias && nd.parents[2]->requires_grad) {
          auto& gb = nd.parents[2]->grad;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t co = 0; co < cout; ++co) {
              T s = T(0);
              for (std::size_t t = 0; t < lout; ++t) s += nd.grad[(b * cout + co) * lout + t];
              gb[co] += s;
            }
        }
        if (!px.requires_grad) return;
        std::vector<T> gx2(cin * cols);
        detail::mat(gx2, cin, cols).noalias() = detail::cmat(pw.value, cin, rows) * gc;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < lin; ++j)
              px.grad[(b * cin + ci) * lin + j] += gx2[ci * cols + b * lin + j];
      });
}

// ---------------------------------------------------------------------------
// Spectral loss
// ---------------------------------------------------------------------------

/// Number of full frames of length n_fft at the given hop (no centering).
inline std::size_t stft_frame_count(std::size_t len, std::size_t n_fft, std::size_t hop) {
  return len < n_fft ? 0 : (len - n_fft) / hop + 1;
}

/// Mean L1 distance between the Hann-windowed STFT magnitudes of x and a
/// constant target. Frames start at 0, hop, 2*hop, ... and must fit entirely.
template <class T>
Tensor<T> stft_magnitude_l1(const Tensor<T>& x, std::span<const T> target, std::size_t n_fft,
                            std::size_t hop) {
  const std::size_t len = x.numel();
  if (target.size() != len)
    throw ShapeError("stft_magnitude_l1: signal length " + std::to_string(len) +
                     " vs target length " + std::to_string(target.size()));
  const std::size_t frames = stft_frame_count(len, n_fft, hop);
  if (frames == 0 || hop == 0)
    throw ShapeError("stft_magnitude_l1: signal of " + std::to_string(len) +
                     " samples holds no frame of " + std::to_string(n_fft));
  const std::size_t bins = n_fft / 2 + 1;
  const auto window = fft::hann_periodic<T>(n_fft);
  std::vector<std::complex<T>> spec_x(frames * bins);
  std::vector<T> mag_x(frames * bins), mag_t(frames * bins);
  std::vector<T> buf(n_fft);
  const auto& xv = x.values();
  double total = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t i = 0; i < n_fft; ++i) buf[i] = window[i] * xv[f * hop + i];
    auto sx = fft::rfft<T>(buf);
    for (std::size_t i = 0; i < n_fft; ++i) buf[i] = window[i] * target[f * hop + i];
    auto st = fft::rfft<T>(buf);
    for (std::size_t k = 0; k < bins; ++k) {
      spec_x[f * bins + k] = sx[k];
      mag_x[f * bins + k] = std::abs(sx[k]);
      mag_t[f * bins + k] = std::abs(st[k]);
      total += std::abs(static_cast<double>(mag_x[f * bins + k]) - mag_t[f * bins + k]);
    }
  }
  const double count = static_cast<double>(frames * bins);
  return Tensor<T>::from_op(
      "stft_magnitude_l1", {}, {static_cast<T>(total / count)}, {x.node()},
      [spec_x = std::move(spec_x), mag_x = std::move(mag_x), mag_t = std::move(mag_t), window,
       frames, bins, n_fft, hop, count](Node<T>& nd) {
        auto& gx = nd.parents[0]->grad;
        const T g = static_cast<T>(nd.grad[0] / count);
        std::vector<std::complex<T>> h(n_fft);
        for (std::size_t f = 0; f < frames; ++f) {
          std::fill(h.begin(), h.end(), std::complex<T>(0));
          for (std::size_t k = 0; k < bins; ++k) {
            const std::size_t i = f * bins + k;
            const T diff = mag_x[i] - mag_t[i];
            if (diff == T(0) || mag_x[i] == T(0)) continue;
            const T sgn = diff > T(0) ? g : -g;
            h[k] = sgn * std::conj(spec_x[i]) / mag_x[i];
          }
          // d|X_k|/du_n = Re(conj(X_k) e^{-2*pi*i*k*n/N}) / |X_k|
          const auto dh = fft::fft<T>(h);
          for (std::size_t n = 0; n < n_fft; ++n) gx[f * hop + n] += window[n] * dh[n].real();
        }
      });
}

}  // namespace bandvq::engine
