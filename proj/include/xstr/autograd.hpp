// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over Tensor values.
//
// Every op pushes one node holding its forward value and a closure that, given
// the node's output gradient, accumulates into its inputs' gradients. Nodes are
// replayed in reverse push order, so accumulation order is fixed for a given
// forward program. Dense products go through Eigen's single-threaded GEMM.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "xstr/errors.hpp"
#include "xstr/params.hpp"
#include "xstr/tensor.hpp"

namespace xstr {

template <class T>
class BasicTape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class T>
struct BasicVar {
  BasicTape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class BasicTape {
 public:
  using Tensor = BasicTensor<T>;
  using Var = BasicVar<T>;
  using ParamSet = BasicParamSet<T>;
  using Backward = std::function<void(BasicTape&, const Tensor& out_grad)>;

  /// With `record == false` no backward closures are kept (inference).
  explicit BasicTape(bool record = true) : record_(record) { nodes_.reserve(256); }
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push(std::move(value), nullptr); }

  /// Leaf bound to a ParamSet entry. Repeated requests for one entry share a node;
  /// backward() adds the node gradient into the entry's gradient.
  Var param(const ParamSet& params, const std::string& name) {
    auto& entry = params.entry(name);
    auto it = param_nodes_.find(&entry);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Node node;
    node.external = &entry.value;
    node.param = &entry;
    nodes_.push_back(std::move(node));
    const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
    param_nodes_.emplace(&entry, id);
    return Var{this, id};
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.value;
  }

  /// Gradient buffer for `v`, zero-allocated on first access.
  Tensor& grad(Var v) { return grad(v.id); }
  Tensor& grad(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(Var{this, id}).shape(), T(0));
    return n.grad;
  }

  Var push(Tensor value, Backward backward) {
    require(value.all_finite(), ErrorCode::NumericalError, "non-finite value produced on tape");
    Node node;
    node.value = std::move(value);
    if (record_) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  /// Reverse sweep from scalar `root` seeded with `seed`; parameter gradients
  /// are accumulated (not overwritten) into their ParamSet entries.
  void backward(Var root, T seed = T(1)) {
    require(record_, ErrorCode::ShapeMismatch, "backward on a non-recording tape");
    require(value(root).numel() == 1, ErrorCode::ShapeMismatch, "backward root must be scalar");
    grad(root)[0] += seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      // Closures only write to lower-numbered nodes, so n.grad stays put.
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        T* dst = n.param->grad.data();
        const T* src = n.grad.data();
        for (std::size_t k = 0; k < n.grad.numel(); ++k) dst[k] += src[k];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    const typename ParamSet::Entry* param = nullptr;
    Tensor grad;
    Backward backward;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::map<const typename ParamSet::Entry*, std::uint32_t> param_nodes_;
};

template <class T>
const BasicTensor<T>& BasicVar<T>::value() const {
  return tape->value(*this);
}

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const RowMat<T>> cmap(const T* p, std::size_t r, std::size_t c) {
  return Eigen::Map<const RowMat<T>>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
Eigen::Map<RowMat<T>> mmap(T* p, std::size_t r, std::size_t c) {
  return Eigen::Map<RowMat<T>>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <class T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

/// C = A(m,k) * B(k,n) with every output accumulated over k in ascending
/// order, so row i of C depends only on row i of A and column j only on
/// column j of B (bit-for-bit, whatever m and n are).
template <class T>
void gemm_rowstable(const T* __restrict A, const T* __restrict B, T* __restrict C, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict c = C + i * n;
    const T* a = A + i * k;
    std::fill(c, c + n, T(0));
    std::size_t p = 0;
    // Four k-steps per pass over the row; each element still adds them in order.
    for (; p + 4 <= k; p += 4) {
      const T a0 = a[p], a1 = a[p + 1], a2 = a[p + 2], a3 = a[p + 3];
      const T* __restrict b0 = B + p * n;
      const T* __restrict b1 = b0 + n;
      const T* __restrict b2 = b1 + n;
      const T* __restrict b3 = b2 + n;
      for (std::size_t j = 0; j < n; ++j) {
        T x = c[j];
        x += a0 * b0[j];
        x += a1 * b1[j];
        x += a2 * b2[j];
        x += a3 * b3[j];
        c[j] = x;
      }
    }
    for (; p < k; ++p) {
      const T ap = a[p];
      const T* __restrict b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += ap * b[j];
    }
  }
}

template <class T>
std::size_t rows_of(const BasicTensor<T>& t) {
  return t.numel() / t.shape().back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense algebra

/// (m,k) x (k,n) -> (m,n)
template <class T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  const BasicTensor<T>& A = a.value();
  const BasicTensor<T>& B = b.value();
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0), ErrorCode::ShapeMismatch,
          "matmul " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  BasicTensor<T> C({m, n});
  detail::gemm_rowstable(A.data(), B.data(), C.data(), m, k, n);
  return a.tape->push(std::move(C), [a, b, m, k, n](BasicTape<T>& t, const BasicTensor<T>& g) {
    auto G = detail::cmap(g.data(), m, n);
    detail::mmap(t.grad(a).data(), m, k).noalias() += G * detail::cmap(t.value(b).data(), k, n).transpose();
    detail::mmap(t.grad(b).data(), k, n).noalias() += detail::cmap(t.value(a).data(), m, k).transpose() * G;
  });
}

/// (m,k) x (n,k)^T -> (m,n)
template <class T>
BasicVar<T> matmul_nt(BasicVar<T> a, BasicVar<T> b) {
  const BasicTensor<T>& A = a.value();
  const BasicTensor<T>& B = b.value();
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(1), ErrorCode::ShapeMismatch,
          "matmul_nt " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
  BasicTensor<T> C({m, n});
  detail::RowMat<T> Bt = detail::cmap(B.data(), n, k).transpose();
  detail::gemm_rowstable(A.data(), Bt.data(), C.data(), m, k, n);
  return a.tape->push(std::move(C), [a, b, m, k, n](BasicTape<T>& t, const BasicTensor<T>& g) {
    auto G = detail::cmap(g.data(), m, n);
    detail::mmap(t.grad(a).data(), m, k).noalias() += G * detail::cmap(t.value(b).data(), n, k);
    detail::mmap(t.grad(b).data(), n, k).noalias() += G.transpose() * detail::cmap(t.value(a).data(), m, k);
  });
}

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  const BasicTensor<T>& A = a.value();
  const BasicTensor<T>& B = b.value();
  require(A.shape() == B.shape(), ErrorCode::ShapeMismatch,
          "add " + shape_str(A.shape()) + " + " + shape_str(B.shape()));
  BasicTensor<T> C = A;
  detail::add_into(C, B);
  return a.tape->push(std::move(C), [a, b](BasicTape<T>& t, const BasicTensor<T>& g) {
    detail::add_into(t.grad(a), g);
    detail::add_into(t.grad(b), g);
  });
}

/// Element-wise product.
template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  const BasicTensor<T>& A = a.value();
  const BasicTensor<T>& B = b.value();
  require(A.shape() == B.shape(), ErrorCode::ShapeMismatch,
          "mul " + shape_str(A.shape()) + " * " + shape_str(B.shape()));
  BasicTensor<T> C = A;
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] *= B[i];
  return a.tape->push(std::move(C), [a, b](BasicTape<T>& t, const BasicTensor<T>& g) {
    const BasicTensor<T>& A = t.value(a);
    const BasicTensor<T>& B = t.value(b);
    BasicTensor<T>& ga = t.grad(a);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * B[i];
    BasicTensor<T>& gb = t.grad(b);
    for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * A[i];
  });
}

/// Same elements under a new shape.
template <class T>
BasicVar<T> reshape(BasicVar<T> x, Shape shape) {
  return x.tape->push(x.value().reshaped(std::move(shape)), [x](BasicTape<T>& t, const BasicTensor<T>& g) {
    BasicTensor<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

/// x + c for a constant tensor c of the same shape.
template <class T>
BasicVar<T> add_constant(BasicVar<T> x, const BasicTensor<T>& c) {
  require(x.shape() == c.shape(), ErrorCode::ShapeMismatch, "add_constant shape");
  BasicTensor<T> y = x.value();
  detail::add_into(y, c);
  return x.tape->push(std::move(y), [x](BasicTape<T>& t, const BasicTensor<T>& g) { detail::add_into(t.grad(x), g); });
}

/// Row-broadcast bias: (m,n) + (n).
template <class T>
BasicVar<T> add_bias(BasicVar<T> x, BasicVar<T> bias) {
  const BasicTensor<T>& X = x.value();
  const BasicTensor<T>& B = bias.value();
  require(B.rank() == 1 && X.shape().back() == B.dim(0), ErrorCode::ShapeMismatch,
          "add_bias " + shape_str(X.shape()) + " + " + shape_str(B.shape()));
  const std::size_t n = B.dim(0), m = detail::rows_of(X);
  BasicTensor<T> Y = X;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) Y[r * n + c] += B[c];
  return x.tape->push(std::move(Y), [x, bias, m, n](BasicTape<T>& t, const BasicTensor<T>& g) {
    detail::add_into(t.grad(x), g);
    BasicTensor<T>& gb = t.grad(bias);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
  });
}

template <class T>
BasicVar<T> relu(BasicVar<T> x) {
  BasicTensor<T> y = x.value();
  for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  return x.tape->push(std::move(y), [x](BasicTape<T>& t, const BasicTensor<T>& g) {
    const BasicTensor<T>& X = t.value(x);
    BasicTensor<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (X[i] > T(0)) gx[i] += g[i];
  });
}

template <class T>
BasicVar<T> scale(BasicVar<T> x, std::type_identity_t<T> s) {
  BasicTensor<T> y = x.value();
  for (auto& v : y.values()) v *= s;
  return x.tape->push(std::move(y), [x, s](BasicTape<T>& t, const BasicTensor<T>& g) {
    BasicTensor<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += s * g[i];
  });
}

/// Sum of all elements, as a (1) tensor.
template <class T>
BasicVar<T> sum(BasicVar<T> x) {
  T s = T(0);
  for (T v : x.value().values()) s += v;
  return x.tape->push(BasicTensor<T>({1}, s), [x](BasicTape<T>& t, const BasicTensor<T>& g) {
    BasicTensor<T>& gx = t.grad(x);
    for (auto& v : gx.values()) v += g[0];
  });
}

/// Rows `ids` of a (n,d) matrix, stacked into (|ids|,d).
template <class T>
BasicVar<T> gather_rows(BasicVar<T> table, std::vector<std::size_t> ids) {
  const BasicTensor<T>& E = table.value();
  require(E.rank() == 2 && !ids.empty(), ErrorCode::ShapeMismatch, "gather_rows shape");
  const std::size_t d = E.dim(1);
  BasicTensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] < E.dim(0), ErrorCode::UnknownSymbol, "row id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(E.data() + ids[r] * d, d, out.data() + r * d);
  }
  return table.tape->push(std::move(out), [table, ids = std::move(ids), d](BasicTape<T>& t, const BasicTensor<T>& g) {
    BasicTensor<T>& ge = t.grad(table);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) ge[ids[r] * d + c] += g[r * d + c];
  });
}

/// Columns [begin, begin+count) of a (m,n) matrix.
template <class T>
BasicVar<T> slice_cols(BasicVar<T> x, std::size_t begin, std::size_t count) {
  const BasicTensor<T>& X = x.value();
  require(X.rank() == 2 && begin + count <= X.dim(1) && count > 0, ErrorCode::ShapeMismatch, "slice_cols range");
  const std::size_t m = X.dim(0), n = X.dim(1);
  BasicTensor<T> y({m, count});
  for (std::size_t r = 0; r < m; ++r) std::copy_n(X.data() + r * n + begin, count, y.data() + r * count);
  return x.tape->push(std::move(y), [x, begin, count, m, n](BasicTape<T>& t, const BasicTensor<T>& g) {
    BasicTensor<T>& gx = t.grad(x);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * n + begin + c] += g[r * count + c];
  });
}

/// Horizontal concatenation of equal-height matrices.
template <class T>
BasicVar<T> concat_cols(const std::vector<BasicVar<T>>& parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat_cols of nothing");
  const std::size_t m = parts.front().value().dim(0);
  std::size_t n = 0;
  for (const BasicVar<T>& p : parts) {
    require(p.value().rank() == 2 && p.value().dim(0) == m, ErrorCode::ShapeMismatch, "concat_cols heights");
    n += p.value().dim(1);
  }
  BasicTensor<T> y({m, n});
  std::size_t off = 0;
  for (const BasicVar<T>& p : parts) {
    const BasicTensor<T>& P = p.value();
    const std::size_t w = P.dim(1);
    for (std::size_t r = 0; r < m; ++r) std::copy_n(P.data() + r * w, w, y.data() + r * n + off);
    off += w;
  }
  return parts.front().tape->push(std::move(y), [parts, m, n](BasicTape<T>& t, const BasicTensor<T>& g) {
    std::size_t off = 0;
    for (const BasicVar<T>& p : parts) {
      BasicTensor<T>& gp = t.grad(p);
      const std::size_t w = gp.dim(1);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * n + off + c];
      off += w;
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Softmax over the last axis. With `causal`, a 2-D input keeps only entries
/// j <= i of row i; masked entries are exactly zero.
template <class T>
BasicVar<T> softmax(BasicVar<T> x, bool causal = false) {
  const BasicTensor<T>& X = x.value();
  require(X.rank() >= 1, ErrorCode::ShapeMismatch, "softmax of a scalar");
  require(!causal || X.rank() == 2, ErrorCode::ShapeMismatch, "causal softmax needs a matrix");
  require(X.all_finite(), ErrorCode::NumericalError, "softmax input not finite");
  const std::size_t n = X.shape().back(), m = detail::rows_of(X);
  BasicTensor<T> Y(X.shape(), T(0));
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t len = causal ? std::min(n, r + 1) : n;
    const T* xr = X.data() + r * n;
    T* yr = Y.data() + r * n;
    T mx = xr[0];
    for (std::size_t c = 1; c < len; ++c) mx = std::max(mx, xr[c]);
    T z = T(0);
    for (std::size_t c = 0; c < len; ++c) z += (yr[c] = std::exp(xr[c] - mx));
    const T inv = T(1) / z;
    for (std::size_t c = 0; c < len; ++c) yr[c] *= inv;
  }
  return x.tape->push(std::move(Y), [x, m, n, self = x.tape->size()](BasicTape<T>& t, const BasicTensor<T>& g) {
    const BasicTensor<T>& Yv = t.value(BasicVar<T>{&t, static_cast<std::uint32_t>(self)});
    BasicTensor<T>& gx = t.grad(x);
    for (std::size_t r = 0; r < m; ++r) {
      const T* yr = Yv.data() + r * n;
      const T* gr = g.data() + r * n;
      T dot = T(0);
      for (std::size_t c = 0; c < n; ++c) dot += gr[c] * yr[c];
      T* out = gx.data() + r * n;
      for (std::size_t c = 0; c < n; ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

/// Per-row (x - mean) / sqrt(var + eps) * gain + bias over the last axis.
template <class T>
BasicVar<T> layer_norm(BasicVar<T> x, BasicVar<T> gain, BasicVar<T> bias, std::type_identity_t<T> eps = T(1e-5)) {
  const BasicTensor<T>& X = x.value();
  const std::size_t d = X.shape().back(), m = detail::rows_of(X);
  require(d >= 2, ErrorCode::ShapeMismatch, "layer_norm needs d >= 2");
  require(gain.value().numel() == d && bias.value().numel() == d, ErrorCode::ShapeMismatch, "layer_norm params");
  BasicTensor<T> Y(X.shape());
  std::vector<T> xhat(X.numel()), rstd(m);
  const T* G = gain.value().data();
  const T* B = bias.value().data();
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = X.data() + r * d;
    T mean = T(0);
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (xr[c] - mean) * rstd[r];
      xhat[r * d + c] = h;
      Y[r * d + c] = h * G[c] + B[c];
    }
  }
  return x.tape->push(std::move(Y), [x, gain, bias, m, d, xhat = std::move(xhat),
                                     rstd = std::move(rstd)](BasicTape<T>& t, const BasicTensor<T>& g) {
    const T* G = t.value(gain).data();
    BasicTensor<T>& gx = t.grad(x);
    BasicTensor<T>& gg = t.grad(gain);
    BasicTensor<T>& gb = t.grad(bias);
    std::vector<T> dh(d);
    for (std::size_t r = 0; r < m; ++r) {
      const T* gr = g.data() + r * d;
      const T* hr = xhat.data() + r * d;
      T mean_dh = T(0), mean_dh_h = T(0);
      for (std::size_t c = 0; c < d; ++c) {
        dh[c] = gr[c] * G[c];
        mean_dh += dh[c];
        mean_dh_h += dh[c] * hr[c];
        gg[c] += gr[c] * hr[c];
        gb[c] += gr[c];
      }
      mean_dh /= static_cast<T>(d);
      mean_dh_h /= static_cast<T>(d);
      T* out = gx.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) out[c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling on (C,H,W) tensors

struct Conv2dOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  bool relu = false;
};

namespace detail {

struct ConvGeom {
  std::size_t cin, h, w, cout, kh, kw, sh, sw, ph, pw, oh, ow;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t n() const { return oh * ow; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t n = g.n();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * n;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
          T* dst = row + oy * g.ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.ow, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t xx =
                static_cast<std::ptrdiff_t>(ox * g.sw + j) - static_cast<std::ptrdiff_t>(g.pw);
            dst[ox] = (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[xx];
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t n = g.n();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * n;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t xx =
                static_cast<std::ptrdiff_t>(ox * g.sw + j) - static_cast<std::ptrdiff_t>(g.pw);
            if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(g.w)) dst[xx] += src[ox];
          }
        }
      }
}

inline std::size_t conv_out(std::size_t in, std::size_t pad, std::size_t k, std::size_t stride, const char* axis) {
  require(stride > 0, ErrorCode::BadStride, "stride must be positive");
  require(k <= in + 2 * pad, ErrorCode::ShapeMismatch,
          std::string("kernel exceeds padded input along ") + axis);
  const std::size_t span = in + 2 * pad - k;
  require(span % stride == 0, ErrorCode::BadStride,
          std::string("stride ") + std::to_string(stride) + " does not tile " + axis + " extent");
  return span / stride + 1;
}

}  // namespace detail

/// Cross-correlation of x (C_in,H,W) with kernels (C_out,C_in,kh,kw), zero
/// padding, optional per-channel bias and relu.
template <class T>
BasicVar<T> conv2d(BasicVar<T> x, BasicVar<T> kernels, const BasicVar<T>* bias, const Conv2dOptions& opt) {
  const BasicTensor<T>& X = x.value();
  const BasicTensor<T>& K = kernels.value();
  require(X.rank() == 3 && K.rank() == 4 && K.dim(1) == X.dim(0), ErrorCode::ShapeMismatch,
          "conv2d " + shape_str(X.shape()) + " * " + shape_str(K.shape()));
  detail::ConvGeom g{X.dim(0), X.dim(1), X.dim(2), K.dim(0), K.dim(2), K.dim(3),
                     opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w, 0, 0};
  g.oh = detail::conv_out(g.h, g.ph, g.kh, g.sh, "height");
  g.ow = detail::conv_out(g.w, g.pw, g.kw, g.sw, "width");
  if (bias)
    require(bias->value().rank() == 1 && bias->value().dim(0) == g.cout, ErrorCode::ShapeMismatch, "conv2d bias");

  auto cols = std::make_shared<AlignedVector<T>>(g.k() * g.n());
  detail::im2col(X.data(), g, cols->data());
  BasicTensor<T> Y({g.cout, g.oh, g.ow});
  auto out = detail::mmap(Y.data(), g.cout, g.n());
  out.noalias() = detail::cmap(K.data(), g.cout, g.k()) * detail::cmap(cols->data(), g.k(), g.n());
  if (bias) {
    const BasicTensor<T>& B = bias->value();
    for (std::size_t c = 0; c < g.cout; ++c) out.row(static_cast<Eigen::Index>(c)).array() += B[c];
  }
  if (opt.relu)
    for (auto& v : Y.values()) v = v > T(0) ? v : T(0);

  const bool has_bias = bias != nullptr;
  const BasicVar<T> b = has_bias ? *bias : BasicVar<T>{};
  const bool use_relu = opt.relu;
  BasicTape<T>& tape = *x.tape;
  const std::size_t self = tape.size();
  return tape.push(std::move(Y), [x, kernels, b, has_bias, use_relu, g, self,
                                  cols = tape.recording() ? cols : nullptr](BasicTape<T>& t, const BasicTensor<T>& grad_out) {
    BasicTensor<T> gy = grad_out;
    if (use_relu) {
      const BasicTensor<T>& Yv = t.value(BasicVar<T>{&t, static_cast<std::uint32_t>(self)});
      for (std::size_t i = 0; i < gy.numel(); ++i)
        if (Yv[i] <= T(0)) gy[i] = T(0);
    }
    auto G = detail::cmap(gy.data(), g.cout, g.n());
    detail::mmap(t.grad(kernels).data(), g.cout, g.k()).noalias() +=
        G * detail::cmap(cols->data(), g.k(), g.n()).transpose();
    if (has_bias) {
      BasicTensor<T>& gb = t.grad(b);
      for (std::size_t c = 0; c < g.cout; ++c) gb[c] += G.row(static_cast<Eigen::Index>(c)).sum();
    }
    AlignedVector<T> dcols(g.k() * g.n());
    detail::mmap(dcols.data(), g.k(), g.n()).noalias() =
        detail::cmap(t.value(kernels).data(), g.cout, g.k()).transpose() * G;
    detail::col2im_add(dcols.data(), g, t.grad(x).data());
  });
}

template <class T>
BasicVar<T> conv2d(BasicVar<T> x, BasicVar<T> kernels, const Conv2dOptions& opt) { return conv2d(x, kernels, static_cast<const BasicVar<T>*>(nullptr), opt); }
template <class T>
BasicVar<T> conv2d(BasicVar<T> x, BasicVar<T> kernels, BasicVar<T> bias, const Conv2dOptions& opt) { return conv2d(x, kernels, &bias, opt); }

/// k x k max pooling; ties route the gradient to the first maximum in
/// row-major window order.
template <class T>
BasicVar<T> max_pool2d(BasicVar<T> x, std::size_t k, std::size_t stride) {
  const BasicTensor<T>& X = x.value();
  require(X.rank() == 3 && k >= 1 && stride >= 1, ErrorCode::ShapeMismatch, "max_pool2d shape");
  require(k <= X.dim(1) && k <= X.dim(2), ErrorCode::ShapeMismatch, "pool window larger than input");
  const std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  const std::size_t oh = (H - k) / stride + 1, ow = (W - k) / stride + 1;
  BasicTensor<T> Y({C, oh, ow});
  std::vector<std::uint32_t> arg(Y.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (c * H + oy * stride) * W + ox * stride;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = (c * H + oy * stride + i) * W + ox * stride + j;
            if (X[idx] > X[best]) best = idx;
          }
        const std::size_t o = (c * oh + oy) * ow + ox;
        Y[o] = X[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  return x.tape->push(std::move(Y), [x, arg = std::move(arg)](BasicTape<T>& t, const BasicTensor<T>& g) {
    BasicTensor<T>& gx = t.grad(x);
    for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[o];
  });
}

}  // namespace xstr
