// SPDX-License-Identifier: Apache-2.0
#include "mole/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include <fmt/format.h>

namespace mole {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

double Rng::gaussian() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 1e-300);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

namespace {

template <class T>
void check_2d(const Tensor<T>& t, const char* op) {
  if (t.shape().size() != 2)
    throw ValidationError(fmt::format("{}: expected 2-d tensor, got shape {}", op,
                                      shape_str(t.shape())));
}

// C (+)= A(M x K) . B(K x N), row-major. Each output element is accumulated
// by a single fixed-order loop, so results are bit-identical run to run.
template <class T>
void k_gemm(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    int64_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const T a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
      const T* b0 = b + p * n;
      const T* b1 = b0 + n;
      const T* b2 = b1 + n;
      const T* b3 = b2 + n;
      for (int64_t j = 0; j < n; ++j) {
        ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
    }
    for (; p < k; ++p) {
      const T ap = ai[p];
      const T* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += ap * bp[j];
    }
  }
}

template <class T>
std::vector<T> k_transpose(const T* a, int64_t r, int64_t c) {
  std::vector<T> out(static_cast<size_t>(r) * c);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

// out (+)= op_a(A) . op_b(B) where op transposes when the flag is set.
// ra x ca are A's stored dims, likewise rb x cb.
template <class T>
void k_gemm_ex(const T* a, int64_t ra, int64_t ca, bool ta, const T* b, int64_t rb,
               int64_t cb, bool tb, T* c) {
  std::vector<T> at, bt;
  const T* ae = a;
  int64_t m = ra, k = ca;
  if (ta) {
    at = k_transpose(a, ra, ca);
    ae = at.data();
    m = ca;
    k = ra;
  }
  const T* be = b;
  int64_t kb = rb, n = cb;
  if (tb) {
    bt = k_transpose(b, rb, cb);
    be = bt.data();
    kb = cb;
    n = rb;
  }
  if (k != kb) throw ValidationError("gemm: inner dimensions differ");
  k_gemm(ae, be, c, m, n, k);
}

template <class T>
std::shared_ptr<TensorNode<T>> make_leaf(Shape shape, std::vector<T> data) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  return n;
}

thread_local int g_no_grad_depth = 0;

template <class T>
Tensor<T> make_op(const char* op, Shape shape,
                  std::vector<std::shared_ptr<TensorNode<T>>> parents,
                  std::function<std::vector<T>()> fwd,
                  std::function<void(TensorNode<T>&)> bwd) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->op = op;
  n->is_leaf = false;
  n->value = fwd();
  if (shape_numel(n->shape) != static_cast<int64_t>(n->value.size()))
    throw RuntimeError(fmt::format("{}: produced {} values for shape {}", op,
                                   n->value.size(), shape_str(n->shape)));
  if (g_no_grad_depth > 0) {
    // Plain value; keeps no graph history alive.
    n->is_leaf = true;
    return Tensor<T>(n);
  }
  n->parents = std::move(parents);
  for (auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  n->recompute = std::move(fwd);
  if (n->requires_grad) n->backward = std::move(bwd);
  return Tensor<T>(n);
}

template <class T>
void accumulate(TensorNode<T>& dst, const std::vector<T>& delta) {
  if (!dst.requires_grad) return;
  auto& g = dst.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

// ---- Tensor basics ----

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(static_cast<size_t>(n), T(0))));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T v) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(static_cast<size_t>(n), v)));
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw ValidationError(fmt::format("tensor: shape {} wants {} values, got {}",
                                      shape_str(shape), shape_numel(shape), data.size()));
  return Tensor(make_leaf<T>(std::move(shape), std::move(data)));
}

template <class T>
Tensor<T> Tensor<T>::gaussian(Shape shape, Rng& rng, T stddev) {
  auto n = shape_numel(shape);
  std::vector<T> data(static_cast<size_t>(n));
  for (auto& x : data) x = static_cast<T>(rng.gaussian()) * stddev;
  return Tensor(make_leaf<T>(std::move(shape), std::move(data)));
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf)
    throw ValidationError("tensor: only leaf tensors may be mutated");
  return node_->value;
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool rg) {
  if (rg && !node_->is_leaf)
    throw ValidationError("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = rg;
  if (!rg) node_->grad.clear();
  return *this;
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  if (!node_->requires_grad)
    throw ValidationError("tensor: grad requested on a requires_grad=false tensor");
  return node_->ensure_grad();
}

template <class T>
T Tensor<T>::at(std::initializer_list<int64_t> idx) const {
  const Shape& s = node_->shape;
  if (idx.size() != s.size()) throw ValidationError("tensor: index rank mismatch");
  int64_t flat = 0;
  size_t d = 0;
  for (int64_t i : idx) {
    flat = flat * s[d] + i;
    ++d;
  }
  return node_->value[static_cast<size_t>(flat)];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ValidationError("tensor: item() on non-scalar");
  return node_->value[0];
}

template <class T>
template <class U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> data(node_->value.size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<U>(node_->value[i]);
  return Tensor<U>::from(node_->shape, std::move(data));
}

// ---- Ops ----

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int64_t m = trans_a ? a.cols() : a.rows();
  const int64_t ka = trans_a ? a.rows() : a.cols();
  const int64_t kb = trans_b ? b.cols() : b.rows();
  const int64_t n = trans_b ? b.rows() : b.cols();
  if (ka != kb)
    throw ValidationError(fmt::format("matmul: incompatible shapes {} x {}{}{}",
                                      shape_str(a.shape()), shape_str(b.shape()),
                                      trans_a ? " (lhs transposed)" : "",
                                      trans_b ? " (rhs transposed)" : ""));
  auto an = a.node(), bn = b.node();
  auto fwd = [an, bn, m, n, ka, trans_a, trans_b]() {
    std::vector<T> out(static_cast<size_t>(m) * n, T(0));
    k_gemm_ex(an->value.data(), an->shape[0], an->shape[1], trans_a, bn->value.data(),
              bn->shape[0], bn->shape[1], trans_b, out.data());
    (void)ka;
    return out;
  };
  auto bwd = [m, n, trans_a, trans_b](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    auto& B = *node.parents[1];
    const T* dc = node.grad.data();
    // C = opA(A) . opB(B); dA_eff = dC . B_eff^T, dB_eff = A_eff^T . dC.
    if (A.requires_grad) {
      std::vector<T> da(A.value.size(), T(0));
      if (!trans_a) {
        // dA = dC . opB(B)^T
        k_gemm_ex(dc, m, n, false, B.value.data(), B.shape[0], B.shape[1], !trans_b,
                  da.data());
      } else {
        // dA = (dC . B_eff^T)^T = B_eff . dC^T
        k_gemm_ex(B.value.data(), B.shape[0], B.shape[1], trans_b, dc, m, n, true,
                  da.data());
      }
      accumulate(A, da);
    }
    if (B.requires_grad) {
      std::vector<T> db(B.value.size(), T(0));
      if (!trans_b) {
        // dB = opA(A)^T . dC
        k_gemm_ex(A.value.data(), A.shape[0], A.shape[1], !trans_a, dc, m, n, false,
                  db.data());
      } else {
        // dB = (A_eff^T . dC)^T = dC^T . A_eff
        k_gemm_ex(dc, m, n, true, A.value.data(), A.shape[0], A.shape[1], trans_a,
                  db.data());
      }
      accumulate(B, db);
    }
  };
  return make_op<T>("matmul", {m, n}, {an, bn}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ValidationError(fmt::format("add: shape mismatch {} vs {}", shape_str(a.shape()),
                                      shape_str(b.shape())));
  auto an = a.node(), bn = b.node();
  auto fwd = [an, bn]() {
    std::vector<T> out(an->value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] + bn->value[i];
    return out;
  };
  auto bwd = [](TensorNode<T>& node) {
    accumulate(*node.parents[0], node.grad);
    accumulate(*node.parents[1], node.grad);
  };
  return make_op<T>("add", a.shape(), {an, bn}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> broadcast_add(const Tensor<T>& a, const Tensor<T>& v) {
  check_2d(a, "broadcast_add");
  if (v.shape().size() != 1 || v.shape()[0] != a.cols())
    throw ValidationError(fmt::format("broadcast_add: vector {} does not match columns of {}",
                                      shape_str(v.shape()), shape_str(a.shape())));
  auto an = a.node(), vn = v.node();
  const int64_t r = a.rows(), c = a.cols();
  auto fwd = [an, vn, r, c]() {
    std::vector<T> out(an->value.size());
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        out[i * c + j] = an->value[i * c + j] + vn->value[j];
    return out;
  };
  auto bwd = [r, c](TensorNode<T>& node) {
    accumulate(*node.parents[0], node.grad);
    auto& V = *node.parents[1];
    if (V.requires_grad) {
      std::vector<T> dv(static_cast<size_t>(c), T(0));
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) dv[j] += node.grad[i * c + j];
      accumulate(V, dv);
    }
  };
  return make_op<T>("broadcast_add", a.shape(), {an, vn}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ValidationError(fmt::format("mul: shape mismatch {} vs {}", shape_str(a.shape()),
                                      shape_str(b.shape())));
  auto an = a.node(), bn = b.node();
  auto fwd = [an, bn]() {
    std::vector<T> out(an->value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] * bn->value[i];
    return out;
  };
  auto bwd = [](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    auto& B = *node.parents[1];
    if (A.requires_grad) {
      std::vector<T> da(A.value.size());
      for (size_t i = 0; i < da.size(); ++i) da[i] = node.grad[i] * B.value[i];
      accumulate(A, da);
    }
    if (B.requires_grad) {
      std::vector<T> db(B.value.size());
      for (size_t i = 0; i < db.size(); ++i) db[i] = node.grad[i] * A.value[i];
      accumulate(B, db);
    }
  };
  return make_op<T>("mul", a.shape(), {an, bn}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto an = a.node();
  auto fwd = [an, s]() {
    std::vector<T> out(an->value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] * s;
    return out;
  };
  auto bwd = [s](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (A.requires_grad) {
      std::vector<T> da(A.value.size());
      for (size_t i = 0; i < da.size(); ++i) da[i] = node.grad[i] * s;
      accumulate(A, da);
    }
  };
  return make_op<T>("scale", a.shape(), {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  check_2d(a, "transpose");
  const int64_t r = a.rows(), c = a.cols();
  auto an = a.node();
  auto fwd = [an, r, c]() { return k_transpose(an->value.data(), r, c); };
  auto bwd = [r, c](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (A.requires_grad) accumulate(A, k_transpose(node.grad.data(), c, r));
  };
  return make_op<T>("transpose", {c, r}, {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int64_t>& ids) {
  check_2d(table, "gather_rows");
  const int64_t r = table.rows(), c = table.cols();
  for (int64_t id : ids)
    if (id < 0 || id >= r)
      throw ValidationError(fmt::format("gather_rows: index {} out of range [0, {})", id, r));
  auto tn = table.node();
  auto fwd = [tn, ids, c]() {
    std::vector<T> out(ids.size() * static_cast<size_t>(c));
    for (size_t i = 0; i < ids.size(); ++i)
      std::memcpy(out.data() + i * c, tn->value.data() + ids[i] * c, sizeof(T) * c);
    return out;
  };
  auto bwd = [ids, c](TensorNode<T>& node) {
    auto& Tab = *node.parents[0];
    if (!Tab.requires_grad) return;
    auto& g = Tab.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const T* src = node.grad.data() + i * c;
      T* dst = g.data() + ids[i] * c;
      for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  };
  return make_op<T>("gather_rows", {static_cast<int64_t>(ids.size()), c}, {tn},
                    std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> scatter_rows(const Tensor<T>& values, const std::vector<int64_t>& ids,
                       int64_t num_rows) {
  check_2d(values, "scatter_rows");
  if (static_cast<int64_t>(ids.size()) != values.rows())
    throw ValidationError(fmt::format("scatter_rows: {} indices for {} rows", ids.size(),
                                      values.rows()));
  const int64_t c = values.cols();
  for (int64_t id : ids)
    if (id < 0 || id >= num_rows)
      throw ValidationError(
          fmt::format("scatter_rows: index {} out of range [0, {})", id, num_rows));
  auto vn = values.node();
  auto fwd = [vn, ids, num_rows, c]() {
    std::vector<T> out(static_cast<size_t>(num_rows) * c, T(0));
    for (size_t i = 0; i < ids.size(); ++i) {
      const T* src = vn->value.data() + i * c;
      T* dst = out.data() + ids[i] * c;
      for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    return out;
  };
  auto bwd = [ids, c](TensorNode<T>& node) {
    auto& V = *node.parents[0];
    if (!V.requires_grad) return;
    std::vector<T> dv(V.value.size(), T(0));
    for (size_t i = 0; i < ids.size(); ++i) {
      const T* src = node.grad.data() + ids[i] * c;
      T* dst = dv.data() + i * c;
      for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    accumulate(V, dv);
  };
  return make_op<T>("scatter_rows", {num_rows, c}, {vn}, std::move(fwd), std::move(bwd));
}

namespace {

// rows = product of leading dims, cols = last dim
template <class T>
std::pair<int64_t, int64_t> rows_cols_last_axis(const Tensor<T>& a, const char* op) {
  if (a.shape().empty()) throw ValidationError(fmt::format("{}: rank-0 tensor", op));
  int64_t c = a.shape().back();
  int64_t r = a.numel() / c;
  return {r, c};
}

}  // namespace

template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  auto [r, c] = rows_cols_last_axis(a, "softmax");
  auto an = a.node();
  auto fwd = [an, r, c]() {
    std::vector<T> out(an->value.size());
    for (int64_t i = 0; i < r; ++i) {
      const T* x = an->value.data() + i * c;
      T* y = out.data() + i * c;
      T mx = x[0];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
      T s = T(0);
      for (int64_t j = 0; j < c; ++j) {
        y[j] = std::exp(x[j] - mx);
        s += y[j];
      }
      T inv = T(1) / s;
      for (int64_t j = 0; j < c; ++j) y[j] *= inv;
    }
    return out;
  };
  auto bwd = [r, c](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (!A.requires_grad) return;
    std::vector<T> da(A.value.size());
    for (int64_t i = 0; i < r; ++i) {
      const T* p = node.value.data() + i * c;
      const T* dy = node.grad.data() + i * c;
      T dot = T(0);
      for (int64_t j = 0; j < c; ++j) dot += dy[j] * p[j];
      for (int64_t j = 0; j < c; ++j) da[i * c + j] = p[j] * (dy[j] - dot);
    }
    accumulate(A, da);
  };
  return make_op<T>("softmax", a.shape(), {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  auto [r, c] = rows_cols_last_axis(a, "log_softmax");
  auto an = a.node();
  auto fwd = [an, r, c]() {
    std::vector<T> out(an->value.size());
    for (int64_t i = 0; i < r; ++i) {
      const T* x = an->value.data() + i * c;
      T* y = out.data() + i * c;
      T mx = x[0];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
      T s = T(0);
      for (int64_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
      T lse = mx + std::log(s);
      for (int64_t j = 0; j < c; ++j) y[j] = x[j] - lse;
    }
    return out;
  };
  auto bwd = [r, c](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (!A.requires_grad) return;
    std::vector<T> da(A.value.size());
    for (int64_t i = 0; i < r; ++i) {
      const T* y = node.value.data() + i * c;  // log-probs
      const T* dy = node.grad.data() + i * c;
      T s = T(0);
      for (int64_t j = 0; j < c; ++j) s += dy[j];
      for (int64_t j = 0; j < c; ++j) da[i * c + j] = dy[j] - std::exp(y[j]) * s;
    }
    accumulate(A, da);
  };
  return make_op<T>("log_softmax", a.shape(), {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> take_per_row(const Tensor<T>& a, const std::vector<int64_t>& ids) {
  check_2d(a, "take_per_row");
  const int64_t r = a.rows(), c = a.cols();
  if (static_cast<int64_t>(ids.size()) != r)
    throw ValidationError(fmt::format("take_per_row: {} indices for {} rows", ids.size(), r));
  for (int64_t id : ids)
    if (id < 0 || id >= c)
      throw ValidationError(fmt::format("take_per_row: index {} out of range [0, {})", id, c));
  auto an = a.node();
  auto fwd = [an, ids, c]() {
    std::vector<T> out(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) out[i] = an->value[i * c + ids[i]];
    return out;
  };
  auto bwd = [ids, c](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (!A.requires_grad) return;
    auto& g = A.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) g[i * c + ids[i]] += node.grad[i];
  };
  return make_op<T>("take_per_row", {r}, {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  auto an = a.node();
  auto fwd = [an]() {
    std::vector<T> out(an->value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] > T(0) ? an->value[i] : T(0);
    return out;
  };
  auto bwd = [](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (!A.requires_grad) return;
    std::vector<T> da(A.value.size());
    for (size_t i = 0; i < da.size(); ++i)
      da[i] = A.value[i] > T(0) ? node.grad[i] : T(0);
    accumulate(A, da);
  };
  return make_op<T>("relu", a.shape(), {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  auto an = a.node();
  constexpr T kInvSqrt2 = T(0.70710678118654752440084436210485);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267793994605993438);
  auto fwd = [an, kInvSqrt2]() {
    std::vector<T> out(an->value.size());
    for (size_t i = 0; i < out.size(); ++i) {
      T x = an->value[i];
      out[i] = T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2));
    }
    return out;
  };
  auto bwd = [kInvSqrt2, kInvSqrt2Pi](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (!A.requires_grad) return;
    std::vector<T> da(A.value.size());
    for (size_t i = 0; i < da.size(); ++i) {
      T x = A.value[i];
      T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
      T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
      da[i] = node.grad[i] * (cdf + x * pdf);
    }
    accumulate(A, da);
  };
  return make_op<T>("gelu", a.shape(), {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  check_2d(x, "layer_norm");
  const int64_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c)
    throw ValidationError(fmt::format("layer_norm: gain/bias {} do not match columns of {}",
                                      shape_str(gain.shape()), shape_str(x.shape())));
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  auto fwd = [xn, gn, bn, r, c, eps]() {
    std::vector<T> out(xn->value.size());
    for (int64_t i = 0; i < r; ++i) {
      const T* xi = xn->value.data() + i * c;
      T* yi = out.data() + i * c;
      T mean = T(0);
      for (int64_t j = 0; j < c; ++j) mean += xi[j];
      mean /= T(c);
      T var = T(0);
      for (int64_t j = 0; j < c; ++j) {
        T d = xi[j] - mean;
        var += d * d;
      }
      var /= T(c);
      T inv = T(1) / std::sqrt(var + eps);
      for (int64_t j = 0; j < c; ++j)
        yi[j] = (xi[j] - mean) * inv * gn->value[j] + bn->value[j];
    }
    return out;
  };
  auto bwd = [r, c, eps](TensorNode<T>& node) {
    auto& X = *node.parents[0];
    auto& G = *node.parents[1];
    auto& B = *node.parents[2];
    std::vector<T> dx(X.requires_grad ? X.value.size() : 0, T(0));
    std::vector<T> dg(G.requires_grad ? G.value.size() : 0, T(0));
    std::vector<T> db(B.requires_grad ? B.value.size() : 0, T(0));
    for (int64_t i = 0; i < r; ++i) {
      const T* xi = X.value.data() + i * c;
      const T* dyi = node.grad.data() + i * c;
      T mean = T(0);
      for (int64_t j = 0; j < c; ++j) mean += xi[j];
      mean /= T(c);
      T var = T(0);
      for (int64_t j = 0; j < c; ++j) {
        T d = xi[j] - mean;
        var += d * d;
      }
      var /= T(c);
      T inv = T(1) / std::sqrt(var + eps);
      if (!dg.empty() || !db.empty()) {
        for (int64_t j = 0; j < c; ++j) {
          T xhat = (xi[j] - mean) * inv;
          if (!dg.empty()) dg[j] += dyi[j] * xhat;
          if (!db.empty()) db[j] += dyi[j];
        }
      }
      if (!dx.empty()) {
        // dx = inv * (gdy - mean(gdy) - xhat * mean(gdy*xhat))
        T m1 = T(0), m2 = T(0);
        for (int64_t j = 0; j < c; ++j) {
          T gdy = dyi[j] * G.value[j];
          T xhat = (xi[j] - mean) * inv;
          m1 += gdy;
          m2 += gdy * xhat;
        }
        m1 /= T(c);
        m2 /= T(c);
        for (int64_t j = 0; j < c; ++j) {
          T gdy = dyi[j] * G.value[j];
          T xhat = (xi[j] - mean) * inv;
          dx[i * c + j] = inv * (gdy - m1 - xhat * m2);
        }
      }
    }
    if (!dx.empty()) accumulate(X, dx);
    if (!dg.empty()) accumulate(G, dg);
    if (!db.empty()) accumulate(B, db);
  };
  return make_op<T>("layer_norm", x.shape(), {xn, gn, bn}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ValidationError("concat: axis must be 0 or 1");
  for (auto& p : parts) check_2d(p, "concat");
  int64_t r = parts[0].rows(), c = parts[0].cols();
  int64_t total = 0;
  for (auto& p : parts) {
    if (axis == 0 && p.cols() != c)
      throw ValidationError(fmt::format("concat: column mismatch {} vs {}", p.cols(), c));
    if (axis == 1 && p.rows() != r)
      throw ValidationError(fmt::format("concat: row mismatch {} vs {}", p.rows(), r));
    total += (axis == 0) ? p.rows() : p.cols();
  }
  Shape out_shape = (axis == 0) ? Shape{total, c} : Shape{r, total};
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  parents.reserve(parts.size());
  for (auto& p : parts) parents.push_back(p.node());
  auto fwd = [parents, axis, out_shape]() {
    const int64_t rr = out_shape[0], cc = out_shape[1];
    std::vector<T> out(static_cast<size_t>(rr) * cc);
    if (axis == 0) {
      size_t off = 0;
      for (auto& p : parents) {
        std::memcpy(out.data() + off, p->value.data(), p->value.size() * sizeof(T));
        off += p->value.size();
      }
    } else {
      int64_t col0 = 0;
      for (auto& p : parents) {
        int64_t pc = p->shape[1];
        for (int64_t i = 0; i < rr; ++i)
          std::memcpy(out.data() + i * cc + col0, p->value.data() + i * pc, pc * sizeof(T));
        col0 += pc;
      }
    }
    return out;
  };
  auto bwd = [axis, out_shape](TensorNode<T>& node) {
    const int64_t cc = out_shape[1];
    if (axis == 0) {
      size_t off = 0;
      for (auto& p : node.parents) {
        if (p->requires_grad) {
          auto& g = p->ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) g[i] += node.grad[off + i];
        }
        off += p->value.size();
      }
    } else {
      int64_t col0 = 0;
      for (auto& p : node.parents) {
        int64_t pc = p->shape[1];
        if (p->requires_grad) {
          auto& g = p->ensure_grad();
          int64_t pr = p->shape[0];
          for (int64_t i = 0; i < pr; ++i)
            for (int64_t j = 0; j < pc; ++j)
              g[i * pc + j] += node.grad[i * cc + col0 + j];
        }
        col0 += pc;
      }
    }
  };
  return make_op<T>("concat", out_shape, std::move(parents), std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int64_t r0, int64_t r1, int64_t c0, int64_t c1) {
  check_2d(a, "slice");
  const int64_t r = a.rows(), c = a.cols();
  if (r0 < 0 || r1 > r || r0 > r1 || c0 < 0 || c1 > c || c0 > c1)
    throw ValidationError(fmt::format("slice: range [{}:{}, {}:{}] invalid for {}", r0, r1,
                                      c0, c1, shape_str(a.shape())));
  auto an = a.node();
  const int64_t nr = r1 - r0, nc = c1 - c0;
  auto fwd = [an, r0, c0, nr, nc, c]() {
    std::vector<T> out(static_cast<size_t>(nr) * nc);
    for (int64_t i = 0; i < nr; ++i)
      std::memcpy(out.data() + i * nc, an->value.data() + (r0 + i) * c + c0, nc * sizeof(T));
    return out;
  };
  auto bwd = [r0, c0, nr, nc, c](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (!A.requires_grad) return;
    auto& g = A.ensure_grad();
    for (int64_t i = 0; i < nr; ++i)
      for (int64_t j = 0; j < nc; ++j)
        g[(r0 + i) * c + c0 + j] += node.grad[i * nc + j];
  };
  return make_op<T>("slice", {nr, nc}, {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  auto an = a.node();
  auto fwd = [an]() {
    T s = T(0);
    for (T v : an->value) s += v;
    return std::vector<T>{s};
  };
  auto bwd = [](TensorNode<T>& node) {
    auto& A = *node.parents[0];
    if (!A.requires_grad) return;
    std::vector<T> da(A.value.size(), node.grad[0]);
    accumulate(A, da);
  };
  return make_op<T>("sum", {1}, {an}, std::move(fwd), std::move(bwd));
}

template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           int64_t n_heads, int64_t seq_len) {
  check_2d(q, "causal_attention");
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw ValidationError(fmt::format("causal_attention: q/k/v shapes differ: {} {} {}",
                                      shape_str(q.shape()), shape_str(k.shape()),
                                      shape_str(v.shape())));
  const int64_t rows = q.rows(), d = q.cols();
  if (d % n_heads != 0)
    throw ValidationError(fmt::format("causal_attention: d_model {} not divisible by {} heads",
                                      d, n_heads));
  if (seq_len <= 0 || rows % seq_len != 0)
    throw ValidationError(fmt::format("causal_attention: {} rows not a multiple of seq_len {}",
                                      rows, seq_len));
  const int64_t dh = d / n_heads;
  const int64_t n_seq = rows / seq_len;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto qn = q.node(), kn = k.node(), vn = v.node();

  // Attention probabilities are kept for the backward pass (lower triangle,
  // row-major per (sequence, head)).
  auto probs = std::make_shared<std::vector<T>>();
  auto fwd = [qn, kn, vn, n_heads, seq_len, n_seq, dh, d, inv_sqrt, probs]() {
    std::vector<T> out(qn->value.size(), T(0));
    probs->assign(static_cast<size_t>(n_seq) * n_heads * seq_len * seq_len, T(0));
    std::vector<T> scores(static_cast<size_t>(seq_len));
    for (int64_t s = 0; s < n_seq; ++s) {
      const int64_t base = s * seq_len;
      for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t hc = h * dh;
        T* p_base = probs->data() + ((s * n_heads + h) * seq_len * seq_len);
        for (int64_t i = 0; i < seq_len; ++i) {
          const T* qi = qn->value.data() + (base + i) * d + hc;
          T mx = -std::numeric_limits<T>::infinity();
          for (int64_t j = 0; j <= i; ++j) {
            const T* kj = kn->value.data() + (base + j) * d + hc;
            T dot = T(0);
            for (int64_t e = 0; e < dh; ++e) dot += qi[e] * kj[e];
            scores[j] = dot * inv_sqrt;
            mx = std::max(mx, scores[j]);
          }
          T ssum = T(0);
          for (int64_t j = 0; j <= i; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            ssum += scores[j];
          }
          T inv = T(1) / ssum;
          T* pi = p_base + i * seq_len;
          T* oi = out.data() + (base + i) * d + hc;
          for (int64_t j = 0; j <= i; ++j) {
            T p = scores[j] * inv;
            pi[j] = p;
            const T* vj = vn->value.data() + (base + j) * d + hc;
            for (int64_t e = 0; e < dh; ++e) oi[e] += p * vj[e];
          }
        }
      }
    }
    return out;
  };
  auto bwd = [n_heads, seq_len, n_seq, dh, d, inv_sqrt, probs](TensorNode<T>& node) {
    auto& Q = *node.parents[0];
    auto& K = *node.parents[1];
    auto& V = *node.parents[2];
    std::vector<T> dq(Q.requires_grad ? Q.value.size() : 0, T(0));
    std::vector<T> dk(K.requires_grad ? K.value.size() : 0, T(0));
    std::vector<T> dv(V.requires_grad ? V.value.size() : 0, T(0));
    std::vector<T> dp(static_cast<size_t>(seq_len));
    std::vector<T> ds(static_cast<size_t>(seq_len));
    for (int64_t s = 0; s < n_seq; ++s) {
      const int64_t base = s * seq_len;
      for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t hc = h * dh;
        const T* p_base = probs->data() + ((s * n_heads + h) * seq_len * seq_len);
        for (int64_t i = 0; i < seq_len; ++i) {
          const T* pi = p_base + i * seq_len;
          const T* doi = node.grad.data() + (base + i) * d + hc;
          // dP = dO . V^T ; dV += P^T dO
          for (int64_t j = 0; j <= i; ++j) {
            const T* vj = V.value.data() + (base + j) * d + hc;
            T acc = T(0);
            for (int64_t e = 0; e < dh; ++e) acc += doi[e] * vj[e];
            dp[j] = acc;
            if (!dv.empty()) {
              T* dvj = dv.data() + (base + j) * d + hc;
              for (int64_t e = 0; e < dh; ++e) dvj[e] += pi[j] * doi[e];
            }
          }
          // softmax backward: dS = P o (dP - sum(dP o P))
          T dot = T(0);
          for (int64_t j = 0; j <= i; ++j) dot += dp[j] * pi[j];
          for (int64_t j = 0; j <= i; ++j) ds[j] = pi[j] * (dp[j] - dot) * inv_sqrt;
          // dQ_i += ds . K ; dK_j += ds_j * Q_i
          const T* qi = Q.value.data() + (base + i) * d + hc;
          T* dqi = dq.empty() ? nullptr : dq.data() + (base + i) * d + hc;
          for (int64_t j = 0; j <= i; ++j) {
            const T* kj = K.value.data() + (base + j) * d + hc;
            if (dqi)
              for (int64_t e = 0; e < dh; ++e) dqi[e] += ds[j] * kj[e];
            if (!dk.empty()) {
              T* dkj = dk.data() + (base + j) * d + hc;
              for (int64_t e = 0; e < dh; ++e) dkj[e] += ds[j] * qi[e];
            }
          }
        }
      }
    }
    if (!dq.empty()) accumulate(Q, dq);
    if (!dk.empty()) accumulate(K, dk);
    if (!dv.empty()) accumulate(V, dv);
  };
  return make_op<T>("causal_attention", q.shape(), {qn, kn, vn}, std::move(fwd),
                    std::move(bwd));
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// ---- Backward ----

namespace {

template <class T>
std::vector<std::shared_ptr<TensorNode<T>>> topo_order(
    const std::shared_ptr<TensorNode<T>>& root) {
  std::vector<std::shared_ptr<TensorNode<T>>> order;
  std::unordered_set<TensorNode<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<std::shared_ptr<TensorNode<T>>, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      auto child = node->parents[next_child++];
      if (seen.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ValidationError(fmt::format("backward: loss must be scalar, got shape {}",
                                      shape_str(loss.shape())));
  if (!loss.node()->requires_grad)
    throw ValidationError("backward: loss does not depend on any requires_grad tensor");
  auto order = topo_order(loss.node());
  loss.node()->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& node = *it;
    if (!node->requires_grad || node->grad.empty()) continue;
    if (node->backward) node->backward(*node);
    if (!node->is_leaf && node.get() != loss.node().get()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

template <class T>
void zero_grads(const std::vector<Tensor<T>>& params) {
  for (auto& p : params) const_cast<Tensor<T>&>(p).zero_grad();
}

// ---- ComputationRecord ----

template <class T>
ComputationRecord<T>::ComputationRecord(const Tensor<T>& root)
    : nodes_(topo_order(root.node())) {}

template <class T>
std::vector<std::string> ComputationRecord<T>::op_names() const {
  std::vector<std::string> names;
  for (auto& n : nodes_)
    if (!n->is_leaf) names.push_back(n->op);
  return names;
}

template <class T>
bool ComputationRecord<T>::replay_matches() const {
  for (auto& n : nodes_) {
    if (n->is_leaf || !n->recompute) continue;
    auto replayed = n->recompute();
    if (replayed.size() != n->value.size()) return false;
    if (std::memcmp(replayed.data(), n->value.data(), replayed.size() * sizeof(T)) != 0)
      return false;
  }
  return true;
}

// ---- Gradient checking ----

GradCheckReport check_gradients(
    const std::function<Tensor<double>()>& fn,
    const std::vector<std::pair<std::string, Tensor<double>>>& params, double h,
    double tol) {
  GradCheckReport report;
  // Reverse-mode gradients at the unperturbed point.
  for (auto& [name, p] : params) const_cast<Tensor<double>&>(p).zero_grad();
  auto loss = fn();
  backward(loss);
  std::vector<std::vector<double>> ad_grads;
  for (auto& [name, p] : params)
    ad_grads.emplace_back(p.grad().begin(), p.grad().end());

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, p] = params[pi];
    GradCheckEntry entry;
    entry.name = name;
    auto data = const_cast<Tensor<double>&>(p).mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      double fp = fn().item();
      data[i] = orig - h;
      double fm = fn().item();
      data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        entry.finite = false;
        report.non_finite = true;
        continue;
      }
      double fd = (fp - fm) / (2 * h);
      double ad = ad_grads[pi][i];
      double denom = std::max({std::abs(fd), std::abs(ad), 1e-8});
      double rel = std::abs(fd - ad) / denom;
      // Both exactly zero compare equal.
      if (fd == 0.0 && ad == 0.0) rel = 0.0;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  (void)tol;
  return report;
}

// ---- Explicit instantiations ----

#define MOLE_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                              \
  template class ComputationRecord<T>;                                                   \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> broadcast_add<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                      \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                     \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, const std::vector<int64_t>&);      \
  template Tensor<T> scatter_rows<T>(const Tensor<T>&, const std::vector<int64_t>&,      \
                                     int64_t);                                           \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                       \
  template Tensor<T> log_softmax<T>(const Tensor<T>&);                                   \
  template Tensor<T> take_per_row<T>(const Tensor<T>&, const std::vector<int64_t>&);     \
  template Tensor<T> relu<T>(const Tensor<T>&);                                          \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                          \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                   T);                                                   \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                      \
  template Tensor<T> slice<T>(const Tensor<T>&, int64_t, int64_t, int64_t, int64_t);     \
  template Tensor<T> sum<T>(const Tensor<T>&);                                           \
  template Tensor<T> causal_attention<T>(const Tensor<T>&, const Tensor<T>&,             \
                                         const Tensor<T>&, int64_t, int64_t);            \
  template void backward<T>(const Tensor<T>&);                                           \
  template void zero_grads<T>(const std::vector<Tensor<T>>&);

MOLE_INSTANTIATE(float)
MOLE_INSTANTIATE(double)

template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;

#undef MOLE_INSTANTIATE

}  // namespace mole
