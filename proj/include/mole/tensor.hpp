// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with reverse-mode differentiation. Values are immutable once
// an op has consumed them; gradients accumulate additively during a
// single-threaded backward pass.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mole/common.hpp"

namespace mole {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class DType { f32, f64 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (sizeof(T) == 4) return DType::f32;
  return DType::f64;
}
const char* dtype_name(DType d);

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until touched; same length as value otherwise
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op;  // primitive name; empty for leaves
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Accumulates this node's grad into its parents' grads.
  std::function<void(TensorNode&)> backward;
  // Replays the forward computation from the parents' current values.
  std::function<std::vector<T>()> recompute;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Value-semantic handle to a node in the computation graph.
template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T v);
  static Tensor scalar(T v) { return full({1}, v); }
  static Tensor from(Shape shape, std::vector<T> data);
  static Tensor gaussian(Shape shape, Rng& rng, T stddev);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  int64_t rows() const { return node_->shape.at(0); }
  int64_t cols() const { return node_->shape.at(1); }
  DType dtype() const { return dtype_of<T>(); }

  std::span<const T> data() const { return node_->value; }
  // Mutable access is for leaves only (parameter updates between steps).
  std::span<T> mutable_data();

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg);

  // Gradient of requires_grad tensors; allocates zeros if never written.
  std::span<const T> grad() const;
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  }

  T at(std::initializer_list<int64_t> idx) const;
  T item() const;

  // Same values, no graph history, not trainable.
  Tensor detached() const { return from(node_->shape, node_->value); }
  template <class U>
  Tensor<U> cast() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---- Primitive operations (each registers a backward rule) ----

// matmul with optional transposition of either operand.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
// (R x C) + row vector (C), broadcast over rows.
template <class T>
Tensor<T> broadcast_add(const Tensor<T>& a, const Tensor<T>& v);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <class T>
Tensor<T> transpose(const Tensor<T>& a);
// Row lookup: out[i, :] = table[ids[i], :]. Doubles as embedding lookup.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int64_t>& ids);
// Adjoint of gather: out has `num_rows` rows, out[ids[i], :] += values[i, :].
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& values, const std::vector<int64_t>& ids,
                       int64_t num_rows);
template <class T>
Tensor<T> softmax(const Tensor<T>& a);
template <class T>
Tensor<T> log_softmax(const Tensor<T>& a);
// out[i] = a[i, ids[i]] (one element per row).
template <class T>
Tensor<T> take_per_row(const Tensor<T>& a, const std::vector<int64_t>& ids);
template <class T>
Tensor<T> relu(const Tensor<T>& a);
template <class T>
Tensor<T> gelu(const Tensor<T>& a);
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
// Half-open row/column ranges.
template <class T>
Tensor<T> slice(const Tensor<T>& a, int64_t r0, int64_t r1, int64_t c0, int64_t c1);
template <class T>
Tensor<T> sum(const Tensor<T>& a);

// Causal multi-head scaled dot-product attention over `rows/seq_len`
// stacked sequences. q, k, v are (R x d_model); heads split d_model evenly.
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           int64_t n_heads, int64_t seq_len);

// While alive, newly created ops record no graph: outputs are plain values
// (no parents, no backward). Forward math is unchanged.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// ---- Reverse pass ----

// Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf.
// loss must hold exactly one element.
template <class T>
void backward(const Tensor<T>& loss);

template <class T>
void zero_grads(const std::vector<Tensor<T>>& params);

// ---- Recorded computation ----

// Topologically ordered (creation-ordered) view of the graph below a root.
template <class T>
class ComputationRecord {
 public:
  explicit ComputationRecord(const Tensor<T>& root);
  size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;
  // Recomputes every non-leaf node from its parents and compares bit-for-bit.
  bool replay_matches() const;

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
};

// ---- Gradient checking (f64 only) ----

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool non_finite = false;
  bool pass(double tol) const { return !non_finite && max_rel_err <= tol; }
};

// Compares reverse-mode gradients of fn() against central finite differences
// for every element of every named parameter. fn must rebuild its graph from
// the current parameter values on each call.
GradCheckReport check_gradients(const std::function<Tensor<double>()>& fn,
                                const std::vector<std::pair<std::string, Tensor<double>>>& params,
                                double h, double tol);

}  // namespace mole
