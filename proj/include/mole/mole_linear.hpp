// SPDX-License-Identifier: Apache-2.0
//
// The routed linear layer: a frozen base weight plus shared / per-language /
// natural-language adapter pairs, applied per token by language label.
#pragma once

#include <set>

#include "mole/linalg.hpp"
#include "mole/routing.hpp"
#include "mole/tensor.hpp"

namespace mole {

enum class RoutingMode {
  by_label,  // shared+expert for PL, nl pair for NL
  single,    // one adapter pair for every non-PAD token (all-lang baseline)
  none,      // base weight only (pretrain / full finetune)
};

template <class T>
struct MoleLinear {
  Tensor<T> w0;  // d x k
  AdapterPair<T> shared;
  std::vector<AdapterPair<T>> experts;
  AdapterPair<T> nl;
  RoutingMode mode = RoutingMode::by_label;

  int64_t d() const { return w0.rows(); }
  int64_t k() const { return w0.cols(); }
  int num_experts() const { return static_cast<int>(experts.size()); }

  // Freezes the base and marks every adapter factor trainable.
  static MoleLinear from_init(MoleLinearInit<T> init);
  // Bare linear layer; trainable toggles the base weight.
  static MoleLinear plain(Tensor<T> w, bool trainable);
  // Frozen base plus one unconditionally applied standard-init pair.
  static MoleLinear single_adapter(Tensor<T> w, int64_t rank, Rng& rng);

  // Trainable factors in a fixed order (skips rank-0 pairs).
  std::vector<Tensor<T>> trainable_params() const;
};

// Per-token routed application; labels.size() must equal x.rows(). PAD rows
// come out zero. Grouping per label avoids materializing d x k products.
template <class T>
Tensor<T> routed_forward(const MoleLinear<T>& lin, const Tensor<T>& x,
                         const LabelSequence& labels);

std::set<std::string> active_adapters(const LanguageLabel& label);

// Trainable parameters of one routed layer: (d+k) * (r_s + K*r_e + r_n).
int64_t trainable_parameter_count(int64_t d, int64_t k, const SplitPlan& plan,
                                  int num_languages);

}  // namespace mole
