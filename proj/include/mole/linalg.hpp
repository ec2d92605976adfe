// SPDX-License-Identifier: Apache-2.0
//
// SVD and the principal-component split initializer for adapter factors.
#pragma once

#include "mole/routing.hpp"
#include "mole/tensor.hpp"

namespace mole {

// Thin SVD of a d x k matrix: W = U diag(S) V^T with U (d x m), S (m),
// V (k x m), m = min(d, k). S is sorted descending; U and V have orthonormal
// columns even for rank-deficient inputs.
struct SvdResult {
  Tensor<double> u;
  Tensor<double> s;
  Tensor<double> v;
};

// One-sided Jacobi. Caps at 60 sweeps; throws RuntimeError with the residual
// off-diagonal norm if that is not enough.
SvdResult svd(const Tensor<double>& w);

enum class SplitOrder { shared_first, shared_last };
enum class InitScheme { pissa, standard };

const char* to_string(SplitOrder o);
const char* to_string(InitScheme s);
SplitOrder split_order_from_string(const std::string& s);
InitScheme init_scheme_from_string(const std::string& s);

struct SplitPlan {
  int64_t r_s = 0;
  int64_t r_e = 0;
  SplitOrder order = SplitOrder::shared_first;
  InitScheme scheme = InitScheme::pissa;

  // The NL adapter always carries the combined rank.
  int64_t r_n() const { return r_s + r_e; }
  void validate(int64_t d, int64_t k) const;
};

template <class T>
struct AdapterPair {
  Tensor<T> b;  // d x r
  Tensor<T> a;  // r x k
  int64_t rank() const { return b.defined() ? b.shape()[1] : 0; }
};

// One linear layer's split: frozen residual base plus factor pairs.
template <class T>
struct MoleLinearInit {
  Tensor<T> w0;                         // d x k
  AdapterPair<T> shared;                // rank r_s
  std::vector<AdapterPair<T>> experts;  // rank r_e each
  AdapterPair<T> nl;                    // rank r_n
};

// Splits W into residual base + adapters. pissa assigns principal components
// per the plan's order (factor convention B = U s^1/2, A = s^1/2 V^T);
// standard keeps W0 = W, draws B from N(0, 0.02) and zeroes A. rng is used by
// the standard scheme only.
template <class T>
MoleLinearInit<T> split_init(const Tensor<T>& w, const SplitPlan& plan, int num_languages,
                             Rng* rng = nullptr);

// Dense effective weight for one routing path.
template <class T>
Tensor<T> merge(const MoleLinearInit<T>& init, const LanguageLabel& path);

}  // namespace mole
