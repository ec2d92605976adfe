// SPDX-License-Identifier: Apache-2.0
#include "mole/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace mole {

LanguageRegistry::LanguageRegistry(std::vector<std::string> names, FallbackPolicy fallback)
    : names_(std::move(names)), fallback_(fallback) {
  if (names_.empty()) throw ValidationError("language registry: needs at least one language");
  for (size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw ValidationError("language registry: empty name");
    for (size_t j = i + 1; j < names_.size(); ++j)
      if (names_[i] == names_[j])
        throw ValidationError(fmt::format("language registry: duplicate name '{}'", names_[i]));
  }
}

const std::string& LanguageRegistry::name(int k) const {
  if (k < 0 || k >= size())
    throw ValidationError(fmt::format("language registry: index {} out of range [0, {})", k,
                                      size()));
  return names_[static_cast<size_t>(k)];
}

std::optional<int> LanguageRegistry::find(const std::string& name) const {
  for (size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return std::nullopt;
}

const char* to_string(SplitOrder o) {
  return o == SplitOrder::shared_first ? "shared-first" : "shared-last";
}
const char* to_string(InitScheme s) { return s == InitScheme::pissa ? "pissa" : "standard"; }

SplitOrder split_order_from_string(const std::string& s) {
  if (s == "shared-first") return SplitOrder::shared_first;
  if (s == "shared-last") return SplitOrder::shared_last;
  throw ValidationError(fmt::format("unknown split order '{}'", s));
}
InitScheme init_scheme_from_string(const std::string& s) {
  if (s == "pissa") return InitScheme::pissa;
  if (s == "standard") return InitScheme::standard;
  throw ValidationError(fmt::format("unknown init scheme '{}'", s));
}

void SplitPlan::validate(int64_t d, int64_t k) const {
  if (r_s < 0 || r_e < 0) throw ValidationError("split plan: negative rank");
  if (r_n() > std::min(d, k))
    throw ValidationError(fmt::format(
        "split plan: r_n = {} exceeds min(d, k) = {} for a {} x {} layer", r_n(),
        std::min(d, k), d, k));
}

namespace {

// One-sided Jacobi on the columns of a (d x k, d >= k): returns the rotated
// copy (= U diag(S)) and the accumulated rotations (= V).
struct JacobiState {
  std::vector<double> a;  // d x k, row-major
  std::vector<double> v;  // k x k, row-major
};

double frobenius(const std::vector<double>& x) {
  double s = 0;
  for (double e : x) s += e * e;
  return std::sqrt(s);
}

JacobiState jacobi_sweeps(const Tensor<double>& w) {
  const int64_t d = w.rows(), k = w.cols();
  JacobiState st;
  st.a.assign(w.data().begin(), w.data().end());
  st.v.assign(static_cast<size_t>(k) * k, 0.0);
  for (int64_t j = 0; j < k; ++j) st.v[j * k + j] = 1.0;

  const double fro = frobenius(st.a);
  if (fro == 0.0) return st;
  // Pairwise relative criterion: |a_p . a_q| <= tol * |a_p| |a_q|. An absolute
  // threshold under-rotates small columns and would spoil the orthogonality of
  // the normalized U columns.
  const double tol = 1e-13 * std::sqrt(static_cast<double>(std::max(d, k)));
  const int max_sweeps = 60;

  auto col_dot = [&](int64_t p, int64_t q) {
    double s = 0;
    for (int64_t i = 0; i < d; ++i) s += st.a[i * k + p] * st.a[i * k + q];
    return s;
  };

  double worst = 0.0;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    worst = 0.0;
    for (int64_t p = 0; p < k - 1; ++p) {
      for (int64_t q = p + 1; q < k; ++q) {
        const double apq = col_dot(p, q);
        if (apq == 0.0) continue;
        const double app = col_dot(p, p);
        const double aqq = col_dot(q, q);
        const double scale = std::sqrt(app * aqq);
        if (scale > 0.0) worst = std::max(worst, std::abs(apq) / scale);
        if (std::abs(apq) <= tol * scale) continue;
        rotated = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t =
            (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int64_t i = 0; i < d; ++i) {
          const double ap = st.a[i * k + p], aq = st.a[i * k + q];
          st.a[i * k + p] = c * ap - s * aq;
          st.a[i * k + q] = s * ap + c * aq;
        }
        for (int64_t i = 0; i < k; ++i) {
          const double vp = st.v[i * k + p], vq = st.v[i * k + q];
          st.v[i * k + p] = c * vp - s * vq;
          st.v[i * k + q] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) return st;
  }
  throw RuntimeError(fmt::format(
      "svd: Jacobi did not converge in 60 sweeps; worst normalized off-diagonal {}", worst));
}

// Orthonormal completion for zero singular directions: Gram-Schmidt of
// standard basis vectors against the existing columns.
void complete_column(std::vector<double>& u, int64_t d, int64_t m, int64_t col) {
  std::vector<double> cand(static_cast<size_t>(d));
  for (int64_t basis = 0; basis < d; ++basis) {
    std::fill(cand.begin(), cand.end(), 0.0);
    cand[basis] = 1.0;
    for (int64_t j = 0; j < m; ++j) {
      if (j == col) continue;
      double dot = 0;
      for (int64_t i = 0; i < d; ++i) dot += cand[i] * u[i * m + j];
      if (dot != 0.0)
        for (int64_t i = 0; i < d; ++i) cand[i] -= dot * u[i * m + j];
    }
    double nrm = frobenius(cand);
    if (nrm > 0.5) {
      for (int64_t i = 0; i < d; ++i) u[i * m + col] = cand[i] / nrm;
      return;
    }
  }
  throw RuntimeError("svd: failed to complete an orthonormal basis column");
}

SvdResult svd_tall(const Tensor<double>& w) {
  const int64_t d = w.rows(), k = w.cols();  // d >= k, m = k
  auto st = jacobi_sweeps(w);

  std::vector<double> sigma(static_cast<size_t>(k));
  for (int64_t j = 0; j < k; ++j) {
    double s = 0;
    for (int64_t i = 0; i < d; ++i) s += st.a[i * k + j] * st.a[i * k + j];
    sigma[j] = std::sqrt(s);
  }
  // Stable descending order; ties keep the order the decomposition produced.
  std::vector<int64_t> perm(static_cast<size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](int64_t x, int64_t y) { return sigma[x] > sigma[y]; });

  std::vector<double> u(static_cast<size_t>(d) * k, 0.0);
  std::vector<double> v(static_cast<size_t>(k) * k, 0.0);
  std::vector<double> s_sorted(static_cast<size_t>(k));
  const double smax = k > 0 ? sigma[perm[0]] : 0.0;
  std::vector<int64_t> needs_completion;
  for (int64_t jj = 0; jj < k; ++jj) {
    const int64_t src = perm[jj];
    s_sorted[jj] = sigma[src];
    for (int64_t i = 0; i < k; ++i) v[i * k + jj] = st.v[i * k + src];
    // Columns with negligible norm carry no trustworthy direction; their U
    // columns are filled by basis completion below (the tiny sigma keeps the
    // reconstruction within tolerance either way).
    if (sigma[src] > smax * 1e-12 && sigma[src] > 0.0) {
      const double inv = 1.0 / sigma[src];
      for (int64_t i = 0; i < d; ++i) u[i * k + jj] = st.a[i * k + src] * inv;
    } else {
      needs_completion.push_back(jj);
    }
  }
  for (int64_t jj : needs_completion) complete_column(u, d, k, jj);
  return {Tensor<double>::from({d, k}, std::move(u)),
          Tensor<double>::from({k}, std::move(s_sorted)),
          Tensor<double>::from({k, k}, std::move(v))};
}

}  // namespace

SvdResult svd(const Tensor<double>& w) {
  if (w.shape().size() != 2)
    throw ValidationError(
        fmt::format("svd: expected a matrix, got shape {}", shape_str(w.shape())));
  for (double x : w.data())
    if (!std::isfinite(x)) throw ValidationError("svd: non-finite entries");
  if (w.rows() >= w.cols()) return svd_tall(w);
  // W = U S V^T  <=>  W^T = V S U^T
  auto r = svd_tall(transpose(w));
  return {std::move(r.v), std::move(r.s), std::move(r.u)};
}

namespace {

// B = U_sel diag(sqrt(s)), A = diag(sqrt(s)) V_sel^T for columns [lo, hi).
AdapterPair<double> factor_slice(const SvdResult& f, int64_t lo, int64_t hi) {
  const int64_t d = f.u.rows(), k = f.v.rows(), r = hi - lo;
  std::vector<double> b(static_cast<size_t>(d) * r);
  std::vector<double> a(static_cast<size_t>(r) * k);
  for (int64_t j = 0; j < r; ++j) {
    const double root = std::sqrt(f.s.data()[lo + j]);
    for (int64_t i = 0; i < d; ++i) b[i * r + j] = f.u.at({i, lo + j}) * root;
    for (int64_t i = 0; i < k; ++i) a[j * k + i] = f.v.at({i, lo + j}) * root;
  }
  return {Tensor<double>::from({d, r}, std::move(b)),
          Tensor<double>::from({r, k}, std::move(a))};
}

template <class T>
AdapterPair<T> cast_pair(const AdapterPair<double>& p) {
  return {p.b.template cast<T>(), p.a.template cast<T>()};
}

}  // namespace

template <class T>
MoleLinearInit<T> split_init(const Tensor<T>& w, const SplitPlan& plan, int num_languages,
                             Rng* rng) {
  if (w.shape().size() != 2)
    throw ValidationError(fmt::format("split_init: expected a matrix, got shape {}",
                                      shape_str(w.shape())));
  if (num_languages < 1) throw ValidationError("split_init: needs at least one language");
  const int64_t d = w.rows(), k = w.cols();
  plan.validate(d, k);

  MoleLinearInit<T> init;
  if (plan.scheme == InitScheme::standard) {
    if (!rng) throw ValidationError("split_init: standard scheme needs an rng");
    init.w0 = w.detached();
    auto make_pair = [&](int64_t r) -> AdapterPair<T> {
      return {Tensor<T>::gaussian({d, r}, *rng, T(0.02)), Tensor<T>::zeros({r, k})};
    };
    init.shared = make_pair(plan.r_s);
    for (int i = 0; i < num_languages; ++i) init.experts.push_back(make_pair(plan.r_e));
    init.nl = make_pair(plan.r_n());
    return init;
  }

  auto f = svd(w.template cast<double>());
  const int64_t m = f.s.numel();
  const int64_t rn = plan.r_n();

  int64_t sh_lo, sh_hi, ex_lo, ex_hi;
  if (plan.order == SplitOrder::shared_first) {
    sh_lo = 0;
    sh_hi = plan.r_s;
    ex_lo = plan.r_s;
    ex_hi = rn;
  } else {
    ex_lo = 0;
    ex_hi = plan.r_e;
    sh_lo = plan.r_e;
    sh_hi = rn;
  }

  auto shared = factor_slice(f, sh_lo, sh_hi);
  auto expert = factor_slice(f, ex_lo, ex_hi);
  auto nl = factor_slice(f, 0, rn);

  // Residual components become the frozen base.
  std::vector<double> us(static_cast<size_t>(d) * (m - rn));
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = rn; j < m; ++j)
      us[i * (m - rn) + (j - rn)] = f.u.at({i, j}) * f.s.data()[j];
  auto vrest = slice(f.v, 0, k, rn, m);
  auto w0 = matmul(Tensor<double>::from({d, m - rn}, std::move(us)), vrest, false, true);

  init.w0 = w0.template cast<T>();
  init.shared = cast_pair<T>(shared);
  for (int i = 0; i < num_languages; ++i) init.experts.push_back(cast_pair<T>(expert));
  init.nl = cast_pair<T>(nl);
  return init;
}

template <class T>
Tensor<T> merge(const MoleLinearInit<T>& init, const LanguageLabel& path) {
  if (path.is_pad()) throw ValidationError("merge: PAD is not a mergeable path");
  if (path.is_pl() && (path.lang < 0 || path.lang >= static_cast<int>(init.experts.size())))
    throw ValidationError(fmt::format("merge: unknown language index {} (have {} experts)",
                                      path.lang, init.experts.size()));
  auto out = init.w0.detached();
  auto add_pair = [&](const AdapterPair<T>& p) {
    if (p.rank() == 0) return;
    out = add(out, matmul(p.b, p.a));
  };
  if (path.is_nl()) {
    add_pair(init.nl);
  } else {
    add_pair(init.shared);
    add_pair(init.experts[static_cast<size_t>(path.lang)]);
  }
  return out.detached();
}

template MoleLinearInit<float> split_init<float>(const Tensor<float>&, const SplitPlan&, int,
                                                 Rng*);
template MoleLinearInit<double> split_init<double>(const Tensor<double>&, const SplitPlan&,
                                                   int, Rng*);
template Tensor<float> merge<float>(const MoleLinearInit<float>&, const LanguageLabel&);
template Tensor<double> merge<double>(const MoleLinearInit<double>&, const LanguageLabel&);

}  // namespace mole
