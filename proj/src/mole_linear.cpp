// SPDX-License-Identifier: Apache-2.0
#include "mole/mole_linear.hpp"

#include <fmt/format.h>

namespace mole {

template <class T>
MoleLinear<T> MoleLinear<T>::from_init(MoleLinearInit<T> init) {
  MoleLinear<T> lin;
  lin.w0 = std::move(init.w0);
  lin.w0.set_requires_grad(false);
  lin.shared = std::move(init.shared);
  lin.experts = std::move(init.experts);
  lin.nl = std::move(init.nl);
  lin.mode = RoutingMode::by_label;
  auto thaw = [](AdapterPair<T>& p) {
    if (p.rank() == 0) return;
    p.b.set_requires_grad(true);
    p.a.set_requires_grad(true);
  };
  thaw(lin.shared);
  for (auto& e : lin.experts) thaw(e);
  thaw(lin.nl);
  return lin;
}

template <class T>
MoleLinear<T> MoleLinear<T>::plain(Tensor<T> w, bool trainable) {
  MoleLinear<T> lin;
  lin.w0 = std::move(w);
  lin.w0.set_requires_grad(trainable);
  lin.mode = RoutingMode::none;
  return lin;
}

template <class T>
MoleLinear<T> MoleLinear<T>::single_adapter(Tensor<T> w, int64_t rank, Rng& rng) {
  MoleLinear<T> lin;
  const int64_t d = w.rows(), k = w.cols();
  lin.w0 = std::move(w);
  lin.w0.set_requires_grad(false);
  lin.shared = {Tensor<T>::gaussian({d, rank}, rng, T(0.02)), Tensor<T>::zeros({rank, k})};
  lin.shared.b.set_requires_grad(true);
  lin.shared.a.set_requires_grad(true);
  lin.mode = RoutingMode::single;
  return lin;
}

template <class T>
std::vector<Tensor<T>> MoleLinear<T>::trainable_params() const {
  std::vector<Tensor<T>> out;
  auto take = [&](const AdapterPair<T>& p) {
    if (p.rank() == 0) return;
    out.push_back(p.b);
    out.push_back(p.a);
  };
  if (mode == RoutingMode::none) {
    if (w0.requires_grad()) out.push_back(w0);
    return out;
  }
  take(shared);
  for (const auto& e : experts) take(e);
  take(nl);
  return out;
}

namespace {

// x_g . W0^T (+ x_g . A^T . B^T per active pair)
template <class T>
Tensor<T> path_forward(const MoleLinear<T>& lin, const Tensor<T>& xg,
                       const std::vector<const AdapterPair<T>*>& pairs) {
  auto y = matmul(xg, lin.w0, false, true);
  for (const auto* p : pairs) {
    if (p->rank() == 0) continue;
    y = add(y, matmul(matmul(xg, p->a, false, true), p->b, false, true));
  }
  return y;
}

}  // namespace

template <class T>
Tensor<T> routed_forward(const MoleLinear<T>& lin, const Tensor<T>& x,
                         const LabelSequence& labels) {
  if (x.shape().size() != 2 || x.cols() != lin.k())
    throw ValidationError(fmt::format("routed_forward: input {} does not match layer k={}",
                                      shape_str(x.shape()), lin.k()));
  const int64_t rows = x.rows();
  if (static_cast<int64_t>(labels.size()) != rows)
    throw ValidationError(fmt::format("routed_forward: {} labels for {} rows",
                                      labels.size(), rows));

  // Group row indices per path.
  std::vector<int64_t> nl_rows, plain_rows;
  std::vector<std::vector<int64_t>> expert_rows(lin.experts.size());
  for (int64_t t = 0; t < rows; ++t) {
    const auto& lab = labels[static_cast<size_t>(t)];
    if (lab.is_pad()) continue;
    switch (lin.mode) {
      case RoutingMode::none:
      case RoutingMode::single:
        plain_rows.push_back(t);
        break;
      case RoutingMode::by_label:
        if (lab.is_nl()) {
          nl_rows.push_back(t);
        } else {
          if (lab.lang < 0 || lab.lang >= lin.num_experts())
            throw ValidationError(
                fmt::format("routed_forward: unknown language index {} (have {} experts)",
                            lab.lang, lin.num_experts()));
          expert_rows[static_cast<size_t>(lab.lang)].push_back(t);
        }
        break;
    }
  }

  Tensor<T> out;  // assembled by summing scattered per-path results
  auto emit = [&](const std::vector<int64_t>& idx,
                  const std::vector<const AdapterPair<T>*>& pairs) {
    if (idx.empty()) return;
    auto group = scatter_rows(path_forward(lin, gather_rows(x, idx), pairs), idx, rows);
    out = out.defined() ? add(out, group) : group;
  };

  switch (lin.mode) {
    case RoutingMode::none:
      emit(plain_rows, {});
      break;
    case RoutingMode::single:
      emit(plain_rows, {&lin.shared});
      break;
    case RoutingMode::by_label:
      emit(nl_rows, {&lin.nl});
      for (size_t e = 0; e < expert_rows.size(); ++e)
        emit(expert_rows[e], {&lin.shared, &lin.experts[e]});
      break;
  }
  if (!out.defined()) return Tensor<T>::zeros({rows, lin.d()});  // all PAD
  return out;
}

std::set<std::string> active_adapters(const LanguageLabel& label) {
  if (label.is_pad()) return {};
  if (label.is_nl()) return {"nl"};
  return {"shared", fmt::format("expert({})", label.lang)};
}

int64_t trainable_parameter_count(int64_t d, int64_t k, const SplitPlan& plan,
                                  int num_languages) {
  if (num_languages < 0) throw ValidationError("trainable_parameter_count: negative K");
  return (d + k) * (plan.r_s + num_languages * plan.r_e + plan.r_n());
}

template struct MoleLinear<float>;
template struct MoleLinear<double>;
template Tensor<float> routed_forward<float>(const MoleLinear<float>&, const Tensor<float>&,
                                             const LabelSequence&);
template Tensor<double> routed_forward<double>(const MoleLinear<double>&,
                                               const Tensor<double>&, const LabelSequence&);

}  // namespace mole
