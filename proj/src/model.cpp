// SPDX-License-Identifier: Apache-2.0
#include "mole/model.hpp"

#include <fmt/format.h>

namespace mole {

const char* to_string(AdapterMode m) {
  switch (m) {
    case AdapterMode::none: return "none";
    case AdapterMode::single: return "single";
    case AdapterMode::mole: return "mole";
  }
  return "?";
}

AdapterMode adapter_mode_from_string(const std::string& s) {
  if (s == "none") return AdapterMode::none;
  if (s == "single") return AdapterMode::single;
  if (s == "mole") return AdapterMode::mole;
  throw ValidationError(fmt::format("unknown adapter mode '{}'", s));
}

void ModelConfig::validate() const {
  if (layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0 ||
      max_seq_len <= 0)
    throw ValidationError("model config: dimensions must be positive");
  if (d_model % n_heads != 0)
    throw ValidationError(
        fmt::format("model config: d_model {} not divisible by n_heads {}", d_model, n_heads));
  if (languages.empty()) throw ValidationError("model config: no languages registered");
  if (plan.r_n() > std::min(d_model, d_ff))
    throw ValidationError(fmt::format("model config: rank plan r_n={} exceeds min(d_model, d_ff)={}",
                                      plan.r_n(), std::min(d_model, d_ff)));
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"layers", layers},
                        {"d_model", d_model},
                        {"n_heads", n_heads},
                        {"d_ff", d_ff},
                        {"vocab_size", vocab_size},
                        {"max_seq_len", max_seq_len},
                        {"rank_shared", plan.r_s},
                        {"rank_expert", plan.r_e},
                        {"split_order", to_string(plan.order)},
                        {"init_scheme", to_string(plan.scheme)},
                        {"languages", languages},
                        {"adapter_mode", to_string(adapter_mode)},
                        {"nl_as_expert", nl_as_expert}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.plan.r_s = j.at("rank_shared").get<int64_t>();
  c.plan.r_e = j.at("rank_expert").get<int64_t>();
  c.plan.order = split_order_from_string(j.value("split_order", "shared-first"));
  c.plan.scheme = init_scheme_from_string(j.value("init_scheme", "pissa"));
  for (const auto& l : j.at("languages")) c.languages.push_back(l.get<std::string>());
  c.adapter_mode = adapter_mode_from_string(j.value("adapter_mode", "none"));
  c.nl_as_expert = j.value("nl_as_expert", false);
  c.validate();
  return c;
}

LanguageLabel effective_label(const ModelConfig& config, const LanguageLabel& label) {
  if (config.nl_as_expert && label.is_nl())
    return LanguageLabel::PL(static_cast<int>(config.languages.size()));
  return label;
}

template <class T>
ModelState<T> ModelState<T>::init(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed ^ 0x4D4F44454Cull);
  ModelState<T> m;
  m.config = config;
  const T std = T(0.02);
  const int64_t d = config.d_model, ff = config.d_ff;
  m.tok_embed = Tensor<T>::gaussian({config.vocab_size, d}, rng, std).set_requires_grad(true);
  m.pos_embed = Tensor<T>::gaussian({config.max_seq_len, d}, rng, std).set_requires_grad(true);
  for (int l = 0; l < config.layers; ++l) {
    LayerState<T> layer;
    layer.ln1_g = Tensor<T>::full({d}, T(1)).set_requires_grad(true);
    layer.ln1_b = Tensor<T>::zeros({d}).set_requires_grad(true);
    layer.ln2_g = Tensor<T>::full({d}, T(1)).set_requires_grad(true);
    layer.ln2_b = Tensor<T>::zeros({d}).set_requires_grad(true);
    layer.wq = Tensor<T>::gaussian({d, d}, rng, std).set_requires_grad(true);
    layer.wk = Tensor<T>::gaussian({d, d}, rng, std).set_requires_grad(true);
    layer.wv = Tensor<T>::gaussian({d, d}, rng, std).set_requires_grad(true);
    layer.wo = Tensor<T>::gaussian({d, d}, rng, std).set_requires_grad(true);
    layer.ffn_up = MoleLinear<T>::plain(Tensor<T>::gaussian({ff, d}, rng, std), true);
    layer.ffn_down = MoleLinear<T>::plain(Tensor<T>::gaussian({d, ff}, rng, std), true);
    m.layers.push_back(std::move(layer));
  }
  m.final_g = Tensor<T>::full({d}, T(1)).set_requires_grad(true);
  m.final_b = Tensor<T>::zeros({d}).set_requires_grad(true);
  m.config.adapter_mode = AdapterMode::none;
  return m;
}

namespace {

template <class T>
void freeze_base_common(ModelState<T>& m) {
  m.tok_embed.set_requires_grad(false);
  m.pos_embed.set_requires_grad(false);
  for (auto& l : m.layers) {
    for (auto* t : {&l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b, &l.wq, &l.wk, &l.wv, &l.wo})
      t->set_requires_grad(false);
  }
  m.final_g.set_requires_grad(false);
  m.final_b.set_requires_grad(false);
}

}  // namespace

template <class T>
void ModelState<T>::apply_split(const SplitPlan& plan, uint64_t seed) {
  plan.validate(config.d_model, config.d_ff);
  Rng rng(seed ^ 0x53504C4954ull);
  const int experts = config.num_experts();
  for (auto& l : layers) {
    l.ffn_up = MoleLinear<T>::from_init(
        split_init(l.ffn_up.w0.detached(), plan, experts, &rng));
    l.ffn_down = MoleLinear<T>::from_init(
        split_init(l.ffn_down.w0.detached(), plan, experts, &rng));
  }
  freeze_base_common(*this);
  config.plan = plan;
  config.adapter_mode = AdapterMode::mole;
}

template <class T>
void ModelState<T>::to_single_adapter(int64_t rank, uint64_t seed) {
  Rng rng(seed ^ 0x414C4Cull);
  for (auto& l : layers) {
    l.ffn_up = MoleLinear<T>::single_adapter(l.ffn_up.w0.detached(), rank, rng);
    l.ffn_down = MoleLinear<T>::single_adapter(l.ffn_down.w0.detached(), rank, rng);
  }
  freeze_base_common(*this);
  config.adapter_mode = AdapterMode::single;
}

template <class T>
void ModelState<T>::set_fully_trainable() {
  tok_embed.set_requires_grad(true);
  pos_embed.set_requires_grad(true);
  for (auto& l : layers) {
    for (auto* t : {&l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b, &l.wq, &l.wk, &l.wv, &l.wo})
      t->set_requires_grad(true);
    if (l.ffn_up.mode != RoutingMode::none || l.ffn_down.mode != RoutingMode::none)
      throw ValidationError("set_fully_trainable: model still carries adapters");
    l.ffn_up.w0.set_requires_grad(true);
    l.ffn_down.w0.set_requires_grad(true);
  }
  final_g.set_requires_grad(true);
  final_b.set_requires_grad(true);
  config.adapter_mode = AdapterMode::none;
}

template <class T>
std::vector<Tensor<T>> ModelState<T>::trainable_params() const {
  std::vector<Tensor<T>> out;
  auto maybe = [&](const Tensor<T>& t) {
    if (t.defined() && t.requires_grad()) out.push_back(t);
  };
  maybe(tok_embed);
  maybe(pos_embed);
  for (const auto& l : layers) {
    for (const auto* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b})
      maybe(*t);
    for (const auto& p : l.ffn_up.trainable_params()) out.push_back(p);
    for (const auto& p : l.ffn_down.trainable_params()) out.push_back(p);
  }
  maybe(final_g);
  maybe(final_b);
  return out;
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> ModelState<T>::named_tensors() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("base/tok_embed", tok_embed);
  out.emplace_back("base/pos_embed", pos_embed);
  auto expert_name = [&](int e) {
    if (e < static_cast<int>(config.languages.size()))
      return config.languages[static_cast<size_t>(e)];
    return std::string("nl");  // nl-as-expert extra slot
  };
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    auto base = [&](const char* leaf) { return fmt::format("base/layers/{}/{}", i, leaf); };
    out.emplace_back(base("ln1/g"), l.ln1_g);
    out.emplace_back(base("ln1/b"), l.ln1_b);
    out.emplace_back(base("attn/wq"), l.wq);
    out.emplace_back(base("attn/wk"), l.wk);
    out.emplace_back(base("attn/wv"), l.wv);
    out.emplace_back(base("attn/wo"), l.wo);
    out.emplace_back(base("ln2/g"), l.ln2_g);
    out.emplace_back(base("ln2/b"), l.ln2_b);
    for (const auto& [which, lin] :
         {std::pair{"ffn_up", &l.ffn_up}, std::pair{"ffn_down", &l.ffn_down}}) {
      out.emplace_back(fmt::format("base/layers/{}/{}/w0", i, which), lin->w0);
      if (lin->shared.rank() > 0) {
        out.emplace_back(fmt::format("shared/layers/{}/{}/B", i, which), lin->shared.b);
        out.emplace_back(fmt::format("shared/layers/{}/{}/A", i, which), lin->shared.a);
      }
      for (int e = 0; e < lin->num_experts(); ++e) {
        if (lin->experts[static_cast<size_t>(e)].rank() == 0) continue;
        out.emplace_back(fmt::format("expert/{}/layers/{}/{}/B", expert_name(e), i, which),
                         lin->experts[static_cast<size_t>(e)].b);
        out.emplace_back(fmt::format("expert/{}/layers/{}/{}/A", expert_name(e), i, which),
                         lin->experts[static_cast<size_t>(e)].a);
      }
      if (lin->nl.rank() > 0) {
        out.emplace_back(fmt::format("nl/layers/{}/{}/B", i, which), lin->nl.b);
        out.emplace_back(fmt::format("nl/layers/{}/{}/A", i, which), lin->nl.a);
      }
    }
  }
  out.emplace_back("base/final_ln/g", final_g);
  out.emplace_back("base/final_ln/b", final_b);
  return out;
}

template <class T>
int64_t ModelState<T>::num_trainable() const {
  int64_t n = 0;
  for (const auto& p : trainable_params()) n += p.numel();
  return n;
}

template <class T>
Tensor<T> model_forward(const ModelState<T>& m, const std::vector<int64_t>& ids,
                        const LabelSequence& labels, int64_t seq_len, ForwardMode mode) {
  const auto& cfg = m.config;
  const int64_t rows = static_cast<int64_t>(ids.size());
  if (rows == 0 || seq_len <= 0 || rows % seq_len != 0)
    throw ValidationError(fmt::format("model_forward: {} rows not divisible by seq_len {}",
                                      rows, seq_len));
  if (seq_len > cfg.max_seq_len)
    throw ValidationError(fmt::format("model_forward: sequence length {} exceeds max {}",
                                      seq_len, cfg.max_seq_len));
  if (labels.size() != ids.size())
    throw ValidationError(fmt::format("model_forward: {} labels for {} ids", labels.size(),
                                      ids.size()));

  std::optional<NoGradGuard> guard;
  if (mode == ForwardMode::infer) guard.emplace();

  LabelSequence routed(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) routed[i] = effective_label(cfg, labels[i]);

  std::vector<int64_t> pos_ids(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) pos_ids[static_cast<size_t>(r)] = r % seq_len;

  auto h = add(gather_rows(m.tok_embed, ids), gather_rows(m.pos_embed, pos_ids));
  for (const auto& l : m.layers) {
    auto a = layer_norm(h, l.ln1_g, l.ln1_b);
    auto q = matmul(a, l.wq, false, true);
    auto k = matmul(a, l.wk, false, true);
    auto v = matmul(a, l.wv, false, true);
    auto attn = causal_attention(q, k, v, cfg.n_heads, seq_len);
    h = add(h, matmul(attn, l.wo, false, true));
    auto b = layer_norm(h, l.ln2_g, l.ln2_b);
    auto f = routed_forward(l.ffn_down, gelu(routed_forward(l.ffn_up, b, routed)), routed);
    h = add(h, f);
  }
  auto hn = layer_norm(h, m.final_g, m.final_b);
  return matmul(hn, m.tok_embed, false, true);  // tied output projection
}

template struct ModelState<float>;
template struct ModelState<double>;
template Tensor<float> model_forward<float>(const ModelState<float>&,
                                            const std::vector<int64_t>&, const LabelSequence&,
                                            int64_t, ForwardMode);
template Tensor<double> model_forward<double>(const ModelState<double>&,
                                              const std::vector<int64_t>&,
                                              const LabelSequence&, int64_t, ForwardMode);

}  // namespace mole
