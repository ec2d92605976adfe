// SPDX-License-Identifier: Apache-2.0
//
// Small decoder-only transformer whose feedforward linears are routed
// MoleLinear instances. Attention, norms, and embeddings always belong to the
// frozen base after a split.
#pragma once

#include "json.hpp"

#include "mole/mole_linear.hpp"

namespace mole {

enum class AdapterMode { none, single, mole };
const char* to_string(AdapterMode m);
AdapterMode adapter_mode_from_string(const std::string& s);

struct ModelConfig {
  int layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 512;
  int max_seq_len = 256;
  SplitPlan plan;  // rank plan for mole mode; plan.r_n() is the single-pair rank
  std::vector<std::string> languages;
  AdapterMode adapter_mode = AdapterMode::none;
  // Ablation: natural language handled by an extra expert instead of the NL
  // pair; expert index K routes NL tokens.
  bool nl_as_expert = false;

  LanguageRegistry registry() const { return LanguageRegistry(languages); }
  int num_experts() const {
    return static_cast<int>(languages.size()) + (nl_as_expert ? 1 : 0);
  }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

template <class T>
struct LayerState {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<T> wq, wk, wv, wo;  // d_model x d_model
  MoleLinear<T> ffn_up;      // d_ff x d_model
  MoleLinear<T> ffn_down;    // d_model x d_ff
};

template <class T>
struct ModelState {
  ModelConfig config;
  Tensor<T> tok_embed;  // vocab x d_model, tied to the output projection
  Tensor<T> pos_embed;  // max_seq x d_model
  std::vector<LayerState<T>> layers;
  Tensor<T> final_g, final_b;

  // Fresh trainable model (adapter mode none) for pretraining.
  static ModelState init(const ModelConfig& config, uint64_t seed);

  // Splits every FFN linear per the plan and freezes the rest of the base.
  void apply_split(const SplitPlan& plan, uint64_t seed);
  // Frozen base plus one standard-init pair of the given rank per FFN linear.
  void to_single_adapter(int64_t rank, uint64_t seed);
  // All parameters trainable, no adapters.
  void set_fully_trainable();

  std::vector<Tensor<T>> trainable_params() const;
  std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const;
  int64_t num_trainable() const;
};

enum class ForwardMode { train, infer };

// Causal forward over B = ids.size()/seq_len stacked sequences of uniform
// (padded) length seq_len. Returns (B*seq_len) x vocab logits. infer mode
// builds no graph.
template <class T>
Tensor<T> model_forward(const ModelState<T>& m, const std::vector<int64_t>& ids,
                        const LabelSequence& labels, int64_t seq_len,
                        ForwardMode mode = ForwardMode::train);

// NL labels route to the extra expert under the nl-as-expert ablation; PAD
// stays PAD. Identity otherwise.
LanguageLabel effective_label(const ModelConfig& config, const LanguageLabel& label);

}  // namespace mole
