// SPDX-License-Identifier: Apache-2.0
//
// Corpus ingestion and the synthetic multilingual generator. Dataset files
// are JSON lines, one {"question": ..., "answer": ...} object per line.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mole/bpe.hpp"
#include "mole/fence.hpp"
#include "mole/routing.hpp"

namespace mole {

using nlohmann::json;

struct RawSample {
  std::string question;
  std::string answer;
};

enum class Task { summarize, synthesize, translate };
const char* to_string(Task t);
std::optional<Task> task_from_string(const std::string& s);
// Synthetic questions carry an unambiguous leading verb per task.
std::optional<Task> infer_task(const std::string& question);

struct TokenizedSample {
  std::vector<int> ids;
  LabelSequence labels;
  std::vector<uint8_t> target_mask;
  int straddle_count = 0;
};

// ---- synthetic corpus ----

struct SynthSpec {
  enum class Kind { instruct, pretrain_docs };
  Kind kind = Kind::instruct;
  std::vector<std::string> languages;
  std::vector<Task> tasks;             // instruct only
  int samples_per_task_language = 0;   // instruct only
  int documents = 0;                   // pretrain_docs only
  // Fraction of pretrain documents rendered in instruct question/answer form
  // so the base model has seen the prompt format.
  double instruct_mix = 0.15;

  static SynthSpec from_json(const json& j);
  json to_json() const;
  void validate() const;
};

// Deterministic under (spec, seed). Every instruct sample's answer embeds
// exactly one fenced block (translation adds a source block in the question)
// and passes code_char_fraction >= 1/3 by construction.
std::vector<RawSample> synth_corpus(const SynthSpec& spec, uint64_t seed);

// ---- filtering / splitting ----

struct LanguageStat {
  int64_t samples = 0;
  int64_t code_chars = 0;
};

struct FilterStats {
  std::map<std::string, LanguageStat> per_language;  // by dominant language
  int64_t total_in = 0;
  int64_t kept = 0;
  int64_t dropped_low_fraction = 0;
  int64_t dropped_unregistered = 0;
  int64_t malformed = 0;
  json to_json() const;
};

struct FilterResult {
  std::vector<RawSample> kept;
  FilterStats stats;
};

// Keeps samples whose interior-code fraction is >= threshold and whose
// blocks all carry registered languages.
FilterResult filter_corpus(const std::vector<RawSample>& samples,
                           const LanguageRegistry& registry, double threshold = 1.0 / 3.0);

// Language owning the most interior characters; ties break by registry order.
std::optional<int> dominant_language(const RawSample& sample,
                                     const LanguageRegistry& registry);

// Stratified per-language split; each language contributes
// ceil(n * valid_fraction) validation samples.
std::pair<std::vector<RawSample>, std::vector<RawSample>> split_train_valid(
    const std::vector<RawSample>& samples, const LanguageRegistry& registry,
    double valid_fraction, uint64_t seed);

// ---- rendering / tokenization ----

// Training text is question + "\n" + answer (answer alone when the question
// is empty); the answer region becomes the target span.
LabeledText render_training_text(const RawSample& sample, const LanguageRegistry& registry);

// Tokens inherit the label of their first byte's span; tokens straddling a
// span boundary keep the left label and bump the straddle counter. The mask
// is true exactly for tokens whose first byte lies in a target span (plus
// EOS when the text ends inside one).
TokenizedSample tokenize_and_align(const LabeledText& lt, const Vocabulary& vocab);

// ---- I/O ----

std::vector<RawSample> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<RawSample>& samples);

}  // namespace mole
