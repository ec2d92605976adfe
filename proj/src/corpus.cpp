// SPDX-License-Identifier: Apache-2.0
#include "mole/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "mole/toylang.hpp"

namespace mole {

const char* to_string(Task t) {
  switch (t) {
    case Task::summarize: return "summarize";
    case Task::synthesize: return "synthesize";
    case Task::translate: return "translate";
  }
  return "?";
}

std::optional<Task> task_from_string(const std::string& s) {
  if (s == "summarize") return Task::summarize;
  if (s == "synthesize") return Task::synthesize;
  if (s == "translate") return Task::translate;
  return std::nullopt;
}

std::optional<Task> infer_task(const std::string& question) {
  if (question.starts_with("Write") || question.starts_with("Define"))
    return Task::synthesize;
  if (question.starts_with("Explain")) return Task::summarize;
  if (question.starts_with("Translate")) return Task::translate;
  return std::nullopt;
}

// ---- SynthSpec ----

SynthSpec SynthSpec::from_json(const json& j) {
  SynthSpec spec;
  const std::string kind = j.value("kind", "instruct");
  if (kind == "instruct")
    spec.kind = Kind::instruct;
  else if (kind == "pretrain_docs")
    spec.kind = Kind::pretrain_docs;
  else
    throw ValidationError(fmt::format("synth spec: unknown kind '{}'", kind));
  if (!j.contains("languages") || !j["languages"].is_array())
    throw ValidationError("synth spec: 'languages' array required");
  for (const auto& l : j["languages"]) spec.languages.push_back(l.get<std::string>());
  if (spec.kind == Kind::instruct) {
    if (j.contains("tasks"))
      for (const auto& t : j["tasks"]) {
        auto task = task_from_string(t.get<std::string>());
        if (!task) throw ValidationError(fmt::format("synth spec: unknown task '{}'",
                                                     t.get<std::string>()));
        spec.tasks.push_back(*task);
      }
    else
      spec.tasks = {Task::summarize, Task::synthesize, Task::translate};
    spec.samples_per_task_language = j.value("samples_per_task_language", 100);
  } else {
    spec.documents = j.value("documents", 1000);
    spec.instruct_mix = j.value("instruct_mix", 0.15);
  }
  spec.validate();
  return spec;
}

json SynthSpec::to_json() const {
  json j;
  j["kind"] = kind == Kind::instruct ? "instruct" : "pretrain_docs";
  j["languages"] = languages;
  if (kind == Kind::instruct) {
    std::vector<std::string> ts;
    for (auto t : tasks) ts.push_back(to_string(t));
    j["tasks"] = ts;
    j["samples_per_task_language"] = samples_per_task_language;
  } else {
    j["documents"] = documents;
    j["instruct_mix"] = instruct_mix;
  }
  return j;
}

void SynthSpec::validate() const {
  for (const auto& l : languages)
    if (!toy_syntax_from_name(l))
      throw ValidationError(fmt::format("synth spec: unknown language '{}'", l));
  if (kind == Kind::instruct) {
    if (languages.size() < 2)
      throw ValidationError("synth spec: instruct corpora need at least two languages");
    if (samples_per_task_language <= 0)
      throw ValidationError("synth spec: samples_per_task_language must be positive");
    if (tasks.empty()) throw ValidationError("synth spec: no tasks selected");
  } else {
    if (languages.empty()) throw ValidationError("synth spec: no languages selected");
    if (documents <= 0) throw ValidationError("synth spec: documents must be positive");
  }
}

// ---- generator ----

namespace {

struct Concept {
  ExprPtr expr;
  std::string desc;
  size_t arity = 1;
};

const std::vector<std::string> kNames = {"f", "g", "h", "p", "q", "r"};

Concept draw_concept(Rng& rng) {
  const int form = static_cast<int>(rng.below(13));
  const int64_t c = rng.range(2, 9);
  const int64_t d = rng.range(1, 9);
  auto x = expr_var(0);
  auto y = expr_var(1);
  using K = Expr::Kind;
  switch (form) {
    case 0: return {expr_bin(K::add, x, expr_const(d)), fmt::format("x plus {}", d), 1};
    case 1: return {expr_bin(K::sub, x, expr_const(d)), fmt::format("x minus {}", d), 1};
    case 2: return {expr_bin(K::mul, x, expr_const(c)), fmt::format("x times {}", c), 1};
    case 3:
      return {expr_bin(K::add, expr_bin(K::mul, x, expr_const(c)), expr_const(d)),
              fmt::format("x times {} plus {}", c, d), 1};
    case 4:
      return {expr_bin(K::sub, expr_bin(K::mul, x, expr_const(c)), expr_const(d)),
              fmt::format("x times {} minus {}", c, d), 1};
    case 5: return {expr_bin(K::mul, x, x), "x times x", 1};
    case 6:
      return {expr_bin(K::add, expr_bin(K::mul, x, x), expr_const(d)),
              fmt::format("x times x plus {}", d), 1};
    case 7: return {expr_bin(K::add, x, y), "x plus y", 2};
    case 8: return {expr_bin(K::sub, x, y), "x minus y", 2};
    case 9: return {expr_bin(K::mul, x, y), "x times y", 2};
    case 10:
      return {expr_bin(K::add, expr_bin(K::mul, x, expr_const(c)), y),
              fmt::format("x times {} plus y", c), 2};
    case 11:
      return {expr_bin(K::add, x, expr_bin(K::mul, y, expr_const(c))),
              fmt::format("x plus y times {}", c), 2};
    default:
      return {expr_bin(K::mul, expr_bin(K::add, x, y), expr_const(c)),
              fmt::format("{} times the sum of x and y", c), 2};
  }
}

ToyFunction make_function(const Concept& sem, const std::string& name) {
  ToyFunction fn;
  fn.name = name;
  fn.params = sem.arity == 1 ? std::vector<std::string>{"x"}
                                 : std::vector<std::string>{"x", "y"};
  fn.body = sem.expr;
  return fn;
}

std::string fenced(const std::string& lang, const std::string& code) {
  return fmt::format("```{}\n{}```", lang, code);
}

std::string params_sig(const Concept& c) { return c.arity == 1 ? "x" : "x, y"; }

RawSample make_synthesize(Rng& rng, const std::string& lang, ToySyntax syntax) {
  const auto sem = draw_concept(rng);
  const auto fn = make_function(sem, rng.pick(kNames));
  const bool hoist = rng.uniform() < 0.5;
  const std::string block = fenced(lang, render_function(syntax, fn, hoist));

  std::vector<std::string> questions = {
      fmt::format("Write {}({}) = {} in {}.", fn.name, params_sig(sem), sem.desc,
                  lang),
      fmt::format("Define {}({}) = {} in {}.", fn.name, params_sig(sem), sem.desc,
                  lang),
      fmt::format("Write a {} function {}({}) returning {}.", lang, fn.name,
                  params_sig(sem), sem.desc),
  };
  std::string question = questions[rng.below(questions.size())];
  std::string lead = rng.uniform() < 0.35 ? "Here you go:\n" : "";
  std::string coda = rng.uniform() < 0.25 ? "\nThat is all." : "";
  RawSample s{question, lead + block + coda};
  // Guarantee the corpus-level fraction contract by shedding decoration, then
  // falling back to the tersest question.
  if (code_char_fraction(s.question, s.answer) < 1.0 / 3.0) s.answer = lead + block;
  if (code_char_fraction(s.question, s.answer) < 1.0 / 3.0) s.answer = block;
  if (code_char_fraction(s.question, s.answer) < 1.0 / 3.0) s.question = questions[0];
  return s;
}

RawSample make_summarize(Rng& rng, const std::string& lang, ToySyntax syntax) {
  const auto sem = draw_concept(rng);
  const auto fn = make_function(sem, rng.pick(kNames));
  const bool hoist = rng.uniform() < 0.6;
  const std::string q_block = fenced(lang, render_function(syntax, fn, hoist));
  const std::string a_block = fenced(lang, render_function(syntax, fn, false));
  std::string question = rng.uniform() < 0.5
                             ? fmt::format("Explain what this {} function does.\n{}", lang,
                                           q_block)
                             : fmt::format("Explain this {} function.\n{}", lang, q_block);
  std::string answer = fmt::format("It returns {}.\n{}", sem.desc, a_block);
  RawSample s{std::move(question), std::move(answer)};
  if (code_char_fraction(s.question, s.answer) < 1.0 / 3.0)
    throw RuntimeError("synth_corpus: summarize template broke the fraction contract");
  return s;
}

RawSample make_translate(Rng& rng, const std::string& src, ToySyntax src_syntax,
                         const std::string& dst, ToySyntax dst_syntax) {
  const auto sem = draw_concept(rng);
  const auto fn = make_function(sem, rng.pick(kNames));
  const bool hoist = rng.uniform() < 0.5;
  const std::string src_block = fenced(src, render_function(src_syntax, fn, hoist));
  const std::string dst_block = fenced(dst, render_function(dst_syntax, fn, false));
  std::string question = rng.uniform() < 0.5
                             ? fmt::format("Translate this {} function to {}.\n{}", src, dst,
                                           src_block)
                             : fmt::format("Translate to {}.\n{}", dst, src_block);
  std::string answer = rng.uniform() < 0.4
                           ? fmt::format("In {}:\n{}", dst, dst_block)
                           : dst_block;
  RawSample s{std::move(question), std::move(answer)};
  if (code_char_fraction(s.question, s.answer) < 1.0 / 3.0) s.answer = dst_block;
  if (code_char_fraction(s.question, s.answer) < 1.0 / 3.0)
    throw RuntimeError("synth_corpus: translate template broke the fraction contract");
  return s;
}

const std::vector<std::string> kFillers = {
    "Example listing:", "Another function:", "Snippet:", "A small helper:",
    "The next function is defined below.",
};
const std::vector<std::string> kProse = {
    "Small functions keep programs simple.",
    "Arithmetic helpers appear throughout this corpus.",
    "Each helper takes integer arguments and returns an integer.",
    "Parameters are named x and y by convention.",
};

RawSample make_document(Rng& rng, const SynthSpec& spec) {
  const int sections = static_cast<int>(rng.range(1, 2));
  std::string doc;
  for (int s = 0; s < sections; ++s) {
    if (s > 0 && rng.uniform() < 0.3) {
      doc += rng.pick(kProse);
      doc += "\n";
      continue;
    }
    const auto& lang = rng.pick(spec.languages);
    const auto syntax = *toy_syntax_from_name(lang);
    const auto sem = draw_concept(rng);
    const auto fn = make_function(sem, rng.pick(kNames));
    const bool hoist = rng.uniform() < 0.5;
    doc += rng.pick(kFillers);
    doc += "\n";
    doc += fenced(lang, render_function(syntax, fn, hoist));
    doc += "\n";
  }
  return {"", doc};
}

}  // namespace

std::vector<RawSample> synth_corpus(const SynthSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed ^ 0xC0DEBA5Eull);
  std::vector<RawSample> out;

  if (spec.kind == SynthSpec::Kind::pretrain_docs) {
    const int n_instruct = static_cast<int>(std::lround(spec.documents * spec.instruct_mix));
    SynthSpec inner = spec;
    inner.kind = SynthSpec::Kind::instruct;
    inner.tasks = {Task::summarize, Task::synthesize, Task::translate};
    for (int i = 0; i < spec.documents - n_instruct; ++i)
      out.push_back(make_document(rng, spec));
    // A slice of instruct-formatted samples so the prompt format is familiar
    // to the base model.
    for (int i = 0; i < n_instruct; ++i) {
      const auto& lang = rng.pick(spec.languages);
      const auto syntax = *toy_syntax_from_name(lang);
      switch (rng.below(3)) {
        case 0: out.push_back(make_synthesize(rng, lang, syntax)); break;
        case 1: out.push_back(make_summarize(rng, lang, syntax)); break;
        default: {
          const auto& dst = rng.pick(spec.languages);
          if (dst == lang) {
            out.push_back(make_synthesize(rng, lang, syntax));
          } else {
            out.push_back(
                make_translate(rng, lang, syntax, dst, *toy_syntax_from_name(dst)));
          }
        }
      }
    }
    return out;
  }

  const int n = spec.samples_per_task_language;
  for (Task task : spec.tasks) {
    switch (task) {
      case Task::summarize:
      case Task::synthesize:
        for (const auto& lang : spec.languages) {
          const auto syntax = *toy_syntax_from_name(lang);
          for (int i = 0; i < n; ++i)
            out.push_back(task == Task::summarize ? make_summarize(rng, lang, syntax)
                                                  : make_synthesize(rng, lang, syntax));
        }
        break;
      case Task::translate: {
        // Keep the task's total comparable to the other tasks:
        // n * L samples spread over the L*(L-1) ordered pairs.
        const int l = static_cast<int>(spec.languages.size());
        const int per_pair = std::max(1, n / (l - 1));
        for (const auto& src : spec.languages)
          for (const auto& dst : spec.languages) {
            if (src == dst) continue;
            for (int i = 0; i < per_pair; ++i)
              out.push_back(make_translate(rng, src, *toy_syntax_from_name(src), dst,
                                           *toy_syntax_from_name(dst)));
          }
        break;
      }
    }
  }
  return out;
}

// ---- filtering / splitting ----

std::optional<int> dominant_language(const RawSample& sample,
                                     const LanguageRegistry& registry) {
  std::vector<int64_t> chars(static_cast<size_t>(registry.size()), 0);
  bool any = false;
  for (const auto* part : {&sample.question, &sample.answer})
    for (const auto& b : parse_blocks(*part)) {
      auto k = registry.find(b.lang_word);
      if (!k) continue;
      chars[static_cast<size_t>(*k)] += static_cast<int64_t>(b.body_end - b.body_begin);
      any = true;
    }
  if (!any) return std::nullopt;
  int best = 0;
  for (int i = 1; i < registry.size(); ++i)
    if (chars[static_cast<size_t>(i)] > chars[static_cast<size_t>(best)]) best = i;
  return best;
}

FilterResult filter_corpus(const std::vector<RawSample>& samples,
                           const LanguageRegistry& registry, double threshold) {
  FilterResult out;
  out.stats.total_in = static_cast<int64_t>(samples.size());
  for (const auto& s : samples) {
    if (s.answer.empty()) {
      ++out.stats.malformed;
      continue;
    }
    bool all_registered = true;
    int64_t code_chars = 0;
    for (const auto* part : {&s.question, &s.answer})
      for (const auto& b : parse_blocks(*part)) {
        if (!registry.find(b.lang_word)) all_registered = false;
        code_chars += static_cast<int64_t>(b.body_end - b.body_begin);
      }
    if (!all_registered) {
      ++out.stats.dropped_unregistered;
      continue;
    }
    if (code_char_fraction(s.question, s.answer) < threshold) {
      ++out.stats.dropped_low_fraction;
      continue;
    }
    auto dom = dominant_language(s, registry);
    auto& stat = out.stats.per_language[dom ? registry.name(*dom) : "(none)"];
    ++stat.samples;
    stat.code_chars += code_chars;
    out.kept.push_back(s);
    ++out.stats.kept;
  }
  return out;
}

json FilterStats::to_json() const {
  json per;
  for (const auto& [lang, stat] : per_language)
    per[lang] = {{"samples", stat.samples}, {"code_chars", stat.code_chars}};
  return json{{"total_in", total_in},
              {"kept", kept},
              {"dropped_low_fraction", dropped_low_fraction},
              {"dropped_unregistered", dropped_unregistered},
              {"malformed", malformed},
              {"per_language", per}};
}

std::pair<std::vector<RawSample>, std::vector<RawSample>> split_train_valid(
    const std::vector<RawSample>& samples, const LanguageRegistry& registry,
    double valid_fraction, uint64_t seed) {
  if (valid_fraction < 0.0 || valid_fraction >= 1.0)
    throw ValidationError("split_train_valid: valid_fraction must be in [0, 1)");
  std::vector<std::vector<size_t>> buckets(static_cast<size_t>(registry.size()) + 1);
  for (size_t i = 0; i < samples.size(); ++i) {
    auto dom = dominant_language(samples[i], registry);
    buckets[dom ? static_cast<size_t>(*dom) : buckets.size() - 1].push_back(i);
  }
  Rng rng(seed ^ 0x5EEDD1CEull);
  std::vector<bool> is_valid(samples.size(), false);
  for (size_t b = 0; b + 1 < buckets.size(); ++b) {
    auto& idx = buckets[b];
    rng.shuffle(idx);
    if (valid_fraction == 0.0 || idx.empty()) continue;
    const size_t take = static_cast<size_t>(
        std::ceil(static_cast<double>(idx.size()) * valid_fraction));
    for (size_t i = 0; i < take && i < idx.size(); ++i) is_valid[idx[i]] = true;
  }
  std::pair<std::vector<RawSample>, std::vector<RawSample>> out;
  for (size_t i = 0; i < samples.size(); ++i)
    (is_valid[i] ? out.second : out.first).push_back(samples[i]);
  return out;
}

// ---- rendering / tokenization ----

LabeledText render_training_text(const RawSample& sample, const LanguageRegistry& registry) {
  std::string text;
  size_t answer_begin = 0;
  if (sample.question.empty()) {
    text = sample.answer;
  } else {
    text = sample.question + "\n" + sample.answer;
    answer_begin = sample.question.size() + 1;
  }
  auto lt = label_spans(text, registry);
  if (!text.empty()) lt.target_spans.push_back({answer_begin, text.size()});
  return lt;
}

TokenizedSample tokenize_and_align(const LabeledText& lt, const Vocabulary& vocab) {
  TokenizedSample out;
  auto pieces = vocab.encode_with_ranges(lt.text);
  out.ids.reserve(pieces.size() + 2);
  out.labels.reserve(pieces.size() + 2);
  out.target_mask.reserve(pieces.size() + 2);

  auto span_at = [&](size_t pos) -> const LabeledSpan& {
    for (const auto& s : lt.spans)
      if (pos >= s.begin && pos < s.end) return s;
    throw RuntimeError(fmt::format("tokenize_and_align: byte {} outside span partition", pos));
  };

  out.ids.push_back(Vocabulary::kBos);
  out.labels.push_back(LanguageLabel::NL());
  out.target_mask.push_back(0);

  for (const auto& p : pieces) {
    const auto& first_span = span_at(p.begin);
    if (p.end > first_span.end) ++out.straddle_count;  // crosses a boundary
    out.ids.push_back(p.id);
    out.labels.push_back(first_span.label);
    out.target_mask.push_back(lt.in_target(p.begin) ? 1 : 0);
  }

  out.ids.push_back(Vocabulary::kEos);
  out.labels.push_back(LanguageLabel::NL());
  out.target_mask.push_back(!lt.text.empty() && lt.in_target(lt.text.size() - 1) ? 1 : 0);
  return out;
}

// ---- I/O ----

std::vector<RawSample> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open '{}'", path));
  std::vector<RawSample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("question") || !j.contains("answer"))
      throw ValidationError(fmt::format("{}:{}: not a question/answer record", path, line_no));
    out.push_back({j["question"].get<std::string>(), j["answer"].get<std::string>()});
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<RawSample>& samples) {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path));
  for (const auto& s : samples) {
    json j{{"question", s.question}, {"answer", s.answer}};
    out << j.dump() << "\n";
  }
  if (!out) throw IoError(fmt::format("failed while writing '{}'", path));
}

}  // namespace mole
