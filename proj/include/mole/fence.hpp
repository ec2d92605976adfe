// SPDX-License-Identifier: Apache-2.0
//
// Fenced-code-block parsing and per-character language labeling.
// Grammar: a fence line is "```" at line start, optionally followed
// immediately by a language word; the closing fence is a line-initial "```"
// alone. Indented or inline backticks are not fences.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mole/routing.hpp"

namespace mole {

struct LabeledSpan {
  size_t begin = 0;
  size_t end = 0;  // half-open byte range
  LanguageLabel label;
  bool operator==(const LabeledSpan&) const = default;
};

// Structural view of one fenced block, independent of the registry.
struct CodeBlock {
  size_t open_begin = 0;
  size_t open_end = 0;    // fence-open line including its newline
  size_t body_begin = 0;
  size_t body_end = 0;    // interior (strictly between the fence lines)
  size_t close_begin = 0;
  size_t close_end = 0;   // the "```" marker; empty range when unclosed
  std::string lang_word;  // may be empty
  bool closed = false;
};

struct LabeledText {
  std::string text;
  std::vector<LabeledSpan> spans;  // partition of [0, text.size())
  std::vector<CodeBlock> blocks;
  // Byte ranges where the loss applies (the answer region); filled by the
  // corpus renderer, not by label_spans.
  std::vector<std::pair<size_t, size_t>> target_spans;
  std::vector<std::string> diagnostics;

  bool in_target(size_t pos) const {
    for (auto& [b, e] : target_spans)
      if (pos >= b && pos < e) return true;
    return false;
  }
};

// Registry-independent structural parse.
std::vector<CodeBlock> parse_blocks(const std::string& text);

// Labels every byte: block interiors plus the closing fence marker carry the
// block's language; fence-open lines and everything else are NL. Unknown
// fence languages fall back per the registry policy (default: NL plus a
// diagnostic). Unclosed fences label to end-of-text and record a diagnostic.
LabeledText label_spans(const std::string& text, const LanguageRegistry& registry);

// Fraction of bytes lying strictly inside code-block interiors, over the
// total bytes of question + answer.
double code_char_fraction(const std::string& question, const std::string& answer);

}  // namespace mole
