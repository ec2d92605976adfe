// SPDX-License-Identifier: Apache-2.0
#include "mole/fence.hpp"

#include <fmt/format.h>

namespace mole {

namespace {

bool is_lang_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
         c == '_' || c == '+' || c == '-' || c == '#' || c == '.';
}

bool is_blank(char c) { return c == ' ' || c == '\t' || c == '\r'; }

struct FenceLine {
  bool is_fence = false;
  bool bare = false;  // exactly ``` (plus trailing blanks)
  std::string word;
};

// line = [ls, le) without the trailing newline
FenceLine classify_line(const std::string& text, size_t ls, size_t le) {
  FenceLine out;
  if (le - ls < 3 || text.compare(ls, 3, "```") != 0) return out;
  size_t p = ls + 3;
  while (p < le && is_lang_char(text[p])) out.word.push_back(text[p++]);
  while (p < le && is_blank(text[p])) ++p;
  if (p != le) return {};  // extra junk: not a fence line
  out.is_fence = true;
  out.bare = out.word.empty();
  return out;
}

}  // namespace

std::vector<CodeBlock> parse_blocks(const std::string& text) {
  std::vector<CodeBlock> blocks;
  bool inside = false;
  CodeBlock cur;
  size_t ls = 0;
  const size_t n = text.size();
  while (ls <= n) {
    if (ls == n && n > 0 && text[n - 1] == '\n') break;
    size_t nl = text.find('\n', ls);
    size_t le = (nl == std::string::npos) ? n : nl;             // content end
    size_t line_end = (nl == std::string::npos) ? n : nl + 1;   // incl newline
    auto f = classify_line(text, ls, le);
    if (!inside) {
      if (f.is_fence) {
        cur = CodeBlock{};
        cur.open_begin = ls;
        cur.open_end = line_end;
        cur.body_begin = line_end;
        cur.lang_word = f.word;
        inside = true;
      }
    } else {
      if (f.is_fence && f.bare) {
        cur.body_end = ls;
        cur.close_begin = ls;
        cur.close_end = ls + 3;
        cur.closed = true;
        blocks.push_back(cur);
        inside = false;
      }
    }
    if (nl == std::string::npos) break;
    ls = line_end;
  }
  if (inside) {
    cur.body_end = n;
    cur.close_begin = n;
    cur.close_end = n;
    cur.closed = false;
    blocks.push_back(cur);
  }
  return blocks;
}

LabeledText label_spans(const std::string& text, const LanguageRegistry& registry) {
  LabeledText out;
  out.text = text;
  out.blocks = parse_blocks(text);

  // Resolve each block's label up front.
  std::vector<LanguageLabel> block_labels(out.blocks.size(), LanguageLabel::NL());
  for (size_t i = 0; i < out.blocks.size(); ++i) {
    const auto& b = out.blocks[i];
    if (b.lang_word.empty()) {
      out.diagnostics.push_back(
          fmt::format("fence at byte {} has no language word; treated as NL", b.open_begin));
    } else if (auto k = registry.find(b.lang_word)) {
      block_labels[i] = LanguageLabel::PL(*k);
    } else {
      if (registry.fallback() == FallbackPolicy::error)
        throw ValidationError(
            fmt::format("unknown fence language '{}' at byte {}", b.lang_word, b.open_begin));
      out.diagnostics.push_back(fmt::format(
          "unknown fence language '{}' at byte {}; treated as NL", b.lang_word, b.open_begin));
    }
    if (!b.closed)
      out.diagnostics.push_back(fmt::format("unclosed fence '{}' opened at byte {}",
                                            b.lang_word, b.open_begin));
  }

  // Assemble the span partition: [body_begin, close_end) is the block label
  // (interior plus closing marker), everything else NL.
  size_t pos = 0;
  auto push_span = [&](size_t begin, size_t end, LanguageLabel label) {
    if (begin >= end) return;
    if (!out.spans.empty() && out.spans.back().label == label &&
        out.spans.back().end == begin) {
      out.spans.back().end = end;
      return;
    }
    out.spans.push_back({begin, end, label});
  };
  for (size_t i = 0; i < out.blocks.size(); ++i) {
    const auto& b = out.blocks[i];
    push_span(pos, b.body_begin, LanguageLabel::NL());  // incl. fence-open line
    push_span(b.body_begin, b.close_end, block_labels[i]);
    pos = b.close_end;
  }
  push_span(pos, text.size(), LanguageLabel::NL());
  return out;
}

double code_char_fraction(const std::string& question, const std::string& answer) {
  size_t code = 0;
  for (const auto* part : {&question, &answer})
    for (const auto& b : parse_blocks(*part)) code += b.body_end - b.body_begin;
  const size_t total = question.size() + answer.size();
  if (total == 0) return 0.0;
  return static_cast<double>(code) / static_cast<double>(total);
}

}  // namespace mole
