// SPDX-License-Identifier: Apache-2.0
#include "mole/bpe.hpp"

#include <algorithm>
#include <map>

#include <fmt/format.h>

namespace mole {

void Vocabulary::rebuild_token_texts() {
  token_texts_.assign(static_cast<size_t>(size()), std::string());
  for (int b = 0; b < 256; ++b)
    token_texts_[static_cast<size_t>(kByteBase + b)] = std::string(1, static_cast<char>(b));
  for (size_t m = 0; m < merges_.size(); ++m) {
    auto [l, r] = merges_[m];
    const int id = kByteBase + 256 + static_cast<int>(m);
    if (l < 0 || l >= id || r < 0 || r >= id)
      throw ValidationError(fmt::format("vocabulary: merge {} references id out of range", m));
    token_texts_[static_cast<size_t>(id)] =
        token_texts_[static_cast<size_t>(l)] + token_texts_[static_cast<size_t>(r)];
  }
}

Vocabulary Vocabulary::from_merges(const std::vector<std::pair<int, int>>& merges) {
  Vocabulary v;
  v.merges_ = merges;
  v.rebuild_token_texts();
  return v;
}

Vocabulary Vocabulary::train(const std::vector<std::string>& texts, int target_size) {
  if (target_size < kByteBase + 256)
    throw ValidationError(fmt::format("vocabulary: target size {} below byte base {}",
                                      target_size, kByteBase + 256));
  std::vector<std::vector<int>> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) {
    std::vector<int> s;
    s.reserve(t.size());
    for (unsigned char c : t) s.push_back(kByteBase + c);
    seqs.push_back(std::move(s));
  }

  Vocabulary v;
  while (v.size() < target_size) {
    // Count adjacent pairs; ties resolve to the smallest pair for determinism.
    std::map<std::pair<int, int>, int64_t> counts;
    for (const auto& s : seqs)
      for (size_t i = 0; i + 1 < s.size(); ++i) ++counts[{s[i], s[i + 1]}];
    std::pair<int, int> best{-1, -1};
    int64_t best_count = 1;  // require at least 2 occurrences
    for (const auto& [pair, count] : counts)
      if (count > best_count) {
        best_count = count;
        best = pair;
      }
    if (best.first < 0) break;
    const int new_id = v.size();
    v.merges_.push_back(best);
    for (auto& s : seqs) {
      size_t w = 0;
      for (size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          s[w++] = new_id;
          ++i;
        } else {
          s[w++] = s[i];
        }
      }
      s.resize(w);
    }
  }
  v.rebuild_token_texts();
  return v;
}

std::vector<Vocabulary::TokenPiece> Vocabulary::encode_with_ranges(
    std::string_view text) const {
  std::vector<TokenPiece> toks;
  toks.reserve(text.size());
  for (size_t i = 0; i < text.size(); ++i)
    toks.push_back({kByteBase + static_cast<unsigned char>(text[i]), i, i + 1});

  // Merge in rank order: repeatedly apply the lowest-rank applicable merge.
  std::map<std::pair<int, int>, int> rank;
  for (size_t m = 0; m < merges_.size(); ++m)
    rank[merges_[m]] = static_cast<int>(m);
  while (toks.size() > 1) {
    int best_rank = -1;
    for (size_t i = 0; i + 1 < toks.size(); ++i) {
      auto it = rank.find({toks[i].id, toks[i + 1].id});
      if (it != rank.end() && (best_rank < 0 || it->second < best_rank))
        best_rank = it->second;
    }
    if (best_rank < 0) break;
    const auto [l, r] = merges_[static_cast<size_t>(best_rank)];
    const int new_id = kByteBase + 256 + best_rank;
    size_t w = 0;
    for (size_t i = 0; i < toks.size(); ++i) {
      if (i + 1 < toks.size() && toks[i].id == l && toks[i + 1].id == r) {
        toks[w++] = {new_id, toks[i].begin, toks[i + 1].end};
        ++i;
      } else {
        toks[w++] = toks[i];
      }
    }
    toks.resize(w);
  }
  return toks;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& p : encode_with_ranges(text)) ids.push_back(p.id);
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += token_text(id);
  return out;
}

const std::string& Vocabulary::token_text(int id) const {
  if (id < 0 || id >= size())
    throw ValidationError(fmt::format("vocabulary: token id {} out of range [0, {})", id,
                                      size()));
  return token_texts_[static_cast<size_t>(id)];
}

}  // namespace mole
