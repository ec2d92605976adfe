// SPDX-License-Identifier: Apache-2.0
//
// Byte-level BPE vocabulary with reserved PAD/BOS/EOS ids. encode/decode
// round-trips any byte string exactly.
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mole/common.hpp"

namespace mole {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kByteBase = 3;  // byte b maps to id b + 3

  Vocabulary() = default;

  // Learns merges from the given texts until the vocabulary reaches
  // target_size or no adjacent pair repeats.
  static Vocabulary train(const std::vector<std::string>& texts, int target_size);
  static Vocabulary from_merges(const std::vector<std::pair<int, int>>& merges);

  int size() const { return kByteBase + 256 + static_cast<int>(merges_.size()); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }

  struct TokenPiece {
    int id;
    size_t begin;
    size_t end;  // byte range in the encoded text
  };

  std::vector<int> encode(std::string_view text) const;
  std::vector<TokenPiece> encode_with_ranges(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  // Raw bytes of a token; empty for PAD/BOS/EOS.
  const std::string& token_text(int id) const;

 private:
  void rebuild_token_texts();

  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> token_texts_;
};

}  // namespace mole
