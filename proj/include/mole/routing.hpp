// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mole/common.hpp"

namespace mole {

// Per-token language tag: natural language, one of K registered programming
// languages, or padding.
struct LanguageLabel {
  enum class Kind : int8_t { nl, pl, pad };
  Kind kind = Kind::nl;
  int lang = -1;  // valid only for pl

  static LanguageLabel NL() { return {Kind::nl, -1}; }
  static LanguageLabel PAD() { return {Kind::pad, -1}; }
  static LanguageLabel PL(int k) { return {Kind::pl, k}; }

  bool is_nl() const { return kind == Kind::nl; }
  bool is_pl() const { return kind == Kind::pl; }
  bool is_pad() const { return kind == Kind::pad; }
  bool operator==(const LanguageLabel&) const = default;
};

using LabelSequence = std::vector<LanguageLabel>;

enum class FallbackPolicy { route_nl, error };

class LanguageRegistry {
 public:
  LanguageRegistry() = default;
  explicit LanguageRegistry(std::vector<std::string> names,
                            FallbackPolicy fallback = FallbackPolicy::route_nl);

  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int k) const;
  std::optional<int> find(const std::string& name) const;
  FallbackPolicy fallback() const { return fallback_; }

 private:
  std::vector<std::string> names_;
  FallbackPolicy fallback_ = FallbackPolicy::route_nl;
};

}  // namespace mole
