// SPDX-License-Identifier: Apache-2.0
//
// Three miniature formal syntaxes over the same integer-arithmetic function
// semantics: pylite (keyword-indent), curly (brace-semicolon), lispy
// (parenthesized prefix). A reference evaluator executes parsed functions
// under a step budget; functional equivalence is probe-based.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mole/common.hpp"

namespace mole {

enum class ToySyntax { pylite, curly, lispy };

std::optional<ToySyntax> toy_syntax_from_name(const std::string& name);
const char* to_string(ToySyntax s);
// The built-in trio, in canonical registry order.
const std::vector<std::string>& toy_language_names();

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Expr {
  enum class Kind { constant, var, add, sub, mul };
  Kind kind = Kind::constant;
  int64_t value = 0;  // constant
  int var = -1;       // parameter index
  ExprPtr lhs, rhs;
};

ExprPtr expr_const(int64_t v);
ExprPtr expr_var(int index);
ExprPtr expr_bin(Expr::Kind op, ExprPtr l, ExprPtr r);

struct ToyFunction {
  std::string name;
  std::vector<std::string> params;
  ExprPtr body;
};

struct ParseResult {
  std::optional<ToyFunction> fn;
  std::string error;
  bool ok() const { return fn.has_value(); }
};

// Accepts the canonical rendering plus reasonable whitespace variation.
// Failure returns an error message instead of throwing: unparseable model
// output counts as an evaluation miss, not a crash.
ParseResult parse_function(ToySyntax syntax, const std::string& code);

// Canonical source. with_local hoists the left operand of a binary body into
// a temporary for the statement-based syntaxes (ignored for lispy and for
// atomic operands).
std::string render_function(ToySyntax syntax, const ToyFunction& fn, bool with_local = false);

// nullopt on budget exhaustion or wrong arity.
std::optional<int64_t> eval_function(const ToyFunction& fn, const std::vector<int64_t>& args,
                                     int64_t step_budget = 10000);

// Fixed probe inputs per arity.
const std::vector<std::vector<int64_t>>& probe_inputs(size_t arity);

// True when both functions parse to the same arity and agree on every probe.
bool functionally_equal(const ToyFunction& a, const ToyFunction& b,
                        int64_t step_budget = 10000);

}  // namespace mole
