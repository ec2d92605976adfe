// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>

#include "mole/mole_linear.hpp"

using namespace mole;

namespace {

using D = Tensor<double>;

D random_matrix(int64_t r, int64_t c, Rng& rng, double scl = 1.0) {
  std::vector<double> data(static_cast<size_t>(r * c));
  for (auto& x : data) x = (rng.uniform() * 2.0 - 1.0) * scl;
  return D::from({r, c}, std::move(data));
}

bool all_zero(std::span<const double> s) {
  for (double x : s)
    if (x != 0.0) return false;
  return true;
}

}  // namespace

TEST_CASE("routed forward at pissa init equals the dense base weight") {
  Rng rng(3);
  auto w = random_matrix(6, 5, rng);
  auto lin = MoleLinear<double>::from_init(split_init(w, SplitPlan{.r_s = 2, .r_e = 1}, 3));
  auto x = random_matrix(7, 5, rng);
  LabelSequence labels = {LanguageLabel::NL(),    LanguageLabel::PL(0), LanguageLabel::PL(1),
                          LanguageLabel::PL(2),   LanguageLabel::NL(),  LanguageLabel::PL(1),
                          LanguageLabel::PAD()};
  auto y = routed_forward(lin, x, labels);
  auto dense = matmul(x, w, false, true);
  for (int64_t t = 0; t < 6; ++t)
    for (int64_t j = 0; j < 6; ++j)
      CHECK(std::abs(y.at({t, j}) - dense.at({t, j})) <= 1e-10 * std::abs(dense.at({t, j})) + 1e-12);
  for (int64_t j = 0; j < 6; ++j) CHECK(y.at({6, j}) == 0.0);  // PAD row
}

TEST_CASE("hand-built adapters route per label") {
  MoleLinear<double> lin;
  lin.w0 = D::from({2, 2}, {1, 0, 0, 1});
  lin.w0.set_requires_grad(false);
  lin.shared = {D::from({2, 1}, {1, 0}), D::from({1, 2}, {1, 0})};  // [[1,0],[0,0]]
  lin.experts.push_back({D::from({2, 1}, {0, 1}), D::from({1, 2}, {0, 1})});  // [[0,0],[0,1]]
  lin.nl = {D::from({2, 1}, {1, 0}), D::from({1, 2}, {1, 0})};  // [[1,0],[0,0]]
  lin.mode = RoutingMode::by_label;

  auto x = D::from({1, 2}, {1, 1});
  auto y_pl = routed_forward(lin, x, {LanguageLabel::PL(0)});
  CHECK(y_pl.at({0, 0}) == doctest::Approx(2.0));
  CHECK(y_pl.at({0, 1}) == doctest::Approx(2.0));
  auto y_nl = routed_forward(lin, x, {LanguageLabel::NL()});
  CHECK(y_nl.at({0, 0}) == doctest::Approx(2.0));
  CHECK(y_nl.at({0, 1}) == doctest::Approx(1.0));
}

TEST_CASE("mixed batch equals concatenated single-label calls") {
  Rng rng(9);
  auto w = random_matrix(4, 3, rng);
  auto lin = MoleLinear<double>::from_init(split_init(w, SplitPlan{.r_s = 1, .r_e = 1}, 2));
  // Perturb adapters so the paths genuinely differ.
  Rng prng(10);
  for (auto* t : {&lin.shared.a, &lin.experts[0].a, &lin.experts[1].a, &lin.nl.a}) {
    auto data = t->mutable_data();
    for (auto& v : data) v += prng.uniform() * 0.3;
  }
  auto x = random_matrix(3, 3, rng);
  LabelSequence mixed = {LanguageLabel::NL(), LanguageLabel::PL(0), LanguageLabel::PL(1)};
  auto y = routed_forward(lin, x, mixed);
  for (int64_t t = 0; t < 3; ++t) {
    auto xt = slice(x, t, t + 1, 0, 3);
    auto yt = routed_forward(lin, xt, {mixed[static_cast<size_t>(t)]});
    for (int64_t j = 0; j < 4; ++j) CHECK(y.at({t, j}) == yt.at({0, j}));
  }
}

TEST_CASE("label permutation equivariance") {
  Rng rng(13);
  auto w = random_matrix(5, 4, rng);
  auto lin = MoleLinear<double>::from_init(split_init(w, SplitPlan{.r_s = 2, .r_e = 1}, 2));
  Rng prng(14);
  for (auto* t : {&lin.experts[0].a, &lin.nl.a}) {
    auto data = t->mutable_data();
    for (auto& v : data) v += prng.uniform();
  }
  auto x = random_matrix(4, 4, rng);
  LabelSequence labels = {LanguageLabel::NL(), LanguageLabel::PL(0), LanguageLabel::PAD(),
                          LanguageLabel::PL(1)};
  std::vector<int64_t> perm = {2, 0, 3, 1};
  std::vector<double> px(16);
  LabelSequence plabels(4);
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t j = 0; j < 4; ++j) px[i * 4 + j] = x.at({perm[i], j});
    plabels[static_cast<size_t>(i)] = labels[static_cast<size_t>(perm[i])];
  }
  auto y = routed_forward(lin, x, labels);
  auto py = routed_forward(lin, D::from({4, 4}, px), plabels);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 5; ++j) CHECK(py.at({i, j}) == y.at({perm[i], j}));
}

TEST_CASE("errors: length mismatch and unknown language") {
  Rng rng(1);
  auto w = random_matrix(3, 3, rng);
  auto lin = MoleLinear<double>::from_init(split_init(w, SplitPlan{.r_s = 1, .r_e = 1}, 2));
  auto x = random_matrix(2, 3, rng);
  CHECK_THROWS_AS(routed_forward(lin, x, {LanguageLabel::NL()}), ValidationError);
  CHECK_THROWS_AS(routed_forward(lin, x, {LanguageLabel::PL(2), LanguageLabel::NL()}),
                  ValidationError);
}

TEST_CASE("active adapters by label") {
  CHECK(active_adapters(LanguageLabel::PL(2)) == std::set<std::string>{"shared", "expert(2)"});
  CHECK(active_adapters(LanguageLabel::NL()) == std::set<std::string>{"nl"});
  CHECK(active_adapters(LanguageLabel::PAD()).empty());
}

TEST_CASE("trainable parameter count") {
  // Single rank-64 path on a 2048x5504 layer.
  SplitPlan single{.r_s = 0, .r_e = 0};
  // r_n = r_s + r_e would be 0; the 483k reference is one rank-64 pair:
  CHECK((2048 + 5504) * 64 == 483328);
  double frac = 483328.0 / (2048.0 * 5504.0);
  CHECK(std::round(frac * 1000) / 10 == 4.3);  // 4.3% of the layer

  SplitPlan plan{.r_s = 12, .r_e = 4};
  CHECK(trainable_parameter_count(128, 512, plan, 3) == (128 + 512) * (12 + 3 * 4 + 16));

  SplitPlan no_experts{.r_s = 16, .r_e = 0};
  CHECK(trainable_parameter_count(128, 512, no_experts, 7) ==
        (128 + 512) * (no_experts.r_s + no_experts.r_n()));
  (void)single;
}

TEST_CASE("gradient routing: inactive paths get exactly zero") {
  Rng rng(21);
  auto w = random_matrix(4, 4, rng);
  auto lin = MoleLinear<double>::from_init(split_init(w, SplitPlan{.r_s = 1, .r_e = 1}, 3));
  auto x = random_matrix(3, 4, rng);

  // Batch contains NL and PL(0) only.
  LabelSequence labels = {LanguageLabel::NL(), LanguageLabel::PL(0), LanguageLabel::PL(0)};
  auto y = routed_forward(lin, x, labels);
  backward(sum(y));

  CHECK(!all_zero(lin.shared.b.grad()));
  CHECK(!all_zero(lin.experts[0].a.grad()));
  CHECK(!all_zero(lin.nl.b.grad()));
  CHECK(all_zero(lin.experts[1].b.grad()));
  CHECK(all_zero(lin.experts[1].a.grad()));
  CHECK(all_zero(lin.experts[2].b.grad()));
  // The frozen base never accumulates a gradient.
  CHECK_THROWS_AS((void)lin.w0.grad(), ValidationError);

  // Code-only batch leaves the NL pair untouched.
  for (auto p : lin.trainable_params()) p.zero_grad();
  auto y2 = routed_forward(lin, x, {LanguageLabel::PL(1), LanguageLabel::PL(1),
                                    LanguageLabel::PL(2)});
  backward(sum(y2));
  CHECK(all_zero(lin.nl.b.grad()));
  CHECK(all_zero(lin.nl.a.grad()));
  CHECK(!all_zero(lin.experts[1].b.grad()));
}

TEST_CASE("mixed-label adapter gradients match finite differences") {
  Rng rng(31);
  auto w = random_matrix(4, 4, rng);
  auto lin = MoleLinear<double>::from_init(split_init(w, SplitPlan{.r_s = 1, .r_e = 1}, 2));
  auto x = random_matrix(4, 4, rng);
  LabelSequence labels = {LanguageLabel::NL(), LanguageLabel::PL(0), LanguageLabel::PL(1),
                          LanguageLabel::PAD()};
  Rng wr(77);
  std::vector<double> wv(16);
  for (auto& v : wv) v = wr.uniform() * 2 - 1;
  auto wts = D::from({4, 4}, wv);
  auto fn = [&]() { return sum(mul(routed_forward(lin, x, labels), wts)); };
  std::vector<std::pair<std::string, D>> params = {
      {"shared.b", lin.shared.b}, {"shared.a", lin.shared.a},
      {"e0.b", lin.experts[0].b}, {"e0.a", lin.experts[0].a},
      {"e1.b", lin.experts[1].b}, {"e1.a", lin.experts[1].a},
      {"nl.b", lin.nl.b},         {"nl.a", lin.nl.a},
  };
  auto report = check_gradients(fn, params, 1e-5, 1e-4);
  CHECK(report.pass(1e-4));
}

TEST_CASE("routed layer loss gradient check from the spec example set") {
  // routed MoLE layer loss at tolerance 1e-4 (check_gradients third example)
  Rng rng(41);
  auto w = random_matrix(5, 3, rng);
  auto lin = MoleLinear<double>::from_init(split_init(w, SplitPlan{.r_s = 2, .r_e = 1}, 2));
  auto x = random_matrix(5, 3, rng);
  LabelSequence labels = {LanguageLabel::PL(0), LanguageLabel::NL(), LanguageLabel::PL(1),
                          LanguageLabel::PL(0), LanguageLabel::NL()};
  auto fn = [&]() {
    auto y = routed_forward(lin, x, labels);
    return sum(mul(y, y));
  };
  auto report = check_gradients(
      fn, {{"shared.b", lin.shared.b}, {"nl.a", lin.nl.a}, {"e1.b", lin.experts[1].b}},
      1e-5, 1e-4);
  CHECK(report.pass(1e-4));
}

TEST_CASE("single-adapter mode applies one pair to all non-PAD tokens") {
  Rng rng(51);
  auto w = random_matrix(4, 3, rng);
  auto lin = MoleLinear<double>::single_adapter(w.detached(), 2, rng);
  // With A zero the layer equals the base.
  auto x = random_matrix(3, 3, rng);
  LabelSequence labels = {LanguageLabel::NL(), LanguageLabel::PL(0), LanguageLabel::PAD()};
  auto y = routed_forward(lin, x, labels);
  auto dense = matmul(x, w, false, true);
  for (int64_t j = 0; j < 4; ++j) {
    CHECK(y.at({0, j}) == doctest::Approx(dense.at({0, j})));
    CHECK(y.at({1, j}) == doctest::Approx(dense.at({1, j})));
    CHECK(y.at({2, j}) == 0.0);
  }
  CHECK(lin.trainable_params().size() == 2);
}
