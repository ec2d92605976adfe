// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>

#include "mole/linalg.hpp"

using namespace mole;

namespace {

using D = Tensor<double>;

D random_matrix(int64_t r, int64_t c, Rng& rng, double scl = 1.0) {
  std::vector<double> data(static_cast<size_t>(r * c));
  for (auto& x : data) x = (rng.uniform() * 2.0 - 1.0) * scl;
  return D::from({r, c}, std::move(data));
}

double fro_norm(const D& m) {
  double s = 0;
  for (double x : m.data()) s += x * x;
  return std::sqrt(s);
}

double rel_fro_diff(const D& a, const D& b) {
  REQUIRE(a.shape() == b.shape());
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return std::sqrt(s) / std::max(1.0, fro_norm(a));
}

// max |M^T M - I| entry
double orthogonality_defect(const D& m) {
  auto g = matmul(m, m, /*trans_a=*/true, /*trans_b=*/false);
  double worst = 0;
  for (int64_t i = 0; i < g.rows(); ++i)
    for (int64_t j = 0; j < g.cols(); ++j)
      worst = std::max(worst, std::abs(g.at({i, j}) - (i == j ? 1.0 : 0.0)));
  return worst;
}

D reconstruct(const SvdResult& f) {
  const int64_t d = f.u.rows(), m = f.u.cols(), k = f.v.rows();
  std::vector<double> us(static_cast<size_t>(d) * m);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < m; ++j) us[i * m + j] = f.u.at({i, j}) * f.s.data()[j];
  return matmul(D::from({d, m}, std::move(us)), f.v, false, true);
}

// Effective weight a path sees, via plain dense arithmetic.
D dense_effective(const MoleLinearInit<double>& init, const LanguageLabel& path) {
  auto acc = init.w0.detached();
  auto add_in = [&](const AdapterPair<double>& p) {
    if (p.rank() == 0) return;
    acc = add(acc, matmul(p.b, p.a));
  };
  if (path.is_nl())
    add_in(init.nl);
  else {
    add_in(init.shared);
    add_in(init.experts[static_cast<size_t>(path.lang)]);
  }
  return acc;
}

}  // namespace

TEST_CASE("svd of identity") {
  auto f = svd(D::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  for (int i = 0; i < 3; ++i) CHECK(f.s.data()[i] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(orthogonality_defect(f.u) < 1e-12);
}

TEST_CASE("svd of the zero matrix") {
  auto f = svd(D::zeros({2, 2}));
  CHECK(f.s.data()[0] == 0.0);
  CHECK(f.s.data()[1] == 0.0);
  CHECK(orthogonality_defect(f.u) < 1e-12);
  CHECK(orthogonality_defect(f.v) < 1e-12);
  CHECK(rel_fro_diff(D::zeros({2, 2}), reconstruct(f)) == 0.0);
}

TEST_CASE("svd of a row-permuted diagonal matches the eigen oracle") {
  // rows of diag(3,2,1) permuted
  auto w = D::from({3, 3}, {0, 2, 0, 0, 0, 1, 3, 0, 0});
  // Independent oracle: W^T W computed naively; its eigenvalues are the
  // squared singular values. For this matrix W^T W is diagonal.
  std::vector<double> gram(9, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int p = 0; p < 3; ++p)
        gram[i * 3 + j] += w.at({p, i}) * w.at({p, j});
  CHECK(gram[0] == 9.0);
  CHECK(gram[4] == 4.0);
  CHECK(gram[8] == 1.0);
  CHECK(gram[1] == 0.0);

  auto f = svd(w);
  CHECK(f.s.data()[0] == doctest::Approx(3.0).epsilon(1e-13));
  CHECK(f.s.data()[1] == doctest::Approx(2.0).epsilon(1e-13));
  CHECK(f.s.data()[2] == doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("svd on random matrices: orthogonality, ordering, reconstruction") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    int64_t d = 5 + static_cast<int64_t>(rng.below(20));
    int64_t k = 5 + static_cast<int64_t>(rng.below(20));
    auto w = random_matrix(d, k, rng, trial % 3 == 0 ? 100.0 : 1.0);
    auto f = svd(w);
    CHECK(orthogonality_defect(f.u) < 1e-10);
    CHECK(orthogonality_defect(f.v) < 1e-10);
    for (int64_t i = 0; i + 1 < f.s.numel(); ++i) {
      CHECK(f.s.data()[i] >= f.s.data()[i + 1]);
      CHECK(f.s.data()[i] >= 0.0);
    }
    CHECK(rel_fro_diff(w, reconstruct(f)) < 1e-12);
  }
}

TEST_CASE("svd of a rank-deficient matrix keeps orthonormal factors") {
  Rng rng(5);
  auto col = random_matrix(6, 1, rng);
  auto row = random_matrix(1, 4, rng);
  auto w = matmul(col, row);  // rank 1
  auto f = svd(w);
  CHECK(orthogonality_defect(f.u) < 1e-10);
  CHECK(orthogonality_defect(f.v) < 1e-10);
  CHECK(rel_fro_diff(w, reconstruct(f)) < 1e-12);
  CHECK(f.s.data()[1] < 1e-12 * f.s.data()[0]);
}

TEST_CASE("svd rejects non-finite input") {
  auto w = D::from({2, 2}, {1.0, std::nan(""), 0.0, 1.0});
  CHECK_THROWS_AS(svd(w), ValidationError);
}

TEST_CASE("split plan validation") {
  SplitPlan plan{.r_s = 6, .r_e = 3};
  CHECK(plan.r_n() == 9);
  CHECK_THROWS_AS(plan.validate(8, 8), ValidationError);  // 9 > min(8,8)
  plan.validate(16, 9);
  SplitPlan zero_e{.r_s = 4, .r_e = 0};
  zero_e.validate(8, 6);  // the 64/0-style variant is allowed
}

TEST_CASE("split_init of the zero matrix") {
  SplitPlan plan{.r_s = 2, .r_e = 1};
  auto init = split_init(D::zeros({6, 5}), plan, 3);
  for (double x : init.w0.data()) CHECK(x == 0.0);
  for (double x : init.shared.b.data()) CHECK(x == 0.0);
  for (double x : init.nl.a.data()) CHECK(x == 0.0);
  for (const auto& path :
       {LanguageLabel::NL(), LanguageLabel::PL(0), LanguageLabel::PL(2)})
    CHECK(rel_fro_diff(D::zeros({6, 5}), merge(init, path)) == 0.0);
}

TEST_CASE("standard scheme keeps the effective weight exactly W") {
  Rng rng(9);
  auto w = random_matrix(8, 6, rng);
  SplitPlan plan{.r_s = 2, .r_e = 1, .order = SplitOrder::shared_first,
                 .scheme = InitScheme::standard};
  Rng init_rng(1234);
  auto init = split_init(w, plan, 3, &init_rng);
  // W0 untouched, A factors zero => merged weight equals W bit for bit.
  for (int64_t i = 0; i < w.numel(); ++i) CHECK(init.w0.data()[i] == w.data()[i]);
  for (const auto& path : {LanguageLabel::NL(), LanguageLabel::PL(1)}) {
    auto m = merge(init, path);
    for (int64_t i = 0; i < w.numel(); ++i) CHECK(m.data()[i] == w.data()[i]);
  }
  // B factors are actually drawn (symmetry must be broken by gradients only
  // through distinct draws per expert here).
  bool any_nonzero = false;
  for (double x : init.shared.b.data()) any_nonzero |= (x != 0.0);
  CHECK(any_nonzero);
}

TEST_CASE("pissa split on a random 8x6 matrix reconstructs every path") {
  Rng rng(21);
  auto w = random_matrix(8, 6, rng);
  SplitPlan plan{.r_s = 2, .r_e = 1};
  auto init = split_init(w, plan, 3);
  CHECK(init.experts.size() == 3);
  for (int k = 0; k < 3; ++k)
    CHECK(rel_fro_diff(w, dense_effective(init, LanguageLabel::PL(k))) <= 1e-10);
  CHECK(rel_fro_diff(w, dense_effective(init, LanguageLabel::NL())) <= 1e-10);

  // rank(B_s A_s) = r_s = 2, checked through the full-SVD oracle.
  auto delta = matmul(init.shared.b, init.shared.a);
  auto fd = svd(delta);
  CHECK(fd.s.data()[0] > 1e-8);
  CHECK(fd.s.data()[1] > 1e-8);
  CHECK(fd.s.data()[2] < 1e-10 * fd.s.data()[0]);

  // all expert pairs initialized identically
  for (int k = 1; k < 3; ++k) {
    for (int64_t i = 0; i < init.experts[0].b.numel(); ++i)
      CHECK(init.experts[0].b.data()[i] == init.experts[static_cast<size_t>(k)].b.data()[i]);
    for (int64_t i = 0; i < init.experts[0].a.numel(); ++i)
      CHECK(init.experts[0].a.data()[i] == init.experts[static_cast<size_t>(k)].a.data()[i]);
  }
}

TEST_CASE("preservation identity holds for all orders and r_e >= 0") {
  Rng rng(33);
  for (auto order : {SplitOrder::shared_first, SplitOrder::shared_last}) {
    for (int64_t r_e : {0, 1, 3}) {
      auto w = random_matrix(10, 7, rng, 2.0);
      SplitPlan plan{.r_s = 3, .r_e = r_e, .order = order};
      auto init = split_init(w, plan, 2);
      for (const auto& path :
           {LanguageLabel::NL(), LanguageLabel::PL(0), LanguageLabel::PL(1)})
        CHECK(rel_fro_diff(w, merge(init, path)) <= 1e-10);
    }
  }
}

TEST_CASE("component assignment follows the order flag") {
  Rng rng(41);
  auto w = random_matrix(12, 9, rng);
  auto f = svd(w);

  auto singular_values_of = [&](const AdapterPair<double>& p) {
    auto delta = matmul(p.b, p.a);
    return svd(delta).s;
  };

  SplitPlan first{.r_s = 3, .r_e = 2, .order = SplitOrder::shared_first};
  auto init_f = split_init(w, first, 2);
  auto sh = singular_values_of(init_f.shared);
  auto ex = singular_values_of(init_f.experts[0]);
  // shared-first: shared receives the top components, pointwise >= experts'.
  for (int64_t i = 0; i < 2; ++i) CHECK(sh.data()[i] >= ex.data()[i]);
  CHECK(sh.data()[0] == doctest::Approx(f.s.data()[0]).epsilon(1e-10));
  CHECK(ex.data()[0] == doctest::Approx(f.s.data()[3]).epsilon(1e-10));

  SplitPlan last{.r_s = 3, .r_e = 2, .order = SplitOrder::shared_last};
  auto init_l = split_init(w, last, 2);
  auto sh_l = singular_values_of(init_l.shared);
  auto ex_l = singular_values_of(init_l.experts[0]);
  for (int64_t i = 0; i < 2; ++i) CHECK(ex_l.data()[i] >= sh_l.data()[i]);
  CHECK(ex_l.data()[0] == doctest::Approx(f.s.data()[0]).epsilon(1e-10));
  CHECK(sh_l.data()[0] == doctest::Approx(f.s.data()[2]).epsilon(1e-10));

  // NL gets the top r_n components under either order.
  auto nl_f = singular_values_of(init_f.nl);
  auto nl_l = singular_values_of(init_l.nl);
  for (int64_t i = 0; i < 5; ++i) {
    CHECK(nl_f.data()[i] == doctest::Approx(f.s.data()[i]).epsilon(1e-10));
    CHECK(nl_l.data()[i] == doctest::Approx(f.s.data()[i]).epsilon(1e-10));
  }
}

TEST_CASE("merge is pure and reports unknown languages") {
  Rng rng(77);
  auto w = random_matrix(6, 4, rng);
  auto init = split_init(w, SplitPlan{.r_s = 1, .r_e = 1}, 2);
  auto m1 = merge(init, LanguageLabel::PL(1));
  auto m2 = merge(init, LanguageLabel::PL(1));
  for (int64_t i = 0; i < m1.numel(); ++i) CHECK(m1.data()[i] == m2.data()[i]);
  CHECK_THROWS_AS(merge(init, LanguageLabel::PL(5)), ValidationError);
  CHECK_THROWS_AS(merge(init, LanguageLabel::PAD()), ValidationError);
}

TEST_CASE("perturbing A_s shifts the merge by B_s E exactly") {
  Rng rng(55);
  auto w = random_matrix(7, 5, rng);
  auto init = split_init(w, SplitPlan{.r_s = 2, .r_e = 1}, 1);
  auto before = merge(init, LanguageLabel::PL(0));

  auto e = random_matrix(2, 5, rng, 0.1);
  auto perturbed = add(init.shared.a, e);
  MoleLinearInit<double> init2 = init;
  init2.shared.a = perturbed.detached();
  auto after = merge(init2, LanguageLabel::PL(0));

  auto expected_delta = matmul(init.shared.b, e);
  for (int64_t i = 0; i < before.numel(); ++i)
    CHECK(after.data()[i] - before.data()[i] ==
          doctest::Approx(expected_delta.data()[i]).epsilon(1e-10));
}

TEST_CASE("language registry basics") {
  LanguageRegistry reg({"pylite", "curly", "lispy"});
  CHECK(reg.size() == 3);
  CHECK(reg.find("curly") == 1);
  CHECK(!reg.find("cobol").has_value());
  CHECK_THROWS_AS(LanguageRegistry({"a", "a"}), ValidationError);
  CHECK_THROWS_AS(LanguageRegistry(std::vector<std::string>{}), ValidationError);
}
