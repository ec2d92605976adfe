// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <vector>

#include "mole/tensor.hpp"

using namespace mole;

namespace {

using D = Tensor<double>;

// Independent dense multiply oracle (naive triple loop).
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 int m, int k, int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < n; ++j) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

D random_tensor(Shape shape, Rng& rng, double scl = 1.0) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : data) x = (rng.uniform() * 2.0 - 1.0) * scl;
  return D::from(std::move(shape), std::move(data));
}

// Fixed random weights reducing a tensor to a scalar so every output element
// participates in the loss. Weights must be frozen outside the checked
// function so repeated evaluations see the same map.
D make_weights(Shape shape, Rng& rng) {
  std::vector<double> w(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : w) x = rng.uniform() * 2.0 - 1.0;
  return D::from(std::move(shape), std::move(w));
}

}  // namespace

TEST_CASE("matmul identity and derived oracle") {
  auto a = D::from({2, 2}, {1, 2, 3, 4});
  auto eye = D::from({2, 2}, {1, 0, 0, 1});
  auto r = matmul(a, eye);
  CHECK(r.at({0, 0}) == 1.0);
  CHECK(r.at({0, 1}) == 2.0);
  CHECK(r.at({1, 0}) == 3.0);
  CHECK(r.at({1, 1}) == 4.0);

  // 2x3 . 3x2 case, checked against the naive oracle and the frozen values.
  std::vector<double> av = {1, 0, 2, 0, 1, 1};
  std::vector<double> bv = {1, 1, 2, 0, 0, 3};
  auto expect = naive_matmul(av, bv, 2, 3, 2);
  CHECK(expect == std::vector<double>{1, 7, 2, 3});
  auto r2 = matmul(D::from({2, 3}, av), D::from({3, 2}, bv));
  for (int i = 0; i < 4; ++i) CHECK(r2.data()[i] == expect[i]);
}

TEST_CASE("matmul transpose flags agree with explicit transposition") {
  Rng rng(7);
  auto a = random_tensor({4, 3}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto direct = matmul(a, b, /*trans_a=*/true, /*trans_b=*/false);
  auto via_op = matmul(transpose(a), b);
  for (int64_t i = 0; i < direct.numel(); ++i)
    CHECK(direct.data()[i] == doctest::Approx(via_op.data()[i]).epsilon(1e-14));

  auto c = random_tensor({5, 4}, rng);
  auto direct2 = matmul(a, c, true, true);
  auto via_op2 = matmul(transpose(a), transpose(c));
  for (int64_t i = 0; i < direct2.numel(); ++i)
    CHECK(direct2.data()[i] == doctest::Approx(via_op2.data()[i]).epsilon(1e-14));
}

TEST_CASE("matmul shape mismatch names the operation and shapes") {
  auto a = D::zeros({2, 3});
  auto b = D::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ValidationError);
  try {
    matmul(a, b);
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(4, 2)") != std::string::npos);
  }
}

TEST_CASE("softmax symmetry") {
  auto s = softmax(D::from({2}, {0, 0}));
  CHECK(s.data()[0] == 0.5);
  CHECK(s.data()[1] == 0.5);
}

TEST_CASE("backward of sum(W.x) with identity W") {
  auto w = D::from({2, 2}, {1, 0, 0, 1});
  auto x = D::from({2, 1}, {1, 1});
  x.set_requires_grad(true);
  auto loss = sum(matmul(w, x));
  backward(loss);
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = D::from({2, 1}, {1, 1});
  x.set_requires_grad(true);
  auto y = matmul(D::from({2, 2}, {1, 0, 0, 1}), x);
  CHECK_THROWS_AS(backward(y), ValidationError);
}

TEST_CASE("non-participating leaves hold exactly zero") {
  auto a = D::from({2}, {1, 2});
  auto b = D::from({2}, {3, 4});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto loss = sum(mul(a, a));
  backward(loss);
  CHECK(a.grad()[0] == 2.0);
  CHECK(b.grad()[0] == 0.0);
  CHECK(b.grad()[1] == 0.0);
}

TEST_CASE("gradient accumulates across uses and zero_grad resets") {
  auto a = D::from({2}, {1.0, 2.0});
  a.set_requires_grad(true);
  auto loss = sum(add(a, a));
  backward(loss);
  CHECK(a.grad()[0] == 2.0);
  auto loss2 = sum(a);
  backward(loss2);
  CHECK(a.grad()[0] == 3.0);  // additive across backward passes
  a.zero_grad();
  CHECK(a.grad()[0] == 0.0);
}

TEST_CASE("three-layer random composition matches finite differences") {
  for (uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    auto w1 = random_tensor({4, 4}, rng);
    auto w2 = random_tensor({4, 4}, rng);
    auto w3 = random_tensor({4, 4}, rng);
    auto x = random_tensor({3, 4}, rng);
    for (auto* t : {&w1, &w2, &w3}) t->set_requires_grad(true);
    Rng wrng(seed + 100);
    std::vector<double> wv(12);
    for (auto& v : wv) v = wrng.uniform() * 2 - 1;
    auto wts = D::from({3, 4}, wv);
    auto fn = [&]() {
      auto h1 = gelu(matmul(x, w1));
      auto h2 = gelu(matmul(h1, w2));
      auto h3 = matmul(h2, w3);
      return sum(mul(h3, wts));
    };
    auto report = check_gradients(fn, {{"w1", w1}, {"w2", w2}, {"w3", w3}}, 1e-5, 1e-4);
    CHECK(report.pass(1e-4));
  }
}

TEST_CASE("check_gradients: quadratic is near-exact, constant is exactly zero") {
  auto p = D::from({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  auto quad = [&]() { return sum(mul(p, p)); };
  auto report = check_gradients(quad, {{"p", p}}, 1e-5, 1e-9);
  CHECK(report.max_rel_err < 1e-9);

  auto c = D::from({3}, {1.0, 1.0, 1.0});
  c.set_requires_grad(true);
  auto konst = [&]() { return D::scalar(5.0); };
  // Constant function does not reach the parameter at all.
  CHECK_THROWS_AS(check_gradients(konst, {{"c", c}}, 1e-5, 1e-9), ValidationError);
  auto konst2 = [&]() { return sum(scale(c, 0.0)); };
  auto report2 = check_gradients(konst2, {{"c", c}}, 1e-5, 1e-9);
  CHECK(report2.max_rel_err == 0.0);
}

TEST_CASE("every primitive matches central finite differences over 10 seeds") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed * 31 + 1);
    Rng wr(seed * 97 + 5);

    auto fd_check = [&](const char* what, const std::function<Tensor<double>()>& fn,
                        std::vector<std::pair<std::string, D>> params) {
      auto report = check_gradients(fn, params, 1e-5, 1e-4);
      INFO(what, " seed ", seed, " max_rel_err ", report.max_rel_err);
      CHECK(report.pass(1e-4));
    };

    {
      auto a = random_tensor({3, 4}, rng).set_requires_grad(true);
      auto b = random_tensor({4, 2}, rng).set_requires_grad(true);
      auto wts = make_weights({3, 2}, wr);
      fd_check("matmul_nn", [&]() { return sum(mul(matmul(a, b), wts)); },
               {{"a", a}, {"b", b}});
    }
    {
      auto a = random_tensor({4, 3}, rng).set_requires_grad(true);
      auto b = random_tensor({2, 4}, rng).set_requires_grad(true);
      auto wts = make_weights({3, 2}, wr);
      fd_check("matmul_tt", [&]() { return sum(mul(matmul(a, b, true, true), wts)); },
               {{"a", a}, {"b", b}});
    }
    {
      auto a = random_tensor({3, 4}, rng).set_requires_grad(true);
      auto b = random_tensor({3, 4}, rng).set_requires_grad(true);
      auto wts = make_weights({3, 4}, wr);
      fd_check("add+mul", [&]() { return sum(mul(mul(add(a, b), b), wts)); },
               {{"a", a}, {"b", b}});
    }
    {
      auto a = random_tensor({3, 4}, rng).set_requires_grad(true);
      auto v = random_tensor({4}, rng).set_requires_grad(true);
      auto wts = make_weights({3, 4}, wr);
      fd_check("broadcast_add", [&]() { return sum(mul(broadcast_add(a, v), wts)); },
               {{"a", a}, {"v", v}});
    }
    {
      auto a = random_tensor({4, 3}, rng).set_requires_grad(true);
      auto wts = make_weights({3, 4}, wr);
      fd_check("transpose+scale",
               [&]() { return sum(mul(scale(transpose(a), 1.7), wts)); }, {{"a", a}});
    }
    {
      auto t = random_tensor({5, 3}, rng).set_requires_grad(true);
      std::vector<int64_t> ids = {4, 0, 2, 2};
      auto wts = make_weights({4, 3}, wr);
      fd_check("gather_rows", [&]() { return sum(mul(gather_rows(t, ids), wts)); },
               {{"t", t}});
    }
    {
      auto vsrc = random_tensor({3, 2}, rng).set_requires_grad(true);
      std::vector<int64_t> ids = {2, 0, 4};
      auto wts = make_weights({5, 2}, wr);
      fd_check("scatter_rows",
               [&]() { return sum(mul(scatter_rows(vsrc, ids, 5), wts)); },
               {{"v", vsrc}});
    }
    {
      auto a = random_tensor({3, 5}, rng, 2.0).set_requires_grad(true);
      auto wts = make_weights({3, 5}, wr);
      fd_check("softmax", [&]() { return sum(mul(softmax(a), wts)); }, {{"a", a}});
      fd_check("log_softmax", [&]() { return sum(mul(log_softmax(a), wts)); },
               {{"a", a}});
    }
    {
      auto a = random_tensor({4, 6}, rng, 2.0).set_requires_grad(true);
      std::vector<int64_t> ids = {1, 0, 5, 3};
      auto wts = make_weights({4}, wr);
      fd_check("take_per_row", [&]() { return sum(mul(take_per_row(a, ids), wts)); },
               {{"a", a}});
    }
    {
      // keep inputs away from the relu kink
      auto raw = random_tensor({3, 4}, rng);
      std::vector<double> shifted(raw.data().begin(), raw.data().end());
      for (auto& x : shifted) x += (x >= 0 ? 0.3 : -0.3);
      auto a = D::from({3, 4}, shifted).set_requires_grad(true);
      auto wts = make_weights({3, 4}, wr);
      fd_check("relu", [&]() { return sum(mul(relu(a), wts)); }, {{"a", a}});
    }
    {
      auto a = random_tensor({3, 4}, rng, 2.0).set_requires_grad(true);
      auto wts = make_weights({3, 4}, wr);
      fd_check("gelu", [&]() { return sum(mul(gelu(a), wts)); }, {{"a", a}});
    }
    {
      auto x = random_tensor({3, 6}, rng).set_requires_grad(true);
      auto g = random_tensor({6}, rng).set_requires_grad(true);
      auto b = random_tensor({6}, rng).set_requires_grad(true);
      auto wts = make_weights({3, 6}, wr);
      fd_check("layer_norm",
               [&]() { return sum(mul(layer_norm(x, g, b, 1e-5), wts)); },
               {{"x", x}, {"g", g}, {"b", b}});
    }
    {
      auto a = random_tensor({2, 3}, rng).set_requires_grad(true);
      auto b = random_tensor({2, 3}, rng).set_requires_grad(true);
      auto wts0 = make_weights({4, 3}, wr);
      auto wts1 = make_weights({2, 4}, wr);
      fd_check("concat_rows",
               [&]() { return sum(mul(concat<double>({a, b}, 0), wts0)); },
               {{"a", a}, {"b", b}});
      fd_check("concat_cols+slice",
               [&]() {
                 return sum(mul(slice(concat<double>({a, b}, 1), 0, 2, 1, 5), wts1));
               },
               {{"a", a}, {"b", b}});
    }
    {
      const int64_t T = 5, d = 4;
      auto q = random_tensor({2 * T, d}, rng).set_requires_grad(true);
      auto k = random_tensor({2 * T, d}, rng).set_requires_grad(true);
      auto v = random_tensor({2 * T, d}, rng).set_requires_grad(true);
      auto wts = make_weights({2 * T, d}, wr);
      fd_check("causal_attention",
               [&]() { return sum(mul(causal_attention(q, k, v, 2, T), wts)); },
               {{"q", q}, {"k", k}, {"v", v}});
    }
  }
}

TEST_CASE("determinism: same seed gives bit-identical outputs and gradients") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto a = random_tensor({4, 4}, rng).set_requires_grad(true);
    auto b = random_tensor({4, 4}, rng).set_requires_grad(true);
    auto loss = sum(gelu(matmul(softmax(a), b)));
    backward(loss);
    std::vector<double> out(loss.data().begin(), loss.data().end());
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    return out;
  };
  CHECK(run(42) == run(42));
  CHECK(run(42) != run(43));
}

TEST_CASE("computation record replays bit-for-bit and is acyclic") {
  Rng rng(3);
  auto a = random_tensor({3, 3}, rng).set_requires_grad(true);
  auto b = random_tensor({3, 3}, rng);
  auto out = layer_norm(matmul(gelu(a), b), D::full({3}, 1.0), D::zeros({3}), 1e-5);
  auto loss = sum(out);
  ComputationRecord<double> rec(loss);
  CHECK(rec.size() >= 5);
  CHECK(rec.replay_matches());
  auto names = rec.op_names();
  CHECK(names.back() == "sum");  // creation order is topological
}

TEST_CASE("causal attention ignores future tokens") {
  Rng rng(11);
  const int64_t T = 6, d = 4;
  auto q = random_tensor({T, d}, rng);
  auto k = random_tensor({T, d}, rng);
  auto v = random_tensor({T, d}, rng);
  auto out1 = causal_attention(q, k, v, 2, T);
  // Perturb the last row of k/v; rows before it must not change.
  auto k2v = std::vector<double>(k.data().begin(), k.data().end());
  auto v2v = std::vector<double>(v.data().begin(), v.data().end());
  for (int64_t e = 0; e < d; ++e) {
    k2v[(T - 1) * d + e] += 3.0;
    v2v[(T - 1) * d + e] -= 2.0;
  }
  auto out2 = causal_attention(q, D::from({T, d}, k2v), D::from({T, d}, v2v), 2, T);
  for (int64_t i = 0; i < T - 1; ++i)
    for (int64_t e = 0; e < d; ++e) CHECK(out1.at({i, e}) == out2.at({i, e}));
  bool last_changed = false;
  for (int64_t e = 0; e < d; ++e)
    if (out1.at({T - 1, e}) != out2.at({T - 1, e})) last_changed = true;
  CHECK(last_changed);
}
