#include <doctest.h>

#include <cmath>
#include <random>

#include "lami/distribution.hpp"
#include "lami/errors.hpp"
#include "lami/ops.hpp"
#include "lami/params.hpp"

using namespace lami;

namespace {

// Scalar re-implementation of single-head masked attention, used as oracle.
std::vector<double> scalar_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const std::vector<bool>& visible) {
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols(), dv = v.cols();
  std::vector<double> out(nq * dv, 0.0);
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<double> w(nk, 0.0);
    double z = 0.0;
    for (std::size_t j = 0; j < nk; ++j) {
      if (!visible[i * nk + j]) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q.at(i, c) * k.at(j, c);
      w[j] = std::exp(s / std::sqrt(static_cast<double>(d)));
      z += w[j];
    }
    for (std::size_t j = 0; j < nk; ++j)
      for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += w[j] / z * v.at(j, c);
  }
  return out;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  return random_normal({r, c}, 1.0, rng);
}

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor b = Tensor::matrix(2, 2, {0, 1, 1, 0});
  const Tensor id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  CHECK(matmul(id, b).bit_equal(b));
  const Tensor c = matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), b);
  CHECK(c.bit_equal(Tensor::matrix(2, 2, {2, 1, 4, 3})));
  const Tensor a = Tensor::matrix(2, 3, {1, -2, 3, 4, 5, -6});
  CHECK(matmul(a, Tensor::zeros({3, 4})).bit_equal(Tensor::zeros({2, 4})));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    (void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul is associative on random shapes") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 16);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = dim(rng), k = dim(rng), n = dim(rng), p = dim(rng);
    const Tensor a = random_matrix(m, k, rng), b = random_matrix(k, n, rng),
                 c = random_matrix(n, p, rng);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
  }
}

TEST_CASE("softmax examples") {
  const std::vector<double> flat{0.7, 0.7, 0.7};
  const auto p = softmax(flat);
  for (double x : p.probs()) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const std::vector<double> v{std::log(2.0), 0.0};
  const auto q = softmax(v);
  CHECK(std::abs(q[0] - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(q[1] - 1.0 / 3.0) < 1e-15);

  CHECK_THROWS_AS(softmax(std::vector<double>{}), ArgumentError);
  CHECK_THROWS_AS(softmax(v, 0.0), ArgumentError);
}

TEST_CASE("softmax is shift invariant and normalized") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + trial % 17);
    for (auto& x : v) x = nd(rng);
    // Adding a power of two keeps v - max(v) exact, so outputs must match bit for bit.
    std::vector<double> shifted = v;
    for (auto& x : shifted) x += 64.0;
    const auto a = softmax(v), b = softmax(shifted);
    double s = 0.0;
    for (double x : a.probs()) s += x;
    CHECK(std::abs(s - 1.0) < 1e-12);
    std::vector<double> va(v), vb(shifted);
    const double ma = *std::max_element(va.begin(), va.end());
    const double mb = *std::max_element(vb.begin(), vb.end());
    bool exact = true;
    for (std::size_t i = 0; i < v.size(); ++i) exact = exact && (va[i] - ma == vb[i] - mb);
    if (exact) CHECK(a.bit_equal(b));
  }
}

TEST_CASE("attention examples") {
  Graph g;
  std::mt19937_64 rng(5);
  SUBCASE("single key returns its value row") {
    Var q = g.constant(random_matrix(3, 4, rng));
    Var k = g.constant(random_matrix(1, 4, rng));
    Var v = g.constant(random_matrix(1, 4, rng));
    Var out = attention(q, k, v, AttentionMask::from_dense(3, 1, {true, true, true}));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 4; ++c) CHECK(out.value().at(i, c) == v.value().at(0, c));
  }
  SUBCASE("identical keys average the values") {
    const Tensor krow = random_matrix(1, 4, rng);
    Tensor kmat({5, 4});
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t c = 0; c < 4; ++c) kmat.mutable_data()[j * 4 + c] = krow[c];
    const Tensor vmat = random_matrix(5, 4, rng);
    Var out = attention(g.constant(random_matrix(2, 4, rng)), g.constant(kmat), g.constant(vmat),
                        AttentionMask::from_dense(2, 5, std::vector<bool>(10, true)));
    for (std::size_t c = 0; c < 4; ++c) {
      double m = 0.0;
      for (std::size_t j = 0; j < 5; ++j) m += vmat.at(j, c);
      CHECK(out.value().at(0, c) == doctest::Approx(m / 5).epsilon(1e-12));
    }
  }
  SUBCASE("2x3 hand instance matches scalar oracle") {
    const Tensor q = Tensor::matrix(2, 2, {1.0, 0.5, -0.3, 2.0});
    const Tensor k = Tensor::matrix(3, 2, {0.2, -1.0, 1.5, 0.3, -0.7, 0.8});
    const Tensor v = Tensor::matrix(3, 2, {1.0, 2.0, -1.0, 0.5, 3.0, -2.0});
    const std::vector<bool> vis{true, true, false, true, false, true};
    Var out = attention(g.constant(q), g.constant(k), g.constant(v),
                        AttentionMask::from_dense(2, 3, vis));
    const auto expect = scalar_attention(q, k, v, vis);
    for (std::size_t i = 0; i < expect.size(); ++i)
      CHECK(out.value()[i] == doctest::Approx(expect[i]).epsilon(1e-14));
  }
  SUBCASE("fully masked row is an error") {
    const Tensor m = random_matrix(2, 2, rng);
    CHECK_THROWS_AS(attention(g.constant(m), g.constant(m), g.constant(m),
                              AttentionMask::from_dense(2, 2, {true, false, false, false})),
                    MaskError);
  }
  SUBCASE("zero key scale hides a key exactly") {
    const Tensor q = random_matrix(2, 4, rng), k = random_matrix(3, 4, rng),
                 v = random_matrix(3, 4, rng);
    Var gate = g.constant(Tensor::scalar(0.0));
    Var scale = gated_key_scale(gate, {true, false, false});
    Var gated = attention(g.constant(q), g.constant(k), g.constant(v),
                          AttentionMask::from_dense(2, 3, std::vector<bool>(6, true)), 1, scale);
    Var plain = attention(g.constant(q), g.constant(slice_rows(g.constant(k), 1, 3).value()),
                          g.constant(slice_rows(g.constant(v), 1, 3).value()),
                          AttentionMask::from_dense(2, 2, std::vector<bool>(4, true)));
    CHECK(max_abs_diff(gated.value(), plain.value()) < 1e-15);
  }
  SUBCASE("two heads equal two single-head calls") {
    const Tensor q = random_matrix(3, 4, rng), k = random_matrix(3, 4, rng),
                 v = random_matrix(3, 6, rng);
    Var both = attention(g.constant(q), g.constant(k), g.constant(v), AttentionMask::causal(3), 2);
    for (std::size_t h = 0; h < 2; ++h) {
      Tensor qh({3, 2}), kh({3, 2}), vh({3, 3});
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 2; ++c) {
          qh.mutable_data()[r * 2 + c] = q.at(r, h * 2 + c);
          kh.mutable_data()[r * 2 + c] = k.at(r, h * 2 + c);
        }
        for (std::size_t c = 0; c < 3; ++c) vh.mutable_data()[r * 3 + c] = v.at(r, h * 3 + c);
      }
      const auto expect = scalar_attention(qh, kh, vh, {true, false, false, true, true, false,
                                                        true, true, true});
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c)
          CHECK(both.value().at(r, h * 3 + c) ==
                doctest::Approx(expect[r * 3 + c]).epsilon(1e-13));
    }
  }
}

TEST_CASE("backward closed forms") {
  SUBCASE("sum of W gives ones") {
    Graph g;
    Var w = g.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}).set_requires_grad(true));
    auto grads = g.backward(sum(w));
    CHECK(grads[w].bit_equal(Tensor::filled({2, 3}, 1.0)));
  }
  SUBCASE("x^2 at 3 gives 6") {
    Graph g;
    Var x = g.leaf(Tensor::scalar(3.0).set_requires_grad(true));
    auto grads = g.backward(sum(mul(x, x)));
    CHECK(grads[x].item() == 6.0);
  }
  SUBCASE("untouched leaf gets zeros") {
    Graph g;
    Var x = g.leaf(Tensor::scalar(3.0).set_requires_grad(true));
    Var y = g.leaf(Tensor::matrix(1, 2, {1, 2}).set_requires_grad(true));
    auto grads = g.backward(sum(x));
    CHECK(grads[y].bit_equal(Tensor::zeros({1, 2})));
  }
  SUBCASE("non-scalar loss rejected") {
    Graph g;
    Var x = g.leaf(Tensor::matrix(1, 2, {1, 2}).set_requires_grad(true));
    CHECK_THROWS_AS(g.backward(x), ArgumentError);
  }
}

TEST_CASE("cross entropy examples") {
  Graph g;
  CHECK(cross_entropy(g.constant(Tensor::matrix(1, 4, {0, 0, 0, 0})), 2).value().item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(cross_entropy(g.constant(Tensor::matrix(1, 3, {0, 1e6, 0})), 1).value().item() < 1e-12);
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(cross_entropy(g.constant(Tensor::matrix(1, 2, {1, 0})), 0).value().item() ==
        doctest::Approx(expect).epsilon(1e-15));
  CHECK_THROWS_AS(cross_entropy(g.constant(Tensor::matrix(1, 2, {1, 0})), 2), IndexError);
}

TEST_CASE("gradient check: three-layer composite") {
  std::mt19937_64 rng(17);
  NamedTensors p{{"w1", random_normal({4, 6}, 0.5, rng)},
                 {"b1", random_normal({6}, 0.5, rng)},
                 {"w2", random_normal({6, 5}, 0.5, rng)},
                 {"g", random_normal({5}, 0.5, rng)},
                 {"b", random_normal({5}, 0.5, rng)},
                 {"w3", random_normal({5, 7}, 0.5, rng)}};
  const Tensor x = random_normal({3, 4}, 1.0, rng);
  const std::vector<long> targets{2, -1, 6};
  auto loss = [&](Graph& g, const BoundVars& v) {
    Var h = gelu(add_row(matmul(g.constant(x), v.at("w1")), v.at("b1")));
    h = layer_norm(matmul(h, v.at("w2")), v.at("g"), v.at("b"));
    return cross_entropy(matmul(h, v.at("w3")), targets);
  };
  CHECK(gradient_check(p, loss).max_rel_error < 1e-4);
}

TEST_CASE("gradient check: 100 random small graphs") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = dim(rng), d = 2 * ((dim(rng) + 1) / 2), m = dim(rng), vocab = dim(rng) + 1;
    NamedTensors p{{"wq", random_normal({d, d}, 0.4, rng)}, {"wk", random_normal({d, d}, 0.4, rng)},
                   {"wv", random_normal({d, d}, 0.4, rng)}, {"wo", random_normal({d, vocab}, 0.6, rng)},
                   {"emb", random_normal({m + n, d}, 1.0, rng)}, {"gate", random_normal({}, 1.0, rng)}};
    std::vector<std::size_t> ids(n);
    for (auto& id : ids) id = std::uniform_int_distribution<std::size_t>(0, m + n - 1)(rng);
    std::vector<long> targets(n);
    for (auto& t : targets) t = static_cast<long>(std::uniform_int_distribution<std::size_t>(0, vocab - 1)(rng));
    const std::size_t heads = trial % 2 ? 2 : 1;
    auto loss = [&](Graph& g, const BoundVars& v) {
      Var x = gather_rows(v.at("emb"), ids);
      Var mem = concat_rows(std::vector<Var>{slice_rows(v.at("emb"), 0, m), x});
      AttentionMask mask(m + n);
      for (std::size_t i = 0; i < n; ++i) mask.add_row({KeySpan{0, m + i + 1}});
      std::vector<bool> gated(m + n, false);
      for (std::size_t j = 0; j < m; ++j) gated[j] = true;
      Var att = attention(matmul(x, v.at("wq")), matmul(mem, v.at("wk")), matmul(mem, v.at("wv")),
                          mask, heads, gated_key_scale(v.at("gate"), gated));
      Var h = l2_normalize_rows(add(x, att));
      return cross_entropy(scale(matmul(h, v.at("wo")), 3.0), targets);
    };
    const auto r = gradient_check(p, loss);
    if (r.max_rel_error > 1e-4) MESSAGE(trial << " " << r.worst_param << " " << r.max_rel_error << " heads " << heads << " gate " << p.at("gate").item() << " n " << n << " m " << m << " d " << d);
    worst = std::max(worst, r.max_rel_error);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("gradient check: reductions and transposes") {
  std::mt19937_64 rng(8);
  NamedTensors p{{"a", random_normal({3, 4}, 1.0, rng)}, {"b", random_normal({3, 4}, 1.0, rng)}};
  const Tensor w = random_normal({4, 4}, 1.0, rng);
  auto loss = [&](Graph& g, const BoundVars& v) {
    Var s = matmul(v.at("a"), transpose(v.at("b")));
    Var t = sub(mean_rows(mul(v.at("a"), v.at("b"))), mean_rows(v.at("b")));
    return add(mean(mul(s, s)), sum(matmul(t, g.constant(w))));
  };
  CHECK(gradient_check(p, loss).max_rel_error < 1e-4);
}

TEST_CASE("graph rejects non-finite outputs") {
  Graph g;
  Var x = g.constant(Tensor::matrix(1, 1, {1e300}));
  CHECK_THROWS_AS(mul(x, x), NumericError);
}
