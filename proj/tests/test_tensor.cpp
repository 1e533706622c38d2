#include <cmath>

#include "doctest.h"
#include "plada/tensor.hpp"

using namespace plada;

namespace {

Tensor rnd(Rng& rng, Shape s, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("matmul forward basics") {
  Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor v = Tensor::from({2, 1}, {3, 4});
  Tensor r = matmul(id, v);
  CHECK(r.shape == Shape{2, 1});
  CHECK(r.data()[0] == 3.0);
  CHECK(r.data()[1] == 4.0);

  Tensor a = Tensor::from({1, 2}, {1, 2});
  CHECK(matmul(a, v).data()[0] == doctest::Approx(11.0));

  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("matmul gradient of sum matches finite differences") {
  Rng rng(7);
  Tensor a = rnd(rng, {4, 5});
  Tensor b = rnd(rng, {5, 3});
  Tape tape;
  Tensor ta = tape.watch(a);
  Tensor loss = sum_all(matmul(ta, b));
  tape.backward(loss);
  Tensor g = tape.grad(ta);
  const double h = 1e-6;
  for (int64_t e = 0; e < a.numel(); ++e) {
    const double keep = a.data()[e];
    a.data()[e] = keep + h;
    double lp = sum_all(matmul(a, b)).scalar();
    a.data()[e] = keep - h;
    double lm = sum_all(matmul(a, b)).scalar();
    a.data()[e] = keep;
    const double fd = (lp - lm) / (2 * h);
    CHECK(std::fabs(fd - g.data()[e]) / std::max({std::fabs(fd), std::fabs(g.data()[e]), 1e-2}) <
          1e-5);
  }
}

TEST_CASE("softmax properties") {
  Tensor x = Tensor::from({3}, {0, 0, 0});
  Tensor s = softmax(x, 0);
  for (int i = 0; i < 3; ++i) CHECK(s.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor big = Tensor::from({3}, {1000, 0, 0});
  Tensor sb = softmax(big, 0);
  CHECK(sb.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sb.data()[1] <= 1e-12);

  Rng rng(3);
  Tensor r = rnd(rng, {5, 7}, -4, 4);
  Tensor sr = softmax(r, 1);
  for (int i = 0; i < 5; ++i) {
    double row = 0;
    for (int j = 0; j < 7; ++j) row += sr.data()[i * 7 + j];
    CHECK(std::fabs(row - 1.0) < 1e-12);
  }
}

TEST_CASE("layernorm closed forms") {
  Tensor gain = Tensor::full({2}, 1.0);
  Tensor bias = Tensor::zeros({2});
  Tensor x = Tensor::from({1, 2}, {1, 3});
  Tensor y = layernorm(x, gain, bias);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-4));

  Tensor c = Tensor::full({1, 4}, 5.0);
  Tensor g4 = Tensor::full({4}, 1.0), b4 = Tensor::zeros({4});
  Tensor yc = layernorm(c, g4, b4);
  for (int i = 0; i < 4; ++i) CHECK(yc.data()[i] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("conv1d hand cases") {
  // k=1 identity kernel reproduces the input
  Tensor x = Tensor::from({3, 1}, {1, 2, 3});
  Tensor k1 = Tensor::from({1, 1, 1}, {1});
  CHECK(max_abs_diff(conv1d(x, k1, 1, 0), x) == 0.0);

  Tensor k3 = Tensor::from({3, 1, 1}, {1, 1, 1});
  Tensor y = conv1d(x, k3, 1, 1);
  CHECK(y.data()[0] == 3.0);
  CHECK(y.data()[1] == 6.0);
  CHECK(y.data()[2] == 5.0);

  Tensor x1 = Tensor::from({1, 1}, {5});
  CHECK_THROWS_AS(conv1d(x1, k3, 1, 0), ConfigError);
}

TEST_CASE("bce_with_logits values and stability") {
  Tensor z0 = Tensor::from({1, 1}, {0.0});
  Tensor t1 = Tensor::from({1, 1}, {1.0});
  CHECK(bce_with_logits(z0, t1).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor z40 = Tensor::from({1, 1}, {40.0});
  CHECK(bce_with_logits(z40, t1).scalar() < 1e-12);
  CHECK(std::isfinite(bce_with_logits(z40, t1).scalar()));

  Tensor bad = Tensor::from({1, 1}, {0.5});
  CHECK_THROWS_AS(bce_with_logits(z0, bad), ValidationError);

  // gradient equals sigmoid(z) - t
  Rng rng(11);
  Tensor z = rnd(rng, {6, 1}, -3, 3);
  Tensor t = Tensor::zeros({6, 1});
  for (int i = 0; i < 6; ++i) t.data()[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Tape tape;
  Tensor tz = tape.watch(z);
  tape.backward(bce_with_logits(tz, t));
  Tensor g = tape.grad(tz);
  for (int i = 0; i < 6; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z.data()[i]));
    CHECK(g.data()[i] == doctest::Approx((s - t.data()[i]) / 6.0).epsilon(1e-10));
  }
}

TEST_CASE("reverse_gradient forward identity and backward negation") {
  Tensor x = Tensor::from({3}, {1, 2, 3});
  Tensor y = reverse_gradient(x, -1.0);
  CHECK(y.data() == x.data());  // bit-identity via shared buffer

  Tape tape;
  Tensor tx = tape.watch(x);
  tape.backward(sum_all(reverse_gradient(tx, -1.0)));
  Tensor g = tape.grad(tx);
  for (int i = 0; i < 3; ++i) CHECK(g.data()[i] == -1.0);

  CHECK_THROWS_AS(reverse_gradient(x, 0.5), ValidationError);

  // Linear-head composition: the backbone-side gradient is the exact
  // negation of the same graph without the reversal node.
  Rng rng(5);
  Tensor w = rnd(rng, {4, 1});
  Tensor inp = rnd(rng, {3, 4});
  Tensor targ = Tensor::from({3, 1}, {1, 0, 1});
  auto grad_of = [&](bool reversed) {
    Tape tp;
    Tensor ti = tp.watch(inp);
    Tensor feat = reversed ? reverse_gradient(ti, -1.0) : ti;
    tp.backward(bce_with_logits(matmul(feat, w), targ));
    return tp.grad(ti);
  };
  Tensor g_rev = grad_of(true), g_plain = grad_of(false);
  for (int64_t i = 0; i < g_rev.numel(); ++i) CHECK(g_rev.data()[i] == -g_plain.data()[i]);
}

TEST_CASE("backward populates leaves and is repeatable") {
  Rng rng(9);
  Tensor x = rnd(rng, {4});
  Tape tape;
  Tensor tx = tape.watch(x);
  Tensor unused = tape.watch(rnd(rng, {2}));
  Tensor loss = sum_all(mul(tx, tx));
  tape.backward(loss);
  Tensor g1 = tape.grad(tx);
  for (int i = 0; i < 4; ++i) CHECK(g1.data()[i] == doctest::Approx(2 * x.data()[i]));
  // untouched leaf gets zeros
  Tensor gu = tape.grad(unused);
  CHECK(gu.data()[0] == 0.0);
  CHECK(gu.data()[1] == 0.0);
  // deterministic repeat
  tape.backward(loss);
  Tensor g2 = tape.grad(tx);
  CHECK(max_abs_diff(g1, g2) == 0.0);

  Tensor vec = tape.watch(rnd(rng, {3}));
  CHECK_THROWS_AS(tape.backward(vec), Error);
}

TEST_CASE("loss = sum(x) gives all-ones gradient; x*x analytic") {
  Tensor x = Tensor::from({2}, {1, 2});
  Tape tape;
  Tensor tx = tape.watch(x);
  tape.backward(sum_all(tx));
  Tensor g = tape.grad(tx);
  CHECK(g.data()[0] == 1.0);
  CHECK(g.data()[1] == 1.0);

  Tape tape2;
  Tensor tx2 = tape2.watch(x);
  tape2.backward(sum_all(mul(tx2, tx2)));
  Tensor g2 = tape2.grad(tx2);
  CHECK(g2.data()[0] == doctest::Approx(2.0));
  CHECK(g2.data()[1] == doctest::Approx(4.0));
}

TEST_CASE("reshape is zero-copy and concat/slice round-trip") {
  Rng rng(13);
  Tensor x = rnd(rng, {2, 6});
  Tensor v = reshape(x, {3, 4});
  CHECK(v.data() == x.data());

  Tensor a = rnd(rng, {2, 3}), b = rnd(rng, {4, 3});
  Tensor c = concat({a, b}, 0);
  CHECK(max_abs_diff(slice(c, 0, 0, 2), a) == 0.0);
  CHECK(max_abs_diff(slice(c, 0, 2, 4), b) == 0.0);

  Tensor p = permute(rnd(rng, {2, 3, 4}), {2, 0, 1});
  CHECK(p.shape == Shape{4, 2, 3});
}

TEST_CASE("full gradcheck suite passes") {
  auto results = run_gradcheck(20240901, 20);
  CHECK(results.size() >= 30);
  for (const auto& r : results) {
    INFO(r.op, " max_rel_err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("adaptive pooling averages token bins") {
  Tensor x = Tensor::from({4, 1}, {1, 2, 3, 4});
  Tensor y = adaptive_avg_pool1d(x, 2);
  CHECK(y.data()[0] == doctest::Approx(1.5));
  CHECK(y.data()[1] == doctest::Approx(3.5));
  // uneven split: 5 -> 2 takes bins {0,1,2} and {2,3,4}... per floor/ceil rule
  Tensor x5 = Tensor::from({5, 1}, {1, 2, 3, 4, 5});
  Tensor y5 = adaptive_avg_pool1d(x5, 2);
  CHECK(y5.data()[0] == doctest::Approx(2.0));  // mean(1,2,3)
  CHECK(y5.data()[1] == doctest::Approx(4.0));  // mean(3,4,5)
}

TEST_CASE("bmm matches per-slice matmul") {
  Rng rng(17);
  Tensor a = rnd(rng, {3, 2, 4});
  Tensor b = rnd(rng, {3, 4, 5});
  Tensor c = bmm(a, b);
  for (int i = 0; i < 3; ++i) {
    Tensor ai = slice(a, 0, i, 1).viewed({2, 4});
    Tensor bi = slice(b, 0, i, 1).viewed({4, 5});
    Tensor ci = slice(c, 0, i, 1).viewed({2, 5});
    CHECK(max_abs_diff(matmul(ai, bi), ci) < 1e-12);
  }
}
