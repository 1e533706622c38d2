#include <cmath>
#include <vector>

#include "doctest.h"
#include "plada/attention.hpp"

using namespace plada;
using namespace plada::nn;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  REQUIRE(t.rank() == 2);
  Mat m(static_cast<size_t>(t.dim(0)), std::vector<double>(static_cast<size_t>(t.dim(1))));
  for (int i = 0; i < t.dim(0); ++i)
    for (int j = 0; j < t.dim(1); ++j)
      m[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.data()[i * t.dim(1) + j];
  return m;
}

Tensor rnd(Rng& rng, Shape s, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = scale * rng.uniform(-1, 1);
  return t;
}

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t k = 0; k < b.size(); ++k)
      for (size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Scalar-loop single-head attention with output projection; the independent
// reference for every variant below.
Mat naive_attn(const Mat& q, const Mat& k, const Mat& v, const Mat& wo) {
  const size_t tq = q.size(), tk = k.size(), d = q[0].size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Mat ctx(tq, std::vector<double>(d, 0.0));
  for (size_t i = 0; i < tq; ++i) {
    std::vector<double> s(tk, 0.0);
    double mx = -1e300;
    for (size_t j = 0; j < tk; ++j) {
      for (size_t c = 0; c < d; ++c) s[j] += q[i][c] * k[j][c];
      s[j] *= scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (size_t j = 0; j < tk; ++j) {
      s[j] = std::exp(s[j] - mx);
      z += s[j];
    }
    for (size_t j = 0; j < tk; ++j)
      for (size_t c = 0; c < d; ++c) ctx[i][c] += (s[j] / z) * v[j][c];
  }
  return mat_mul(ctx, wo);
}

double max_diff(const Mat& a, const Mat& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[0].size(); ++j) m = std::max(m, std::fabs(a[i][j] - b[i][j]));
  return m;
}

Mat concat_rows(const Mat& a, const Mat& b) {
  Mat c = a;
  c.insert(c.end(), b.begin(), b.end());
  return c;
}

double gelu_ref(double x) {
  const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

// Cross-correlation over tokens, kernel 3, zero padding 1.
Mat naive_conv3(const Mat& x, const Tensor& kernel, const Tensor& bias) {
  const size_t t = x.size(), c_in = x[0].size();
  const size_t c_out = static_cast<size_t>(kernel.dim(2));
  Mat y(t, std::vector<double>(c_out, 0.0));
  for (size_t o = 0; o < t; ++o)
    for (size_t co = 0; co < c_out; ++co) {
      double acc = bias.data()[co];
      for (int kk = 0; kk < 3; ++kk) {
        const int src = static_cast<int>(o) - 1 + kk;
        if (src < 0 || src >= static_cast<int>(t)) continue;
        for (size_t ci = 0; ci < c_in; ++ci)
          acc += x[static_cast<size_t>(src)][ci] *
                 kernel.data()[(kk * static_cast<int>(c_in) + static_cast<int>(ci)) *
                                   static_cast<int>(c_out) +
                               static_cast<int>(co)];
      }
      y[o][co] = acc;
    }
  return y;
}

Mat naive_pool(const Mat& x, int out_len) {
  const int l = static_cast<int>(x.size());
  const size_t c = x[0].size();
  Mat y(static_cast<size_t>(out_len), std::vector<double>(c, 0.0));
  for (int o = 0; o < out_len; ++o) {
    const int s = (o * l) / out_len;
    const int e = ((o + 1) * l + out_len - 1) / out_len;
    for (int t = s; t < e; ++t)
      for (size_t ch = 0; ch < c; ++ch)
        y[static_cast<size_t>(o)][ch] += x[static_cast<size_t>(t)][ch] / (e - s);
  }
  return y;
}

struct SmallSetup {
  Tensor x, pk, pv;
  AttentionParams params;
  Mat xm, wq, wk, wv, wo, pkm, pvm;
};

SmallSetup make_small(Rng& rng, int t, int d, int lp) {
  SmallSetup s;
  s.x = rnd(rng, {t, d});
  s.pk = rnd(rng, {lp, d});
  s.pv = rnd(rng, {lp, d});
  s.params.heads = 1;
  s.params.w_q = rnd(rng, {d, d});
  s.params.w_k = rnd(rng, {d, d});
  s.params.w_v = rnd(rng, {d, d});
  s.params.w_o = rnd(rng, {d, d});
  s.xm = to_mat(s.x);
  s.wq = to_mat(s.params.w_q);
  s.wk = to_mat(s.params.w_k);
  s.wv = to_mat(s.params.w_v);
  s.wo = to_mat(s.params.w_o);
  s.pkm = to_mat(s.pk);
  s.pvm = to_mat(s.pv);
  return s;
}

}  // namespace

TEST_CASE("msa: single-key attention copies the value row") {
  Rng rng(1);
  const int d = 6;
  AttentionParams p;
  p.heads = 2;
  p.w_q = rnd(rng, {d, d});
  p.w_k = rnd(rng, {d, d});
  p.w_v = rnd(rng, {d, d});
  p.w_o = rnd(rng, {d, d});
  Tensor q = rnd(rng, {4, d});
  Tensor k = rnd(rng, {1, d});
  Tensor v = rnd(rng, {1, d});
  Tensor out = msa(q, k, v, p);
  // softmax over one key is 1 for every head, so each output row is v * W_O
  Mat expect = mat_mul(to_mat(v), to_mat(p.w_o));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(out.data()[i * d + j] ==
            doctest::Approx(expect[0][static_cast<size_t>(j)]).epsilon(1e-12));
}

TEST_CASE("msa: attention weights form a convex combination (constant values)") {
  Rng rng(2);
  const int d = 4;
  AttentionParams p;
  p.heads = 1;
  p.w_q = rnd(rng, {d, d});
  p.w_k = rnd(rng, {d, d});
  p.w_v = rnd(rng, {d, d});
  p.w_o = rnd(rng, {d, d});
  Tensor q = rnd(rng, {3, d});
  Tensor k = rnd(rng, {5, d});
  Tensor v = Tensor::zeros({5, d});
  for (int j = 0; j < 5; ++j)
    for (int c = 0; c < d; ++c) v.data()[j * d + c] = 1.5 * c - 1.0;  // equal rows
  Tensor out = msa(q, k, v, p);
  Mat vrow(1, std::vector<double>(static_cast<size_t>(d)));
  for (int c = 0; c < d; ++c) vrow[0][static_cast<size_t>(c)] = 1.5 * c - 1.0;
  Mat expect = mat_mul(vrow, to_mat(p.w_o));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(out.data()[i * d + j] ==
            doctest::Approx(expect[0][static_cast<size_t>(j)]).epsilon(1e-12));
}

TEST_CASE("msa: gradient check on a 5-token, D=8, H=2 instance") {
  Rng rng(3);
  const int t = 5, d = 8;
  AttentionParams p;
  p.heads = 2;
  p.w_q = rnd(rng, {d, d});
  p.w_k = rnd(rng, {d, d});
  p.w_v = rnd(rng, {d, d});
  p.w_o = rnd(rng, {d, d});
  Tensor q = rnd(rng, {t, d});
  Tensor k = rnd(rng, {t, d});
  Tensor v = rnd(rng, {t, d});
  Tensor proj = rnd(rng, {t, d});

  Tape tape;
  Tensor tq = tape.watch(q), tk = tape.watch(k), tv = tape.watch(v);
  tape.backward(sum_all(mul(msa(tq, tk, tv, p), proj)));

  auto loss_at = [&]() { return sum_all(mul(msa(q, k, v, p), proj)).scalar(); };
  const double h = 1e-6;
  for (Tensor* input : {&q, &k, &v}) {
    Tensor g = tape.grad(input == &q ? tq : (input == &k ? tk : tv));
    for (int64_t e = 0; e < input->numel(); ++e) {
      const double keep = input->data()[e];
      input->data()[e] = keep + h;
      const double lp = loss_at();
      input->data()[e] = keep - h;
      const double lm = loss_at();
      input->data()[e] = keep;
      const double fd = (lp - lm) / (2 * h);
      CHECK(std::fabs(fd - g.data()[e]) /
                std::max({std::fabs(fd), std::fabs(g.data()[e]), 1e-2}) <=
            1e-4);
    }
  }
}

TEST_CASE("prompt_msa: oracle equivalence and zero-prompt renormalization") {
  Rng rng(4);
  SmallSetup s = make_small(rng, 3, 4, 2);

  // brute-force: raw prompts appended to projected keys/values
  Mat q = mat_mul(s.xm, s.wq);
  Mat k = concat_rows(mat_mul(s.xm, s.wk), s.pkm);
  Mat v = concat_rows(mat_mul(s.xm, s.wv), s.pvm);
  Mat expect = naive_attn(q, k, v, s.wo);
  Tensor got = prompt_msa(s.x, s.pk, s.pv, s.params);
  CHECK(got.shape == s.x.shape);
  CHECK(max_diff(to_mat(got), expect) < 1e-10);

  // zero prompts only add softmax mass on zero keys: each row shrinks by
  // Z_r / (Z_r + L_p) relative to plain attention
  Tensor zk = Tensor::zeros({2, 4}), zv = Tensor::zeros({2, 4});
  Tensor with_zero = prompt_msa(s.x, zk, zv, s.params);
  Mat km = mat_mul(s.xm, s.wk);
  Mat plain = naive_attn(q, km, mat_mul(s.xm, s.wv), s.wo);
  for (size_t i = 0; i < 3; ++i) {
    double z = 0.0, mx = -1e300;
    std::vector<double> sc(km.size());
    for (size_t j = 0; j < km.size(); ++j) {
      sc[j] = 0;
      for (size_t c = 0; c < 4; ++c) sc[j] += q[i][c] * km[j][c];
      sc[j] /= 2.0;  // sqrt(D) = 2
      mx = std::max(mx, sc[j]);
    }
    const double mref = std::max(mx, 0.0);  // zero keys score 0
    for (double v2 : sc) z += std::exp(v2 - mref);
    const double shrink = z / (z + 2.0 * std::exp(0.0 - mref));
    for (size_t c = 0; c < 4; ++c)
      CHECK(with_zero.data()[i * 4 + c] == doctest::Approx(plain[i][c] * shrink).epsilon(1e-9));
  }
}

TEST_CASE("residual_guidance: oracle equivalence, zero cases") {
  Rng rng(5);
  SmallSetup s = make_small(rng, 3, 4, 2);

  Mat q = mat_mul(s.xm, s.wq);
  Mat h_plain = naive_attn(q, mat_mul(s.xm, s.wk), mat_mul(s.xm, s.wv), s.wo);
  // prompt branch projects the prompts through the key/value maps
  Mat h_prompt = naive_attn(q, mat_mul(s.pkm, s.wk), mat_mul(s.pvm, s.wv), s.wo);
  Tensor got = residual_guidance(s.x, s.pk, s.pv, s.params);
  CHECK(got.shape == s.x.shape);
  for (size_t i = 0; i < 3; ++i)
    for (size_t j = 0; j < 4; ++j)
      CHECK(got.data()[i * 4 + j] ==
            doctest::Approx(h_plain[i][j] + h_prompt[i][j]).epsilon(1e-10));

  // zero prompts: the prompt branch value stream vanishes, leaving plain MSA
  Tensor zk = Tensor::zeros({2, 4}), zv = Tensor::zeros({2, 4});
  Tensor rg_zero = residual_guidance(s.x, zk, zv, s.params);
  Tensor plain = msa(matmul(s.x, s.params.w_q), matmul(s.x, s.params.w_k),
                     matmul(s.x, s.params.w_v), s.params);
  for (int64_t i = 0; i < plain.numel(); ++i)
    CHECK(rg_zero.data()[i] == doctest::Approx(plain.data()[i]).epsilon(1e-12));

  // zero value projection forces h_rg == plain output (both value streams die)
  AttentionParams pz = s.params;
  pz.w_v = Tensor::zeros({4, 4});
  Tensor rg_wv0 = residual_guidance(s.x, s.pk, s.pv, pz);
  Tensor plain_wv0 = msa(matmul(s.x, pz.w_q), matmul(s.x, pz.w_k), matmul(s.x, pz.w_v), pz);
  for (int64_t i = 0; i < plain_wv0.numel(); ++i)
    CHECK(rg_wv0.data()[i] == doctest::Approx(plain_wv0.data()[i]).epsilon(1e-14));
}

TEST_CASE("coordination_guidance: oracle equivalence and zero prompts") {
  Rng rng(6);
  const int t = 5, d = 4, lp = 2;
  SmallSetup s = make_small(rng, t, d, lp);
  CgParams cg;
  cg.head_conv_w.push_back(rnd(rng, {3, d, d}));
  cg.head_conv_b.push_back(rnd(rng, {d}));
  cg.mlp_w1 = rnd(rng, {d, 2 * d});
  cg.mlp_b1 = rnd(rng, {2 * d});
  cg.mlp_w2 = rnd(rng, {2 * d, d});
  cg.mlp_b2 = rnd(rng, {d});
  cg.g_conv_w = rnd(rng, {3, d, d});
  cg.g_conv_b = rnd(rng, {d});

  Tensor h_prev = rnd(rng, {t, d});
  Mat hm = to_mat(h_prev);

  // head-specific stream (single head: one token conv), pooled, gated by the
  // key prompt
  Mat fs = naive_pool(naive_conv3(hm, cg.head_conv_w[0], cg.head_conv_b[0]), lp);
  Mat fk(lp, std::vector<double>(d));
  for (int i = 0; i < lp; ++i)
    for (int j = 0; j < d; ++j)
      fk[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          s.pkm[static_cast<size_t>(i)][static_cast<size_t>(j)] *
          fs[static_cast<size_t>(i)][static_cast<size_t>(j)];
  // generic stream: MLP then conv, pooled, gated by the value prompt
  Mat g1(t, std::vector<double>(2 * d, 0.0));
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < 2 * d; ++j) {
      double acc = cg.mlp_b1.data()[j];
      for (int c = 0; c < d; ++c)
        acc += hm[static_cast<size_t>(i)][static_cast<size_t>(c)] * cg.mlp_w1.data()[c * 2 * d + j];
      g1[static_cast<size_t>(i)][static_cast<size_t>(j)] = gelu_ref(acc);
    }
  Mat g2(t, std::vector<double>(d, 0.0));
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = cg.mlp_b2.data()[j];
      for (int c = 0; c < 2 * d; ++c)
        acc += g1[static_cast<size_t>(i)][static_cast<size_t>(c)] * cg.mlp_w2.data()[c * d + j];
      g2[static_cast<size_t>(i)][static_cast<size_t>(j)] = acc;
    }
  Mat gs = naive_pool(naive_conv3(g2, cg.g_conv_w, cg.g_conv_b), lp);
  Mat fv(lp, std::vector<double>(d));
  for (int i = 0; i < lp; ++i)
    for (int j = 0; j < d; ++j)
      fv[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          s.pvm[static_cast<size_t>(i)][static_cast<size_t>(j)] *
          gs[static_cast<size_t>(i)][static_cast<size_t>(j)];

  Mat q = mat_mul(s.xm, s.wq);
  Mat expect = naive_attn(q, concat_rows(mat_mul(s.xm, s.wk), fk),
                          concat_rows(mat_mul(s.xm, s.wv), fv), s.wo);
  Tensor got = coordination_guidance(h_prev, s.x, s.pk, s.pv, s.params, cg);
  CHECK(got.shape == s.x.shape);
  CHECK(max_diff(to_mat(got), expect) < 1e-10);

  // zero prompts null the injected rows
  Tensor zk = Tensor::zeros({lp, d}), zv = Tensor::zeros({lp, d});
  Tensor got_zero = coordination_guidance(h_prev, s.x, zk, zv, s.params, cg);
  Mat zrows(lp, std::vector<double>(d, 0.0));
  Mat expect_zero = naive_attn(q, concat_rows(mat_mul(s.xm, s.wk), zrows),
                               concat_rows(mat_mul(s.xm, s.wv), zrows), s.wo);
  CHECK(max_diff(to_mat(got_zero), expect_zero) < 1e-10);
}

TEST_CASE("select_prompt: modes, determinism, errors") {
  Rng rng(7);
  GuidePromptPool pool;
  for (int i = 0; i < 4; ++i)
    pool.entries.emplace_back(Tensor::full({2, 3}, i + 1.0), Tensor::full({2, 3}, -(i + 1.0)));

  // N=1: all modes return the single entry
  GuidePromptPool one;
  one.entries.emplace_back(Tensor::full({2, 3}, 5.0), Tensor::full({2, 3}, 6.0));
  for (SelectMode m : {SelectMode::Random, SelectMode::FullAverage, SelectMode::HalfAverage}) {
    Rng r2(1);
    auto [k, v] = select_prompt(one, m, &r2);
    CHECK(k.data()[0] == 5.0);
    CHECK(v.data()[0] == 6.0);
  }

  // FA over all entries: mean of 1..4 = 2.5
  auto [fk, fv] = select_prompt(pool, SelectMode::FullAverage, nullptr);
  CHECK(fk.data()[0] == doctest::Approx(2.5));
  CHECK(fv.data()[0] == doctest::Approx(-2.5));

  // HA: first ceil(4/2)=2 entries by index: mean of 1,2
  auto [hk, hv] = select_prompt(pool, SelectMode::HalfAverage, nullptr);
  CHECK(hk.data()[0] == doctest::Approx(1.5));
  CHECK(hv.data()[0] == doctest::Approx(-1.5));

  // seeded random selection reproduces
  Rng ra(11), rb(11);
  std::vector<int> seq_a, seq_b;
  for (int i = 0; i < 10; ++i) {
    int pa = -1, pb = -1;
    select_prompt(pool, SelectMode::Random, &ra, -1, &pa);
    select_prompt(pool, SelectMode::Random, &rb, -1, &pb);
    seq_a.push_back(pa);
    seq_b.push_back(pb);
  }
  CHECK(seq_a == seq_b);

  GuidePromptPool empty;
  CHECK_THROWS_AS(select_prompt(empty, SelectMode::Random, &ra), ConfigError);
}

TEST_CASE("pool gradients flow only to the selected entry in random mode") {
  Rng rng(8);
  const int d = 4, lp = 2;
  SmallSetup s = make_small(rng, 3, d, lp);
  GuidePromptPool pool;
  for (int i = 0; i < 3; ++i) pool.entries.emplace_back(rnd(rng, {lp, d}), rnd(rng, {lp, d}));

  Tape tape;
  GuidePromptPool watched;
  for (auto& [k, v] : pool.entries) watched.entries.emplace_back(tape.watch(k), tape.watch(v));
  Rng sel(3);
  int picked = -1;
  auto [pk, pv] = select_prompt(watched, SelectMode::Random, &sel, -1, &picked);
  REQUIRE(picked >= 0);
  tape.backward(sum_all(residual_guidance(s.x, pk, pv, s.params)));
  for (int i = 0; i < 3; ++i) {
    Tensor gk = tape.grad(watched.entries[static_cast<size_t>(i)].first);
    Tensor gv = tape.grad(watched.entries[static_cast<size_t>(i)].second);
    double nk = 0, nv = 0;
    for (int64_t e = 0; e < gk.numel(); ++e) nk += std::fabs(gk.data()[e]);
    for (int64_t e = 0; e < gv.numel(); ++e) nv += std::fabs(gv.data()[e]);
    if (i == picked) {
      CHECK(nk > 0.0);
      CHECK(nv > 0.0);
    } else {
      CHECK(nk == 0.0);
      CHECK(nv == 0.0);
    }
  }
}

TEST_CASE("attention variants preserve token count and width in batch form") {
  Rng rng(9);
  const int b = 2, t = 6, d = 8, lp = 3;
  AttentionParams p;
  p.heads = 2;
  p.w_q = rnd(rng, {d, d});
  p.w_k = rnd(rng, {d, d});
  p.w_v = rnd(rng, {d, d});
  p.w_o = rnd(rng, {d, d});
  Tensor x = rnd(rng, {b, t, d});
  Tensor pk = rnd(rng, {lp, d}), pv = rnd(rng, {lp, d});
  CHECK(prompt_msa(x, pk, pv, p).shape == Shape{b, t, d});
  Tensor rg = residual_guidance(x, pk, pv, p);
  CHECK(rg.shape == Shape{b, t, d});
  CgParams cg;
  const int dh = d / p.heads;
  for (int h = 0; h < p.heads; ++h) {
    cg.head_conv_w.push_back(rnd(rng, {3, dh, dh}));
    cg.head_conv_b.push_back(rnd(rng, {dh}));
  }
  cg.mlp_w1 = rnd(rng, {d, 2 * d});
  cg.mlp_b1 = rnd(rng, {2 * d});
  cg.mlp_w2 = rnd(rng, {2 * d, d});
  cg.mlp_b2 = rnd(rng, {d});
  cg.g_conv_w = rnd(rng, {3, d, d});
  cg.g_conv_b = rnd(rng, {d});
  CHECK(coordination_guidance(rg, x, pk, pv, p, cg).shape == Shape{b, t, d});
}
