#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "plada/data.hpp"
#include "plada/harness.hpp"
#include "plada/model.hpp"

using namespace plada;
using namespace plada::nn;

namespace {

BackboneConfig small_cfg() {
  BackboneConfig c;
  c.depth = 2;
  c.dim = 16;
  c.heads = 2;
  c.patch = 32;  // 4 image tokens
  c.n_b2e = 1;
  c.pool_size = 2;
  c.prompt_len = 4;
  return c;
}

Tensor random_images(Rng& rng, int b) {
  Tensor t = Tensor::zeros({b, 3, 64, 64});
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform();
  return t;
}

int64_t registry_param_count(const Model& m) {
  int64_t n = 0;
  for (auto& [name, t] : param_registry(m.params)) {
    (void)name;
    n += t->numel();
  }
  return n;
}

// Closed-form parameter count for a given config under the standard plan.
int64_t analytic_param_count(const BackboneConfig& c) {
  const int64_t d = c.dim, t = c.tokens(), p = c.patch * c.patch * 3;
  const int64_t dh = d / c.heads, hid = 2 * d;
  int64_t total = p * d + d;      // patch embedding
  total += t * d + d + 2 * d;     // positional, class, visual tokens
  for (int i = 0; i < c.depth; ++i) {
    total += 2 * d + 2 * d;       // two layernorms
    total += 4 * d * d;           // attention projections
    total += 2 * c.pool_size * c.prompt_len * d;  // guide prompt pool
    if (i < c.n_b2e) {
      total += c.heads * (3 * dh * dh + dh);      // per-head convs
      total += d * hid + hid + hid * d + d;       // cg mlp
      total += 3 * d * d + d;                     // generic conv
    }
    total += d * hid + hid + hid * d + d;         // block mlp
  }
  total += 2 * d;        // final layernorm
  total += 2 * (d + 1);  // two heads
  return total;
}

}  // namespace

TEST_CASE("build_model: parameter count matches the closed form") {
  BackboneConfig def;  // depth 8, dim 128, heads 4, patch 8, n_b2e 2, pool 4, len 32
  Model m = build_model(def, 0);
  CHECK(registry_param_count(m) == analytic_param_count(def));

  BackboneConfig sc = small_cfg();
  Model ms = build_model(sc, 1);
  CHECK(registry_param_count(ms) == analytic_param_count(sc));
}

TEST_CASE("build_model: bitwise deterministic and validated") {
  BackboneConfig c = small_cfg();
  Model a = build_model(c, 7), b = build_model(c, 7);
  auto ra = param_registry(a.params), rb = param_registry(b.params);
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].first == rb[i].first);
    CHECK(*ra[i].second->buf == *rb[i].second->buf);
  }
  Model d = build_model(c, 8);
  bool any_diff = false;
  auto rd = param_registry(d.params);
  for (size_t i = 0; i < ra.size() && !any_diff; ++i)
    any_diff = *ra[i].second->buf != *rd[i].second->buf;
  CHECK(any_diff);

  BackboneConfig bad = c;
  bad.heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(static_cast<void>(build_model(bad, 0)), ConfigError);
  bad = c;
  bad.patch = 24;
  CHECK_THROWS_AS(static_cast<void>(build_model(bad, 0)), ConfigError);
}

TEST_CASE("forward: zero image is finite, logit shapes, paired branch") {
  BackboneConfig c = small_cfg();
  Model m = build_model(c, 0);
  Tensor zero = Tensor::zeros({3, 3, 64, 64});
  Rng rng(1);
  ForwardOptions opt;
  opt.select = SelectMode::FullAverage;
  ForwardOutput out = forward(c, m.plan, m.params, zero, {0, 2}, opt, rng);
  CHECK(out.h_rf.shape == Shape{3, c.dim});
  CHECK(out.logit_rf.shape == Shape{3, 1});
  CHECK(out.h_cmp.shape == Shape{2, c.dim});
  CHECK(out.logit_cmp.shape == Shape{2, 1});
  for (int64_t i = 0; i < out.logit_rf.numel(); ++i) CHECK(std::isfinite(out.logit_rf.data()[i]));

  // no paired rows: the compression branch is absent
  ForwardOutput out2 = forward(c, m.plan, m.params, zero, {}, opt, rng);
  CHECK(!out2.h_cmp.defined());
  CHECK(!out2.logit_cmp.defined());
}

TEST_CASE("layer plan: construction and execution trace") {
  BackboneConfig c = small_cfg();
  c.depth = 4;
  c.n_b2e = 2;

  auto plan = default_plan(c);
  CHECK(plan_str(plan) == "rg+cg,rg+cg,rg,rg");
  CHECK(parse_plan("rg+cg,rg+cg,rg,rg") == plan);
  CHECK(plan_str(plan_for(c, 0, 0)) == "plain,plain,plain,plain");
  CHECK(plan_str(plan_for(c, 4, 0)) == "rg,rg,rg,rg");
  CHECK(plan_str(plan_for(c, 0, 2)) == "plain+cg,plain+cg,plain,plain");

  Model m = build_model(c, 3);
  Rng rng(0);
  Tensor imgs = random_images(rng, 2);
  ForwardOptions opt;
  opt.select = SelectMode::FullAverage;
  std::vector<std::string> trace;
  opt.trace = &trace;
  Rng rng2(5);
  forward(c, m.plan, m.params, imgs, {}, opt, rng2);
  CHECK(trace == std::vector<std::string>{"rg+cg", "rg+cg", "rg", "rg"});
}

TEST_CASE("gradient reversal: backbone gradients negate exactly, head gradients match") {
  BackboneConfig c = small_cfg();
  Model m = build_model(c, 0);
  Rng rng(2);
  Tensor imgs = random_images(rng, 4);
  std::vector<int> paired = {0, 1, 3};
  Tensor targets = Tensor::from({3, 1}, {1, 0, 1});

  auto run_graph = [&](bool reversed) {
    Tape tape;
    ModelParams watched = watch_params(m.params, tape);
    ForwardOptions opt;
    opt.select = SelectMode::FullAverage;
    opt.with_reversal = reversed;
    Rng r2(9);
    ForwardOutput out = forward(c, m.plan, watched, imgs, paired, opt, r2);
    tape.backward(bce_with_logits(out.logit_cmp, targets));
    std::vector<std::pair<std::string, Tensor>> grads;
    for (auto& [name, t] : param_registry(watched)) grads.emplace_back(name, tape.grad(*t));
    return grads;
  };
  auto g_rev = run_graph(true);
  auto g_plain = run_graph(false);
  REQUIRE(g_rev.size() == g_plain.size());
  for (size_t i = 0; i < g_rev.size(); ++i) {
    const std::string& name = g_rev[i].first;
    const bool is_cmp_head = name.rfind("head.cmp", 0) == 0;
    for (int64_t e = 0; e < g_rev[i].second.numel(); ++e) {
      const double a = g_rev[i].second.data()[e];
      const double b = g_plain[i].second.data()[e];
      if (is_cmp_head)
        CHECK(a == b);
      else
        CHECK(std::fabs(a + b) <= 1e-12);
    }
  }
}

TEST_CASE("checkpoint: round-trip and validation") {
  BackboneConfig c = small_cfg();
  Model m = build_model(c, 11);
  const std::string path =
      (std::filesystem::temp_directory_path() / "plada_test_ckpt.plada").string();
  save_checkpoint(m, path);
  Model back = load_checkpoint(path);
  CHECK(back.cfg.depth == c.depth);
  CHECK(back.cfg.prompt_len == c.prompt_len);
  CHECK(plan_str(back.plan) == plan_str(m.plan));
  auto ra = param_registry(m.params), rb = param_registry(back.params);
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i) CHECK(*ra[i].second->buf == *rb[i].second->buf);

  // corrupt magic
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOTPLADA00000000";
  }
  CHECK_THROWS_AS(static_cast<void>(load_checkpoint(path)), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("predict: probabilities, determinism, untrained AUC near chance") {
  BackboneConfig c = small_cfg();
  c.depth = 2;
  c.dim = 32;
  c.heads = 2;
  c.patch = 16;
  Model m = build_model(c, 0);

  data::DatasetManifest tm;
  tm.seed = 404;
  tm.n_total = 200;
  data::Dataset test = data::make_test_set(tm, data::Protocol::parse("raw"));
  std::vector<const jpeg::Image*> imgs;
  std::vector<int> labels;
  for (const auto& s : test.samples) {
    imgs.push_back(&s.image);
    labels.push_back(s.y);
  }
  Tensor batch = data::images_to_tensor(imgs);
  std::vector<double> p1 = predict(m, batch);
  std::vector<double> p2 = predict(m, batch);
  CHECK(p1 == p2);
  for (double v : p1) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const double a = run::auc(p1, labels);
  CHECK(a >= 0.3);
  CHECK(a <= 0.7);
}

TEST_CASE("beam_pick: returns the loss-minimizing pool entry") {
  BackboneConfig c = small_cfg();
  Model m = build_model(c, 5);
  Rng rng(6);
  Tensor imgs = random_images(rng, 4);
  std::vector<double> y = {1, 0, 1, 0};
  const int pick = beam_pick(m, imgs, y);
  REQUIRE(pick >= 0);
  REQUIRE(pick < c.pool_size);
  // verify against direct scoring
  Tensor targets = Tensor::from({4, 1}, std::vector<double>(y));
  double best = 1e300;
  int best_j = -1;
  for (int j = 0; j < c.pool_size; ++j) {
    ForwardOptions opt;
    opt.select = SelectMode::Fixed;
    opt.fixed_index = j;
    Rng r2(0);
    ForwardOutput out = forward(c, m.plan, m.params, imgs, {}, opt, r2);
    const double loss = bce_with_logits(out.logit_rf, targets).scalar();
    if (loss < best) {
      best = loss;
      best_j = j;
    }
  }
  CHECK(pick == best_j);
}
