#include <cmath>
#include <functional>

#include "plada/oda.hpp"
#include "plada/tensor.hpp"

namespace plada {

namespace {

struct OpCase {
  std::string name;
  double tol;
  std::function<std::vector<Tensor>(Rng&)> make_inputs;
  std::function<Tensor(const std::vector<Tensor>&)> apply;
  std::vector<bool> check_mask;     // empty = check every input
  double expected_ratio = 1.0;      // tape grad / FD grad (reverse_gradient: its scale)
};

Tensor rnd(Rng& rng, Shape s, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

Tensor rnd_away_from_zero(Rng& rng, Shape s, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) {
    double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    t.data()[i] = sign * rng.uniform(lo, hi);
  }
  return t;
}

double eval_projected(const OpCase& op, const std::vector<Tensor>& inputs, const Tensor& proj) {
  Tensor out = op.apply(inputs);
  double acc = 0.0;
  for (int64_t i = 0; i < out.numel(); ++i) acc += out.data()[i] * proj.data()[i];
  return acc;
}

double check_case(const OpCase& op, std::vector<Tensor> inputs, Rng& rng) {
  // Fixed random projection makes the scalar loss sensitive to layout bugs
  // that a plain sum would hide.
  Tensor probe_out = op.apply(inputs);
  Tensor proj = rnd(rng, probe_out.shape, -1.0, 1.0);

  Tape tape;
  std::vector<Tensor> tracked;
  for (size_t i = 0; i < inputs.size(); ++i) {
    bool track = op.check_mask.empty() || op.check_mask[i];
    tracked.push_back(track ? tape.watch(inputs[i]) : inputs[i]);
  }
  Tensor out = op.apply(tracked);
  Tensor loss = sum_all(mul(out, proj));
  tape.backward(loss);

  const double h = 1e-6;
  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (!(op.check_mask.empty() || op.check_mask[i])) continue;
    Tensor g = tape.grad(tracked[i]);
    double* vals = inputs[i].data();
    for (int64_t e = 0; e < inputs[i].numel(); ++e) {
      const double keep = vals[e];
      vals[e] = keep + h;
      const double lp = eval_projected(op, inputs, proj);
      vals[e] = keep - h;
      const double lm = eval_projected(op, inputs, proj);
      vals[e] = keep;
      const double fd = (lp - lm) / (2.0 * h) * op.expected_ratio;
      const double tg = g.data()[e];
      const double rel = std::fabs(fd - tg) / std::max({std::fabs(fd), std::fabs(tg), 1e-2});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> ops;
  auto pair_same = [](Rng& rng, Shape s) {
    return std::vector<Tensor>{rnd(rng, s), rnd(rng, s)};
  };
  auto shp23 = [](Rng& rng) {
    return Shape{static_cast<int>(rng.uniform_int(2, 4)), static_cast<int>(rng.uniform_int(2, 5))};
  };

  ops.push_back({"add", 1e-5,
                 [=](Rng& r) { return pair_same(r, shp23(r)); },
                 [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }, {}, 1.0});
  ops.push_back({"sub", 1e-5,
                 [=](Rng& r) { return pair_same(r, shp23(r)); },
                 [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); }, {}, 1.0});
  ops.push_back({"mul", 1e-5,
                 [=](Rng& r) { return pair_same(r, shp23(r)); },
                 [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); }, {}, 1.0});
  ops.push_back({"div", 1e-5,
                 [=](Rng& r) {
                   Shape s = shp23(r);
                   return std::vector<Tensor>{rnd(r, s), rnd_away_from_zero(r, s, 0.5, 2.0)};
                 },
                 [](const std::vector<Tensor>& in) { return div(in[0], in[1]); }, {}, 1.0});
  ops.push_back({"adds", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r))}; },
                 [](const std::vector<Tensor>& in) { return adds(in[0], 0.37); }, {}, 1.0});
  ops.push_back({"muls", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r))}; },
                 [](const std::vector<Tensor>& in) { return muls(in[0], -1.3); }, {}, 1.0});
  ops.push_back({"exp", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r), -1.5, 1.5)}; },
                 [](const std::vector<Tensor>& in) { return exp_(in[0]); }, {}, 1.0});
  ops.push_back({"log", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r), 0.4, 3.0)}; },
                 [](const std::vector<Tensor>& in) { return log_(in[0]); }, {}, 1.0});
  ops.push_back({"sqrt", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r), 0.3, 4.0)}; },
                 [](const std::vector<Tensor>& in) { return sqrt_(in[0]); }, {}, 1.0});
  ops.push_back({"abs", 1e-4,
                 [=](Rng& r) { return std::vector<Tensor>{rnd_away_from_zero(r, shp23(r), 0.2, 2.0)}; },
                 [](const std::vector<Tensor>& in) { return abs_(in[0]); }, {}, 1.0});
  ops.push_back({"sigmoid", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r), -4.0, 4.0)}; },
                 [](const std::vector<Tensor>& in) { return sigmoid(in[0]); }, {}, 1.0});
  ops.push_back({"gelu", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r), -3.0, 3.0)}; },
                 [](const std::vector<Tensor>& in) { return gelu(in[0]); }, {}, 1.0});
  ops.push_back({"pow_const", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r), 0.3, 2.5)}; },
                 [](const std::vector<Tensor>& in) { return pow_const(in[0], 1.7); }, {}, 1.0});
  ops.push_back({"matmul", 1e-5,
                 [](Rng& r) {
                   int m = static_cast<int>(r.uniform_int(1, 5));
                   int k = static_cast<int>(r.uniform_int(1, 5));
                   int n = static_cast<int>(r.uniform_int(1, 5));
                   return std::vector<Tensor>{rnd(r, {m, k}), rnd(r, {k, n})};
                 },
                 [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); }, {}, 1.0});
  ops.push_back({"bmm", 1e-5,
                 [](Rng& r) {
                   int N = static_cast<int>(r.uniform_int(1, 3));
                   int m = static_cast<int>(r.uniform_int(1, 4));
                   int k = static_cast<int>(r.uniform_int(1, 4));
                   int n = static_cast<int>(r.uniform_int(1, 4));
                   return std::vector<Tensor>{rnd(r, {N, m, k}), rnd(r, {N, k, n})};
                 },
                 [](const std::vector<Tensor>& in) { return bmm(in[0], in[1]); }, {}, 1.0});
  ops.push_back({"bmm_nt", 1e-5,
                 [](Rng& r) {
                   int N = static_cast<int>(r.uniform_int(1, 3));
                   int m = static_cast<int>(r.uniform_int(1, 4));
                   int k = static_cast<int>(r.uniform_int(1, 4));
                   int n = static_cast<int>(r.uniform_int(1, 4));
                   return std::vector<Tensor>{rnd(r, {N, m, k}), rnd(r, {N, n, k})};
                 },
                 [](const std::vector<Tensor>& in) { return bmm_nt(in[0], in[1]); }, {}, 1.0});
  ops.push_back({"reshape", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd(r, {2, 6})}; },
                 [](const std::vector<Tensor>& in) { return reshape(in[0], {3, 4}); }, {}, 1.0});
  ops.push_back({"permute", 1e-5,
                 [](Rng& r) {
                   return std::vector<Tensor>{rnd(r, {static_cast<int>(r.uniform_int(2, 3)),
                                                      static_cast<int>(r.uniform_int(2, 3)),
                                                      static_cast<int>(r.uniform_int(2, 3))})};
                 },
                 [](const std::vector<Tensor>& in) { return permute(in[0], {2, 0, 1}); }, {}, 1.0});
  ops.push_back({"concat", 1e-5,
                 [](Rng& r) {
                   int d = static_cast<int>(r.uniform_int(2, 4));
                   return std::vector<Tensor>{rnd(r, {2, d}), rnd(r, {3, d}), rnd(r, {1, d})};
                 },
                 [](const std::vector<Tensor>& in) { return concat({in[0], in[1], in[2]}, 0); },
                 {}, 1.0});
  ops.push_back({"slice", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd(r, {4, 6})}; },
                 [](const std::vector<Tensor>& in) { return slice(in[0], 1, 2, 3); }, {}, 1.0});
  ops.push_back({"rows_select", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd(r, {5, 3})}; },
                 [](const std::vector<Tensor>& in) { return rows_select(in[0], {4, 0, 2, 0}); },
                 {}, 1.0});
  ops.push_back({"tile_rows", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd(r, {2, 3})}; },
                 [](const std::vector<Tensor>& in) { return tile_rows(in[0], 3); }, {}, 1.0});
  ops.push_back({"add_rowvec", 1e-5,
                 [](Rng& r) {
                   int d = static_cast<int>(r.uniform_int(2, 5));
                   return std::vector<Tensor>{rnd(r, {4, d}), rnd(r, {d})};
                 },
                 [](const std::vector<Tensor>& in) { return add_rowvec(in[0], in[1]); }, {}, 1.0});
  ops.push_back({"sum", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r))}; },
                 [](const std::vector<Tensor>& in) { return sum_all(in[0]); }, {}, 1.0});
  ops.push_back({"mean", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r))}; },
                 [](const std::vector<Tensor>& in) { return mean_all(in[0]); }, {}, 1.0});
  ops.push_back({"sum_squares", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r))}; },
                 [](const std::vector<Tensor>& in) { return sum_squares(in[0]); }, {}, 1.0});
  ops.push_back({"sum_axis", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4, 2})}; },
                 [](const std::vector<Tensor>& in) { return sum_axis(in[0], 1); }, {}, 1.0});
  ops.push_back({"mean_axis", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 4, 2})}; },
                 [](const std::vector<Tensor>& in) { return mean_axis(in[0], 0); }, {}, 1.0});
  ops.push_back({"softmax", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd(r, {3, 5}, -3.0, 3.0)}; },
                 [](const std::vector<Tensor>& in) { return softmax(in[0], 1); }, {}, 1.0});
  ops.push_back({"layernorm", 1e-5,
                 [](Rng& r) {
                   int d = static_cast<int>(r.uniform_int(3, 6));
                   return std::vector<Tensor>{rnd(r, {3, d}), rnd(r, {d}, 0.5, 1.5),
                                              rnd(r, {d})};
                 },
                 [](const std::vector<Tensor>& in) { return layernorm(in[0], in[1], in[2]); },
                 {}, 1.0});
  ops.push_back({"conv1d", 1e-5,
                 [](Rng& r) {
                   int L = static_cast<int>(r.uniform_int(5, 8));
                   int C = static_cast<int>(r.uniform_int(2, 3));
                   int Co = static_cast<int>(r.uniform_int(2, 3));
                   return std::vector<Tensor>{rnd(r, {2, L, C}), rnd(r, {3, C, Co})};
                 },
                 [](const std::vector<Tensor>& in) { return conv1d(in[0], in[1], 1, 1); }, {},
                 1.0});
  ops.push_back({"conv1d_strided", 1e-5,
                 [](Rng& r) {
                   int L = static_cast<int>(r.uniform_int(6, 9));
                   return std::vector<Tensor>{rnd(r, {L, 2}), rnd(r, {3, 2, 2})};
                 },
                 [](const std::vector<Tensor>& in) { return conv1d(in[0], in[1], 2, 0); }, {},
                 1.0});
  ops.push_back({"adaptive_avg_pool1d", 1e-5,
                 [](Rng& r) {
                   int L = static_cast<int>(r.uniform_int(5, 9));
                   return std::vector<Tensor>{rnd(r, {2, L, 3})};
                 },
                 [](const std::vector<Tensor>& in) { return adaptive_avg_pool1d(in[0], 3); }, {},
                 1.0});
  ops.push_back({"bce_with_logits", 1e-5,
                 [](Rng& r) {
                   Tensor logits = rnd(r, {6, 1}, -3.0, 3.0);
                   Tensor targets = Tensor::zeros({6, 1});
                   for (int i = 0; i < 6; ++i)
                     targets.data()[i] = r.uniform() < 0.5 ? 0.0 : 1.0;
                   return std::vector<Tensor>{logits, targets};
                 },
                 [](const std::vector<Tensor>& in) { return bce_with_logits(in[0], in[1]); },
                 {true, false}, 1.0});
  ops.push_back({"pairwise_sqdist", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd(r, {4, 3})}; },
                 [](const std::vector<Tensor>& in) { return pairwise_sqdist(in[0]); }, {}, 1.0});
  ops.push_back({"psi", 1e-5,
                 [](Rng& r) { return std::vector<Tensor>{rnd_away_from_zero(r, {3, 4}, 0.3, 2.0)}; },
                 [](const std::vector<Tensor>& in) { return oda::psi(in[0]); }, {}, 1.0});
  // Deliberately inverted backward: the tape gradient must equal scale x the
  // identity-path finite difference.
  ops.push_back({"reverse_gradient", 1e-5,
                 [=](Rng& r) { return std::vector<Tensor>{rnd(r, shp23(r))}; },
                 [](const std::vector<Tensor>& in) { return reverse_gradient(in[0], -1.0); }, {},
                 -1.0});
  return ops;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(uint64_t seed, int instances) {
  std::vector<GradCheckResult> results;
  for (const OpCase& op : op_cases()) {
    GradCheckResult res;
    res.op = op.name;
    res.tolerance = op.tol;
    for (int inst = 0; inst < instances; ++inst) {
      Rng rng = Rng::derive(seed, fnv1a64(reinterpret_cast<const uint8_t*>(op.name.data()),
                                          op.name.size()),
                            static_cast<uint64_t>(inst));
      std::vector<Tensor> inputs = op.make_inputs(rng);
      res.max_rel_err = std::max(res.max_rel_err, check_case(op, std::move(inputs), rng));
    }
    res.pass = res.max_rel_err <= res.tolerance;
    results.push_back(res);
  }
  return results;
}

}  // namespace plada
