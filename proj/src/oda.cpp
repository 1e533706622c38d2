#include "plada/oda.hpp"

#include <algorithm>
#include <cmath>

namespace plada::oda {

namespace {

// Denominator guards: keep the limits sensible when a batch dimension or a
// pair of centers is degenerate, without perturbing the regular case.
constexpr double kTiny = 1e-24;

Tensor untracked_vec(const std::vector<double>& v) {
  return Tensor::from({static_cast<int>(v.size())}, std::vector<double>(v));
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid) - 1, v.end());
  return 0.5 * (v[mid - 1] + hi);
}

CenterSet centers_from_psi(const Tensor& psif, const BatchPartition& part) {
  CenterSet cs;
  for (int y = 0; y < 2; ++y)
    for (int yc = 0; yc < 2; ++yc) {
      const std::vector<int>& rows = part.sets[static_cast<size_t>(y)][static_cast<size_t>(yc)];
      cs.count[static_cast<size_t>(y)][static_cast<size_t>(yc)] = static_cast<int>(rows.size());
      if (rows.empty()) continue;
      cs.center[static_cast<size_t>(y)][static_cast<size_t>(yc)] =
          mean_axis(rows_select(psif, rows), 0);
    }
  return cs;
}

}  // namespace

Tensor psi(const Tensor& h) {
  if (h.rank() != 2) throw DimensionError("psi: input must be [B,D]");
  const int b = h.dim(0), d = h.dim(1);
  const double scale = std::sqrt(static_cast<double>(d));
  Tensor out = Tensor::zeros({b, d});
  // Row norms saved for the backward pass.
  std::vector<double> norms(static_cast<size_t>(b));
  const double* x = h.data();
  double* y = out.data();
  for (int r = 0; r < b; ++r) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += x[r * d + c] * x[r * d + c];
    double nrm = std::sqrt(s);
    norms[static_cast<size_t>(r)] = nrm;
    if (nrm == 0.0) continue;  // zero row stays zero
    const double f = scale / nrm;
    for (int c = 0; c < d; ++c) y[r * d + c] = x[r * d + c] * f;
  }
  if (Tape* tp = h.tape; h.tracked()) {
    out.tape = tp;
    Tensor sx = h;
    int xn = h.node;
    out.node = tp->record(out.shape, [sx, xn, norms, b, d, scale](Tape& t, int self) {
      const Tensor* g = t.grad_ptr(self);
      Tensor gx = Tensor::zeros(sx.shape);
      const double* gp = g->data();
      const double* x2 = sx.data();
      double* o = gx.data();
      for (int r = 0; r < b; ++r) {
        const double nrm = norms[static_cast<size_t>(r)];
        if (nrm == 0.0) continue;
        const double* xr = x2 + r * d;
        const double* gr = gp + r * d;
        double dot = 0.0;
        for (int c = 0; c < d; ++c) dot += xr[c] * gr[c];
        const double f = scale / nrm;
        const double q = dot / (nrm * nrm);
        for (int c = 0; c < d; ++c) o[r * d + c] = f * (gr[c] - xr[c] * q);
      }
      t.add_grad(xn, gx);
    });
  }
  return out;
}

CenterSet centers(const Tensor& features, const BatchPartition& part) {
  if (features.rank() != 2) throw DimensionError("centers: features must be [B,D]");
  if (part.total() != features.dim(0))
    throw DimensionError("centers: partition does not cover the batch");
  return centers_from_psi(psi(features), part);
}

BatchStats batch_stats(const Tensor& psi_features) {
  const int b = psi_features.dim(0), d = psi_features.dim(1);
  std::vector<double> mu(static_cast<size_t>(d), 0.0), sd(static_cast<size_t>(d), 0.0);
  const double* x = psi_features.data();
  for (int r = 0; r < b; ++r)
    for (int c = 0; c < d; ++c) mu[static_cast<size_t>(c)] += x[r * d + c];
  for (int c = 0; c < d; ++c) mu[static_cast<size_t>(c)] /= static_cast<double>(b);
  for (int r = 0; r < b; ++r)
    for (int c = 0; c < d; ++c) {
      double v = x[r * d + c] - mu[static_cast<size_t>(c)];
      sd[static_cast<size_t>(c)] += v * v;
    }
  for (int c = 0; c < d; ++c)
    sd[static_cast<size_t>(c)] = std::sqrt(sd[static_cast<size_t>(c)] / static_cast<double>(b));
  return {untracked_vec(mu), untracked_vec(sd)};
}

Tensor d_p(const Tensor& a, const Tensor& b, const DistanceConfig& cfg, const Tensor& mu,
           const Tensor& sigma) {
  if (a.shape != b.shape || a.rank() != 1)
    throw DimensionError("d_p: expected two [D] vectors");
  if (cfg.kind == DistanceKind::Cosine) {
    Tensor dot = sum_all(mul(a, b));
    Tensor na = sqrt_(adds(sum_all(mul(a, a)), kTiny));
    Tensor nb = sqrt_(adds(sum_all(mul(b, b)), kTiny));
    return adds(neg(div(dot, mul(na, nb))), 1.0);
  }
  if (cfg.p < 1.0) throw ConfigError("d_p: order p must be >= 1");
  const int d = a.dim(0);
  std::vector<double> denom(static_cast<size_t>(d)), lam_den(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) {
    denom[static_cast<size_t>(i)] = sigma.data()[i] + cfg.eps;
    lam_den[static_cast<size_t>(i)] = 2.0 * sigma.data()[i] * sigma.data()[i] + kTiny;
  }
  Tensor scaled = div(sub(a, b), untracked_vec(denom));
  Tensor powed = pow_const(abs_(scaled), cfg.p);
  Tensor da = sub(a, mu);
  Tensor lam = exp_(neg(div(mul(da, da), untracked_vec(lam_den))));
  Tensor s = sum_all(mul(lam, powed));
  return pow_const(s, 1.0 / cfg.p);
}

Tensor similarity_s(const Tensor& ci, const Tensor& cj, const DistanceConfig& cfg,
                    const BatchStats& stats) {
  if (cfg.tau <= 0.0) throw ConfigError("similarity_s: tau must be > 0");
  Tensor dist = d_p(ci, cj, cfg, stats.mu, stats.sigma);
  return pow_const(adds(muls(dist, cfg.tau), 1.0), -1.0);
}

Tensor hsic(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0))
    throw DimensionError("hsic: need paired [n,D] inputs");
  const int n = x.dim(0);
  if (n < 2) throw DimensionError("hsic: need n >= 2");

  auto gram = [n](const Tensor& t) {
    Tensor sq = pairwise_sqdist(t);
    std::vector<double> off;
    off.reserve(static_cast<size_t>(n) * (n - 1));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) off.push_back(sq.data()[static_cast<int64_t>(i) * n + j]);
    const double bw = std::max(median_of(std::move(off)), 1e-12);
    return exp_(muls(sq, -1.0 / (2.0 * bw)));
  };
  Tensor kx = gram(x);
  Tensor ly = gram(y);

  Tensor h = Tensor::full({n, n}, -1.0 / static_cast<double>(n));
  for (int i = 0; i < n; ++i) h.data()[static_cast<int64_t>(i) * n + i] += 1.0;
  Tensor kc = matmul(matmul(h, kx), h);
  Tensor lc = matmul(matmul(h, ly), h);
  // K and L are symmetric, so trace(K H L H) = sum(HKH .* HLH).
  const double scale = 1.0 / (static_cast<double>(n - 1) * static_cast<double>(n - 1));
  return muls(sum_all(mul(kc, lc)), scale);
}

LdisResult l_dis(const Tensor& features, const BatchPartition& part,
                 const std::array<std::vector<std::pair<int, int>>, 2>& pairs_by_class,
                 const LossConfig& cfg, double g_prev) {
  LdisResult res;
  // Clamped away from the endpoints so the sigmoid stays in (0,1) even when
  // the gradient norm saturates it in double precision.
  res.beta = std::clamp(1.0 / (1.0 + std::exp(-cfg.gamma * g_prev)), 1e-12, 1.0 - 1e-12);

  Tensor psif = psi(features);
  BatchStats stats = batch_stats(psif);
  CenterSet cs = centers_from_psi(psif, part);

  Tensor sim_sum;
  for (int yc : {1, 0}) {  // compressed state first, then raw
    const Tensor& c_real = cs.center[0][static_cast<size_t>(yc)];
    const Tensor& c_fake = cs.center[1][static_cast<size_t>(yc)];
    if (!c_real.defined() || !c_fake.defined()) continue;
    Tensor s = similarity_s(c_real, c_fake, cfg.dist, stats);
    sim_sum = sim_sum.defined() ? add(sim_sum, s) : s;
    ++res.sim_terms;
  }

  Tensor hsic_sum;
  for (int y = 0; y < 2; ++y) {
    const auto& pairs = pairs_by_class[static_cast<size_t>(y)];
    if (pairs.size() < 2) continue;
    std::vector<int> cmp_rows, raw_rows;
    for (const auto& pr : pairs) {
      cmp_rows.push_back(pr.first);
      raw_rows.push_back(pr.second);
    }
    Tensor term = hsic(rows_select(psif, cmp_rows), rows_select(psif, raw_rows));
    hsic_sum = hsic_sum.defined() ? add(hsic_sum, term) : term;
    ++res.hsic_terms;
  }

  if (sim_sum.defined()) res.sim_value = sim_sum.scalar();
  if (hsic_sum.defined()) res.hsic_value = hsic_sum.scalar();

  if (sim_sum.defined() && hsic_sum.defined())
    res.total = add(sim_sum, muls(hsic_sum, res.beta));
  else if (sim_sum.defined())
    res.total = sim_sum;
  else if (hsic_sum.defined())
    res.total = muls(hsic_sum, res.beta);
  else
    res.total = Tensor::zeros({1});
  return res;
}

Tensor total_loss(const Tensor& l_rf, const Tensor* l_cmp, const Tensor* l_dis_term,
                  const LossConfig& cfg, const std::vector<Tensor>& params) {
  Tensor acc = l_rf;
  if (l_cmp && l_cmp->defined()) acc = add(acc, *l_cmp);
  if (l_dis_term && l_dis_term->defined()) acc = add(acc, muls(*l_dis_term, cfg.alpha));
  if (cfg.weight_decay > 0.0) {
    Tensor reg;
    for (const Tensor& p : params) {
      Tensor s = sum_squares(p);
      reg = reg.defined() ? add(reg, s) : s;
    }
    if (reg.defined()) acc = add(acc, muls(reg, 0.5 * cfg.weight_decay));
  }
  return acc;
}

}  // namespace plada::oda
