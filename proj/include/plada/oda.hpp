#pragma once

#include <array>
#include <utility>

#include "plada/tensor.hpp"

namespace plada::oda {

// Index sets over a batch for the four states of
// {real, fake} x {raw, compressed}. sets[y][y_c], y: 0 real / 1 fake,
// y_c: 0 raw / 1 compressed. The sets are disjoint and cover the batch.
struct BatchPartition {
  std::array<std::array<std::vector<int>, 2>, 2> sets;
  int total() const {
    int n = 0;
    for (const auto& row : sets)
      for (const auto& s : row) n += static_cast<int>(s.size());
    return n;
  }
};

enum class DistanceKind { Minkowski, Cosine };

struct DistanceConfig {
  DistanceKind kind = DistanceKind::Minkowski;
  double p = 2.0;       // Minkowski order, >= 1
  double tau = 1.0;     // similarity temperature, > 0
  double eps = 1e-6;    // per-dimension scale stabilizer
};

struct LossConfig {
  double alpha = 0.004;        // weight on the alignment loss
  double gamma = 1.0;          // beta schedule coefficient
  double weight_decay = 1e-4;  // structural term coefficient
  DistanceConfig dist;
  std::string hsic_bandwidth = "median";
};

// Per-state aggregation centers. center[y][y_c] is undefined when the state
// has no members in the batch; counts always sum to the batch size.
struct CenterSet {
  std::array<std::array<Tensor, 2>, 2> center;
  std::array<std::array<int, 2>, 2> count = {{{0, 0}, {0, 0}}};
  int total() const { return count[0][0] + count[0][1] + count[1][0] + count[1][1]; }
};

// Per-dimension statistics of the batch's intensified features, held as
// untracked constants (stop-gradient).
struct BatchStats {
  Tensor mu;     // [D]
  Tensor sigma;  // [D], population std
};

// Feature intensifier: per-row L2 normalization scaled by sqrt(D). Zero rows
// map to zero rows.
Tensor psi(const Tensor& h);

CenterSet centers(const Tensor& psi_features, const BatchPartition& part);

BatchStats batch_stats(const Tensor& psi_features);

// Gaussian-weighted Minkowski distance between two center vectors. The
// weights lambda_i are evaluated from the first argument against the batch
// statistics, so the distance is not symmetric in general.
Tensor d_p(const Tensor& a, const Tensor& b, const DistanceConfig& cfg, const Tensor& mu,
           const Tensor& sigma);

// 1 / (1 + tau * D_p); equals 1 iff the centers coincide.
Tensor similarity_s(const Tensor& ci, const Tensor& cj, const DistanceConfig& cfg,
                    const BatchStats& stats);

// Biased HSIC estimator trace(K H L H) / (n-1)^2 with Gaussian kernels and
// median-heuristic bandwidths (one per side, computed stop-gradient).
Tensor hsic(const Tensor& x, const Tensor& y);

struct LdisResult {
  Tensor total;          // scalar, tracked when features are
  double sim_value = 0.0;
  double hsic_value = 0.0;
  double beta = 0.5;
  int sim_terms = 0;
  int hsic_terms = 0;
};

// Eq-style alignment loss: similarity of real-vs-fake centers per compression
// state, plus beta-weighted per-class HSIC between the paired compressed and
// raw feature rows. `pairs_by_class[y]` lists (compressed_row, raw_row) twins
// present in the batch; `g_prev` is the previous step's global gradient norm
// of this loss (0 at step 0, giving beta = 0.5).
LdisResult l_dis(const Tensor& features, const BatchPartition& part,
                 const std::array<std::vector<std::pair<int, int>>, 2>& pairs_by_class,
                 const LossConfig& cfg, double g_prev);

// l_rf + l_cmp + alpha * l_dis + 0.5 * wd * sum ||theta||^2. Null parts are
// skipped (absent branch / disabled aggregation).
Tensor total_loss(const Tensor& l_rf, const Tensor* l_cmp, const Tensor* l_dis_term,
                  const LossConfig& cfg, const std::vector<Tensor>& params);

}  // namespace plada::oda
