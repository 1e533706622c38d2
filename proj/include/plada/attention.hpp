#pragma once

#include <utility>
#include <vector>

#include "plada/tensor.hpp"

namespace plada::nn {

// Projection weights for one attention layer; also carries the head count.
// The projections have no bias terms.
struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // [D,D]
  int heads = 1;
};

// Per-layer pool of learnable (key, value) guide prompt pairs, each [Lp,D].
struct GuidePromptPool {
  std::vector<std::pair<Tensor, Tensor>> entries;
  int size() const { return static_cast<int>(entries.size()); }
};

enum class TrainSelect { Random, BeamSearch };
enum class InferSelect { Random, FullAverage, HalfAverage };

struct PromptSelection {
  TrainSelect train_mode = TrainSelect::Random;
  InferSelect infer_mode = InferSelect::FullAverage;

  static PromptSelection parse(const std::string& s);  // "R-FA", "B-R", ...
  std::string str() const;
};

// Pool-level selection. Beam search needs a model and a batch to score
// candidates, so it is resolved by the caller into SelectMode::Fixed.
enum class SelectMode { Random, FullAverage, HalfAverage, Fixed };

std::pair<Tensor, Tensor> select_prompt(const GuidePromptPool& pool, SelectMode mode, Rng* rng,
                                        int fixed_index = -1, int* picked = nullptr);

// Convolution/MLP stack behind coordination guidance. Head convs are
// per-head, kernel 3, channel-preserving; the MLP is D -> 2D -> D with GELU.
struct CgParams {
  std::vector<Tensor> head_conv_w;  // H x [3,Dh,Dh]
  std::vector<Tensor> head_conv_b;  // H x [Dh]
  Tensor mlp_w1, mlp_b1;            // [D,2D],[2D]
  Tensor mlp_w2, mlp_b2;            // [2D,D],[D]
  Tensor g_conv_w, g_conv_b;        // [3,D,D],[D]
};

// Scaled dot-product multi-head attention over already-projected q/k/v with
// the output projection applied. Inputs are [T,D] or [B,T,D].
Tensor msa(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionParams& p);

// Conventional prompt-augmented attention: raw (unprojected) prompts are
// appended to the projected keys and values.
Tensor prompt_msa(const Tensor& x, const Tensor& prompt_k, const Tensor& prompt_v,
                  const AttentionParams& p);

// Residual guidance: plain attention plus a prompt-only attention branch whose
// keys/values are the *projected* prompts; the two results are summed.
Tensor residual_guidance(const Tensor& x, const Tensor& prompt_k, const Tensor& prompt_v,
                         const AttentionParams& p);

// Coordination guidance over the preceding attention output `h_prev` (the
// residual-guidance output in the standard plan); queries/keys/values come
// from the original layer input `x`.
Tensor coordination_guidance(const Tensor& h_prev, const Tensor& x, const Tensor& prompt_k,
                             const Tensor& prompt_v, const AttentionParams& p,
                             const CgParams& cg);

}  // namespace plada::nn
