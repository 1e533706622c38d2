#include "plada/attention.hpp"

#include <cmath>

namespace plada::nn {

namespace {

struct Lifted {
  Tensor t;      // [B,T,D]
  bool was_2d;
};

Lifted lift(const Tensor& x) {
  if (x.rank() == 3) return {x, false};
  if (x.rank() == 2) return {reshape(x, {1, x.dim(0), x.dim(1)}), true};
  throw DimensionError("attention: expected [T,D] or [B,T,D], got " + shape_str(x.shape));
}

Tensor lower(const Tensor& t, bool was_2d) {
  return was_2d ? reshape(t, {t.dim(1), t.dim(2)}) : t;
}

// x [B,T,D] (or [T,D]) times W [D,D].
Tensor project(const Tensor& x, const Tensor& w) {
  if (x.rank() == 2) return matmul(x, w);
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  return reshape(matmul(reshape(x, {b * t, d}), w), {b, t, w.dim(1)});
}

// [B,T,D] -> [B*H,T,Dh]
Tensor split_heads(const Tensor& x, int heads) {
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  const int dh = d / heads;
  Tensor r = permute(reshape(x, {b, t, heads, dh}), {0, 2, 1, 3});
  return reshape(r, {b * heads, t, dh});
}

// [B*H,T,Dh] -> [B,T,D]
Tensor merge_heads(const Tensor& x, int b, int heads) {
  const int t = x.dim(1), dh = x.dim(2);
  Tensor r = permute(reshape(x, {b, heads, t, dh}), {0, 2, 1, 3});
  return reshape(r, {b, t, heads * dh});
}

Tensor broadcast_prompt(const Tensor& prompt, int b) { return tile_rows(prompt, b); }

}  // namespace

std::pair<Tensor, Tensor> select_prompt(const GuidePromptPool& pool, SelectMode mode, Rng* rng,
                                        int fixed_index, int* picked) {
  if (pool.entries.empty()) throw ConfigError("select_prompt: empty guide prompt pool");
  const int n = pool.size();
  if (picked) *picked = -1;
  switch (mode) {
    case SelectMode::Random: {
      if (!rng) throw ConfigError("select_prompt: random mode needs an rng");
      const int i = static_cast<int>(rng->uniform_int(0, n - 1));
      if (picked) *picked = i;
      return pool.entries[static_cast<size_t>(i)];
    }
    case SelectMode::Fixed: {
      if (fixed_index < 0 || fixed_index >= n)
        throw ConfigError("select_prompt: fixed index out of range");
      if (picked) *picked = fixed_index;
      return pool.entries[static_cast<size_t>(fixed_index)];
    }
    case SelectMode::HalfAverage:
    case SelectMode::FullAverage: {
      const int take = mode == SelectMode::FullAverage ? n : (n + 1) / 2;
      Tensor k = pool.entries[0].first;
      Tensor v = pool.entries[0].second;
      for (int i = 1; i < take; ++i) {
        k = add(k, pool.entries[static_cast<size_t>(i)].first);
        v = add(v, pool.entries[static_cast<size_t>(i)].second);
      }
      const double inv = 1.0 / static_cast<double>(take);
      return {muls(k, inv), muls(v, inv)};
    }
  }
  throw ConfigError("select_prompt: unknown mode");
}

PromptSelection PromptSelection::parse(const std::string& s) {
  const size_t dash = s.find('-');
  if (dash == std::string::npos) throw ValidationError("prompt selection: expected TRAIN-INFER");
  const std::string tr = s.substr(0, dash), in = s.substr(dash + 1);
  PromptSelection p;
  if (tr == "R")
    p.train_mode = TrainSelect::Random;
  else if (tr == "B")
    p.train_mode = TrainSelect::BeamSearch;
  else
    throw ValidationError("prompt selection: train mode must be R or B");
  if (in == "R")
    p.infer_mode = InferSelect::Random;
  else if (in == "FA")
    p.infer_mode = InferSelect::FullAverage;
  else if (in == "HA")
    p.infer_mode = InferSelect::HalfAverage;
  else
    throw ValidationError("prompt selection: infer mode must be R, FA or HA");
  return p;
}

std::string PromptSelection::str() const {
  std::string s = train_mode == TrainSelect::Random ? "R-" : "B-";
  switch (infer_mode) {
    case InferSelect::Random:
      return s + "R";
    case InferSelect::FullAverage:
      return s + "FA";
    case InferSelect::HalfAverage:
      return s + "HA";
  }
  return s;
}

Tensor msa(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionParams& p) {
  Lifted lq = lift(q), lk = lift(k), lv = lift(v);
  const int b = lq.t.dim(0), d = lq.t.dim(2);
  if (lk.t.dim(0) != b || lv.t.dim(0) != b || lk.t.dim(2) != d || lv.t.dim(2) != d)
    throw DimensionError("msa: q/k/v batch or embedding mismatch");
  if (lk.t.dim(1) != lv.t.dim(1)) throw DimensionError("msa: k and v token counts differ");
  if (p.heads < 1 || d % p.heads != 0)
    throw DimensionError("msa: embedding dim not divisible by head count");
  const int dh = d / p.heads;

  Tensor qh = split_heads(lq.t, p.heads);  // [B*H,Tq,Dh]
  Tensor kh = split_heads(lk.t, p.heads);  // [B*H,Tk,Dh]
  Tensor vh = split_heads(lv.t, p.heads);

  Tensor scores = muls(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, 2);
  Tensor ctx = merge_heads(bmm(attn, vh), b, p.heads);  // [B,Tq,D]
  Tensor out = project(ctx, p.w_o);
  return lower(out, lq.was_2d);
}

Tensor prompt_msa(const Tensor& x, const Tensor& prompt_k, const Tensor& prompt_v,
                  const AttentionParams& p) {
  Lifted lx = lift(x);
  const int b = lx.t.dim(0);
  Tensor q = project(lx.t, p.w_q);
  Tensor k = project(lx.t, p.w_k);
  Tensor v = project(lx.t, p.w_v);
  // Raw prompts join the already-projected keys/values.
  Tensor k_aug = concat({k, broadcast_prompt(prompt_k, b)}, 1);
  Tensor v_aug = concat({v, broadcast_prompt(prompt_v, b)}, 1);
  return lower(msa(q, k_aug, v_aug, p), lx.was_2d);
}

Tensor residual_guidance(const Tensor& x, const Tensor& prompt_k, const Tensor& prompt_v,
                         const AttentionParams& p) {
  Lifted lx = lift(x);
  const int b = lx.t.dim(0);
  Tensor q = project(lx.t, p.w_q);
  Tensor h_plain = msa(q, project(lx.t, p.w_k), project(lx.t, p.w_v), p);
  // Prompt branch: prompts go through the key/value projections here.
  Tensor pk = broadcast_prompt(project(prompt_k, p.w_k), b);
  Tensor pv = broadcast_prompt(project(prompt_v, p.w_v), b);
  Tensor h_prompt = msa(q, pk, pv, p);
  return lower(add(h_plain, h_prompt), lx.was_2d);
}

Tensor coordination_guidance(const Tensor& h_prev, const Tensor& x, const Tensor& prompt_k,
                             const Tensor& prompt_v, const AttentionParams& p,
                             const CgParams& cg) {
  Lifted lh = lift(h_prev), lx = lift(x);
  const int b = lh.t.dim(0), d = lh.t.dim(2);
  if (lx.t.shape != lh.t.shape)
    throw DimensionError("coordination_guidance: layer input and attention output shapes differ");
  if (static_cast<int>(cg.head_conv_w.size()) != p.heads)
    throw ConfigError("coordination_guidance: one head conv per attention head required");
  const int dh = d / p.heads;
  const int lp = prompt_k.dim(0);

  // Head-specific stream: per-head token convolutions, re-joined on channels.
  std::vector<Tensor> head_feats;
  for (int h = 0; h < p.heads; ++h) {
    Tensor hs = slice(lh.t, 2, h * dh, dh);
    Tensor c = conv1d(hs, cg.head_conv_w[static_cast<size_t>(h)], 1, 1);
    head_feats.push_back(add_rowvec(c, cg.head_conv_b[static_cast<size_t>(h)]));
  }
  Tensor fs = adaptive_avg_pool1d(concat(head_feats, 2), lp);
  Tensor f_k = mul(broadcast_prompt(prompt_k, b), fs);

  // Generic stream: MLP then token convolution.
  Tensor g1 = gelu(add_rowvec(project(lh.t, cg.mlp_w1), cg.mlp_b1));
  Tensor g2 = add_rowvec(project(g1, cg.mlp_w2), cg.mlp_b2);
  Tensor gc = add_rowvec(conv1d(g2, cg.g_conv_w, 1, 1), cg.g_conv_b);
  Tensor f_v = mul(broadcast_prompt(prompt_v, b), adaptive_avg_pool1d(gc, lp));

  // Queries/keys/values come from the original layer input.
  Tensor q = project(lx.t, p.w_q);
  Tensor k_aug = concat({project(lx.t, p.w_k), f_k}, 1);
  Tensor v_aug = concat({project(lx.t, p.w_v), f_v}, 1);
  return lower(msa(q, k_aug, v_aug, p), lh.was_2d);
}

}  // namespace plada::nn
