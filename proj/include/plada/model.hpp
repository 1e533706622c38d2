#pragma once

#include <optional>
#include <string>
#include <vector>

#include "plada/attention.hpp"
#include "plada/tensor.hpp"

namespace plada::nn {

struct BackboneConfig {
  int depth = 8;
  int dim = 128;
  int heads = 4;
  int patch = 8;
  int n_b2e = 2;       // leading layers running RG followed by CG
  int pool_size = 4;   // guide prompt pool entries per layer
  int prompt_len = 32; // tokens per guide prompt

  int patches() const { return (64 / patch) * (64 / patch); }
  int tokens() const { return 1 + 2 + patches(); }  // cls + 2 visual + image tokens
};

enum class LayerKind { Plain, Rg, PlainCg, RgCg };

// Standard plan: RG+CG in the first n_b2e layers, RG in the rest.
std::vector<LayerKind> default_plan(const BackboneConfig& cfg);
// Ablation plans: first rg_layers layers attend with RG (plain otherwise),
// first cg_layers layers additionally run CG.
std::vector<LayerKind> plan_for(const BackboneConfig& cfg, int rg_layers, int cg_layers);
std::string plan_str(const std::vector<LayerKind>& plan);
std::vector<LayerKind> parse_plan(const std::string& s);

struct LayerParams {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  AttentionParams attn;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // D -> 2D -> D
  GuidePromptPool pool;                   // empty for plain layers
  std::optional<CgParams> cg;
};

struct ModelParams {
  Tensor embed_w, embed_b;  // [patch*patch*3, D], [D]
  Tensor pos;               // [T, D]
  Tensor cls;               // [1, D]
  Tensor pv;                // [2, D]
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor head_rf_w, head_rf_b;    // [D,1],[1]
  Tensor head_cmp_w, head_cmp_b;  // [D,1],[1]
};

struct Model {
  BackboneConfig cfg;
  std::vector<LayerKind> plan;
  ModelParams params;
};

// Fixed-order (name, tensor) enumeration of every trainable parameter.
std::vector<std::pair<std::string, Tensor*>> param_registry(ModelParams& p);
std::vector<std::pair<std::string, const Tensor*>> param_registry(const ModelParams& p);

Model build_model(const BackboneConfig& cfg, const std::vector<LayerKind>& plan, uint64_t seed);
Model build_model(const BackboneConfig& cfg, uint64_t seed);  // default plan

// Tracked clone of the parameter struct for one training step.
ModelParams watch_params(const ModelParams& p, Tape& tape);

struct ForwardOutput {
  Tensor h_rf;       // [B,D] class-token features, all rows
  Tensor h_cmp;      // [B',D] features restricted to paired rows
  Tensor logit_rf;   // [B,1]
  Tensor logit_cmp;  // [B',1]; undefined when no paired rows
  std::vector<int> picked;  // per-layer pool index for Random/Fixed selection, -1 otherwise
};

struct ForwardOptions {
  SelectMode select = SelectMode::FullAverage;
  int fixed_index = -1;        // for SelectMode::Fixed
  bool with_reversal = true;   // compression branch behind the reversal node
  double reversal_scale = -1.0;
  std::vector<std::string>* trace = nullptr;  // executed attention variant per layer
};

// One backbone pass. `images` is an untracked [B,3,64,64] tensor;
// `paired_rows` selects the rows fed to the compression head.
ForwardOutput forward(const BackboneConfig& cfg, const std::vector<LayerKind>& plan,
                      const ModelParams& p, const Tensor& images,
                      const std::vector<int>& paired_rows, const ForwardOptions& opt, Rng& rng);

// Untracked scoring pass: sigmoid real/fake probabilities under FullAverage
// prompts.
std::vector<double> predict(const Model& m, const Tensor& images);

// Beam-search helper: picks the pool entry (shared across layers) minimizing
// the batch real/fake loss under untracked forwards.
int beam_pick(const Model& m, const Tensor& images, const std::vector<double>& y_targets);

// Checkpoint container: magic "PLADA1", a JSON header echoing the config and
// the (name, shape, offset) table, then raw little-endian float64 buffers.
void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace plada::nn
