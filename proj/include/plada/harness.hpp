#pragma once

#include <map>
#include <string>
#include <vector>

#include "plada/data.hpp"
#include "plada/model.hpp"
#include "plada/oda.hpp"

namespace plada::run {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Which mechanisms are active; the prompt plan is expressed through
// rg_depth/cg_depth overrides resolved by layer_plan().
struct Components {
  std::string prompts = "b2e";  // none | rg | cg | b2e
  bool oda = true;
  bool reversal = true;
};

struct TrainConfig {
  AdamConfig adam;
  int batch = 32;
  int epochs = 15;
  uint64_t seed = 0;
  double alpha = 0.004;
  double tau = 1.0;
  double gamma = 1.0;
  double p = 2.0;
  double weight_decay = 1e-4;
  std::string distance = "l2";  // l1 | l2 | cosine
  nn::BackboneConfig backbone;
  nn::PromptSelection selection;
  Components components;
  int rg_depth = -1;  // -1: derive from components.prompts
  int cg_depth = -1;
  std::string train_data;  // dataset directory

  std::vector<nn::LayerKind> layer_plan() const;
  oda::LossConfig loss_config() const;

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::string& path);
};

struct EvalResult {
  double accuracy = 0.0;
  double ap = 0.0;
  int n = 0;
};

// Step-interpolated average precision: sum of precision at each positive hit
// over the number of positives, scores sorted descending (ties by index).
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);
double accuracy_at(const std::vector<double>& scores, const std::vector<int>& labels,
                   double threshold);
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

class Adam {
 public:
  Adam(const AdamConfig& cfg, size_t n_params);
  // In-place update of `value` given `grad`; call order defines t.
  void step(std::vector<Tensor*>& values, const std::vector<Tensor>& grads);

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Full training run: writes config.json (verbatim), metrics.csv and
// ckpt_epochN.plada into out_dir. Throws DivergenceError on non-finite loss.
void train(const TrainConfig& cfg, const std::string& out_dir);
void train_with_dataset(const TrainConfig& cfg, const data::Dataset& ds,
                        const std::string& out_dir);

// In-memory variants used by the CLI and the acceptance suite.
EvalResult evaluate_model(const nn::Model& m, const data::Dataset& testset, nn::InferSelect mode,
                          int batch, uint64_t eval_seed, std::vector<double>* probs_out = nullptr);
EvalResult evaluate(const std::string& ckpt_path, const std::string& data_dir,
                    const data::Protocol& protocol, const std::string& out_csv,
                    nn::InferSelect mode, uint64_t eval_seed);

void export_features(const std::string& ckpt_path, const std::string& data_dir,
                     const std::string& out_csv);

struct AblationRow {
  std::string value;
  std::string protocol;
  double accuracy = 0.0;
  double ap = 0.0;
};

// Trains one run per axis value (each run differs from the base config in
// exactly that axis) and evaluates under the three standard protocols.
std::vector<AblationRow> run_ablation(const std::string& axis,
                                      const std::vector<std::string>& values,
                                      const TrainConfig& base, const std::string& out_dir);

// Applies a test-time protocol to a raw dataset (per-image qp streams derive
// from `seed`).
data::Dataset apply_protocol(const data::Dataset& raw, const data::Protocol& protocol,
                             uint64_t seed);

}  // namespace plada::run
