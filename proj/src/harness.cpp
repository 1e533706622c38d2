#include "plada/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace plada::run {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr uint64_t kStreamSelect = 0x53454c45;
constexpr uint64_t kStreamEvalSelect = 0x4556414c;
constexpr uint64_t kStreamTestSet = 0x54455354;

double sigmoid_value(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

nn::SelectMode infer_to_mode(nn::InferSelect s) {
  switch (s) {
    case nn::InferSelect::Random:
      return nn::SelectMode::Random;
    case nn::InferSelect::HalfAverage:
      return nn::SelectMode::HalfAverage;
    case nn::InferSelect::FullAverage:
      return nn::SelectMode::FullAverage;
  }
  return nn::SelectMode::FullAverage;
}

Tensor column_tensor(const std::vector<double>& v) {
  return Tensor::from({static_cast<int>(v.size()), 1}, std::vector<double>(v));
}

}  // namespace

std::vector<nn::LayerKind> TrainConfig::layer_plan() const {
  int rg = 0, cg = 0;
  if (components.prompts == "none") {
    rg = 0;
    cg = 0;
  } else if (components.prompts == "rg") {
    rg = backbone.depth;
    cg = 0;
  } else if (components.prompts == "cg") {
    rg = 0;
    cg = backbone.n_b2e;
  } else if (components.prompts == "b2e") {
    rg = backbone.depth;
    cg = backbone.n_b2e;
  } else {
    throw ConfigError("components.prompts must be none|rg|cg|b2e, got " + components.prompts);
  }
  if (rg_depth >= 0) rg = rg_depth;
  if (cg_depth >= 0) cg = cg_depth;
  return nn::plan_for(backbone, rg, cg);
}

oda::LossConfig TrainConfig::loss_config() const {
  oda::LossConfig lc;
  lc.alpha = alpha;
  lc.gamma = gamma;
  lc.weight_decay = weight_decay;
  lc.dist.tau = tau;
  if (distance == "cosine") {
    lc.dist.kind = oda::DistanceKind::Cosine;
  } else if (distance == "l1") {
    lc.dist.kind = oda::DistanceKind::Minkowski;
    lc.dist.p = 1.0;
  } else if (distance == "l2") {
    lc.dist.kind = oda::DistanceKind::Minkowski;
    lc.dist.p = p;
  } else {
    throw ConfigError("distance must be l1|l2|cosine, got " + distance);
  }
  return lc;
}

std::string TrainConfig::to_json() const {
  json j;
  j["lr"] = adam.lr;
  j["batch"] = batch;
  j["epochs"] = epochs;
  j["seed"] = seed;
  j["adam"] = {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
  j["alpha"] = alpha;
  j["tau"] = tau;
  j["gamma"] = gamma;
  j["p"] = p;
  j["weight_decay"] = weight_decay;
  j["distance"] = distance;
  j["backbone"] = {{"depth", backbone.depth},       {"dim", backbone.dim},
                   {"heads", backbone.heads},       {"patch", backbone.patch},
                   {"n_b2e", backbone.n_b2e},       {"pool_size", backbone.pool_size},
                   {"prompt_len", backbone.prompt_len}};
  j["selection"] = selection.str();
  j["components"] = {{"prompts", components.prompts},
                     {"oda", components.oda},
                     {"reversal", components.reversal}};
  j["rg_depth"] = rg_depth;
  j["cg_depth"] = cg_depth;
  j["train_data"] = train_data;
  return j.dump(2) + "\n";
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  c.adam.lr = j.value("lr", c.adam.lr);
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("adam")) {
    c.adam.beta1 = j["adam"].value("beta1", c.adam.beta1);
    c.adam.beta2 = j["adam"].value("beta2", c.adam.beta2);
    c.adam.eps = j["adam"].value("eps", c.adam.eps);
  }
  c.alpha = j.value("alpha", c.alpha);
  c.tau = j.value("tau", c.tau);
  c.gamma = j.value("gamma", c.gamma);
  c.p = j.value("p", c.p);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.distance = j.value("distance", c.distance);
  if (j.contains("backbone")) {
    const json& b = j["backbone"];
    c.backbone.depth = b.value("depth", c.backbone.depth);
    c.backbone.dim = b.value("dim", c.backbone.dim);
    c.backbone.heads = b.value("heads", c.backbone.heads);
    c.backbone.patch = b.value("patch", c.backbone.patch);
    c.backbone.n_b2e = b.value("n_b2e", c.backbone.n_b2e);
    c.backbone.pool_size = b.value("pool_size", c.backbone.pool_size);
    c.backbone.prompt_len = b.value("prompt_len", c.backbone.prompt_len);
  }
  if (j.contains("selection"))
    c.selection = nn::PromptSelection::parse(j["selection"].get<std::string>());
  if (j.contains("components")) {
    const json& m = j["components"];
    c.components.prompts = m.value("prompts", c.components.prompts);
    c.components.oda = m.value("oda", c.components.oda);
    c.components.reversal = m.value("reversal", c.components.reversal);
  }
  c.rg_depth = j.value("rg_depth", c.rg_depth);
  c.cg_depth = j.value("cg_depth", c.cg_depth);
  c.train_data = j.value("train_data", c.train_data);
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json(text);
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  int positives = 0;
  for (int l : labels) positives += l;
  if (positives == 0) return 0.0;
  double ap = 0.0;
  int hits = 0;
  for (size_t r = 0; r < idx.size(); ++r) {
    if (labels[idx[r]] == 1) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return ap / positives;
}

double accuracy_at(const std::vector<double>& scores, const std::vector<int>& labels,
                   double threshold) {
  if (scores.empty()) return 0.0;
  int correct = 0;
  for (size_t i = 0; i < scores.size(); ++i)
    correct += ((scores[i] > threshold ? 1 : 0) == labels[i]) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  // Mann-Whitney with midranks for ties.
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  int64_t n_pos = 0;
  for (size_t k = 0; k < labels.size(); ++k)
    if (labels[k] == 1) {
      rank_sum += rank[k];
      ++n_pos;
    }
  const int64_t n_neg = static_cast<int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;
  return (rank_sum - 0.5 * static_cast<double>(n_pos) * (n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

Adam::Adam(const AdamConfig& cfg, size_t n_params) : cfg_(cfg), m_(n_params), v_(n_params) {}

void Adam::step(std::vector<Tensor*>& values, const std::vector<Tensor>& grads) {
  if (values.size() != m_.size() || grads.size() != m_.size())
    throw DimensionError("Adam::step: parameter count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < values.size(); ++i) {
    Tensor& p = *values[i];
    const Tensor& g = grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(static_cast<size_t>(p.numel()), 0.0);
      v.assign(static_cast<size_t>(p.numel()), 0.0);
    }
    double* pd = p.data();
    const double* gd = g.data();
    for (int64_t e = 0; e < p.numel(); ++e) {
      m[static_cast<size_t>(e)] = cfg_.beta1 * m[static_cast<size_t>(e)] + (1.0 - cfg_.beta1) * gd[e];
      v[static_cast<size_t>(e)] =
          cfg_.beta2 * v[static_cast<size_t>(e)] + (1.0 - cfg_.beta2) * gd[e] * gd[e];
      const double mhat = m[static_cast<size_t>(e)] / bc1;
      const double vhat = v[static_cast<size_t>(e)] / bc2;
      pd[e] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

namespace {

struct StepStats {
  double l_rf = 0.0, l_cmp = 0.0, l_dis_sim = 0.0, l_dis_hsic = 0.0, beta = 0.5;
  double acc_rf = 0.0, acc_cmp = 0.0;
  int n_cmp = 0;
};

}  // namespace

void train_with_dataset(const TrainConfig& cfg, const data::Dataset& ds,
                        const std::string& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream cf(out_dir + "/config.json");
    cf << cfg.to_json();
  }

  const std::vector<nn::LayerKind> plan = cfg.layer_plan();
  nn::Model model = nn::build_model(cfg.backbone, plan, cfg.seed);
  auto reg = nn::param_registry(model.params);
  std::vector<Tensor*> values;
  for (auto& [n, t] : reg) {
    (void)n;
    values.push_back(t);
  }
  Adam adam(cfg.adam, values.size());
  const oda::LossConfig loss_cfg = cfg.loss_config();

  data::BatchStream stream(ds, cfg.batch, cfg.seed);
  const int per_epoch = stream.per_epoch();
  if (per_epoch < 1) throw ValidationError("dataset smaller than one batch");

  std::ofstream metrics(out_dir + "/metrics.csv");
  metrics << "step,epoch,l_rf,l_cmp,l_dis_sim,l_dis_hsic,beta,acc_rf,acc_cmp,n_cmp\n";

  double g_prev = 0.0;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int bi = 0; bi < per_epoch; ++bi, ++step) {
      data::Batch batch = stream.batch(epoch, bi);
      const int bsize = static_cast<int>(batch.y.size());

      std::vector<int> paired_rows;
      std::vector<double> y_cmp;
      for (int r = 0; r < bsize; ++r)
        if (batch.paired_mask[static_cast<size_t>(r)] && cfg.components.reversal) {
          paired_rows.push_back(r);
          y_cmp.push_back(batch.y_c[static_cast<size_t>(r)]);
        }

      Tape tape;
      nn::ModelParams watched = nn::watch_params(model.params, tape);

      nn::ForwardOptions opt;
      opt.with_reversal = cfg.components.reversal;
      Rng sel_rng = Rng::derive(cfg.seed, kStreamSelect, static_cast<uint64_t>(step));
      if (cfg.selection.train_mode == nn::TrainSelect::Random) {
        opt.select = nn::SelectMode::Random;
      } else {
        opt.select = nn::SelectMode::Fixed;
        opt.fixed_index = cfg.components.prompts == "none"
                              ? 0
                              : nn::beam_pick(model, batch.images,
                                              std::vector<double>(batch.y.begin(), batch.y.end()));
      }
      if (cfg.components.prompts == "none") opt.select = nn::SelectMode::FullAverage;

      nn::ForwardOutput out =
          nn::forward(cfg.backbone, plan, watched, batch.images, paired_rows, opt, sel_rng);

      StepStats st;
      std::vector<double> y_rf(batch.y.begin(), batch.y.end());
      Tensor l_rf = bce_with_logits(out.logit_rf, column_tensor(y_rf));
      st.l_rf = l_rf.scalar();

      Tensor l_cmp;
      if (!paired_rows.empty()) {
        l_cmp = bce_with_logits(out.logit_cmp, column_tensor(y_cmp));
        st.l_cmp = l_cmp.scalar();
      }

      Tensor l_dis_term;
      if (cfg.components.oda) {
        oda::LdisResult ld =
            oda::l_dis(out.h_rf, batch.partition, batch.pairs_by_class, loss_cfg, g_prev);
        l_dis_term = ld.total;
        st.l_dis_sim = ld.sim_value;
        st.l_dis_hsic = ld.hsic_value;
        st.beta = ld.beta;
      }

      std::vector<Tensor> watched_values;
      for (auto& [n, t] : nn::param_registry(watched)) {
        (void)n;
        watched_values.push_back(*t);
      }
      Tensor total = oda::total_loss(l_rf, l_cmp.defined() ? &l_cmp : nullptr,
                                     l_dis_term.defined() ? &l_dis_term : nullptr, loss_cfg,
                                     watched_values);
      if (!std::isfinite(total.scalar()))
        throw DivergenceError("training loss became non-finite at step " + std::to_string(step));

      // The beta schedule consumes the previous step's global gradient norm of
      // the aggregation loss, so that loss gets its own backward sweep.
      if (cfg.components.oda && l_dis_term.defined() && l_dis_term.tracked()) {
        tape.backward(l_dis_term);
        double sq = 0.0;
        for (Tensor& wt : watched_values) {
          Tensor g = tape.grad(wt);
          for (int64_t e = 0; e < g.numel(); ++e) sq += g.data()[e] * g.data()[e];
        }
        g_prev = std::sqrt(sq);
      }

      tape.backward(total);
      std::vector<Tensor> grads;
      grads.reserve(watched_values.size());
      for (Tensor& wt : watched_values) grads.push_back(tape.grad(wt));
      adam.step(values, grads);

      // Batch-level diagnostics.
      {
        int correct = 0;
        for (int r = 0; r < bsize; ++r) {
          const double prob = sigmoid_value(out.logit_rf.data()[r]);
          correct += ((prob > 0.5 ? 1 : 0) == batch.y[static_cast<size_t>(r)]) ? 1 : 0;
        }
        st.acc_rf = static_cast<double>(correct) / bsize;
        st.n_cmp = static_cast<int>(paired_rows.size());
        if (st.n_cmp > 0) {
          int c2 = 0;
          for (size_t r = 0; r < paired_rows.size(); ++r) {
            const double prob = sigmoid_value(out.logit_cmp.data()[r]);
            c2 += ((prob > 0.5 ? 1 : 0) == static_cast<int>(y_cmp[r])) ? 1 : 0;
          }
          st.acc_cmp = static_cast<double>(c2) / st.n_cmp;
        }
      }
      metrics << step << "," << (epoch + 1) << "," << fmt_f64(st.l_rf) << ","
              << fmt_f64(st.l_cmp) << "," << fmt_f64(st.l_dis_sim) << ","
              << fmt_f64(st.l_dis_hsic) << "," << fmt_f64(st.beta) << "," << fmt_f64(st.acc_rf)
              << "," << fmt_f64(st.acc_cmp) << "," << st.n_cmp << "\n";
    }
    nn::save_checkpoint(model, out_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".plada");
  }
  if (!metrics) throw IoError("failed writing metrics to " + out_dir);
}

void train(const TrainConfig& cfg, const std::string& out_dir) {
  if (cfg.train_data.empty()) throw ValidationError("train: config has no train_data directory");
  data::Dataset ds = data::load_dataset(cfg.train_data);
  train_with_dataset(cfg, ds, out_dir);
}

EvalResult evaluate_model(const nn::Model& m, const data::Dataset& testset, nn::InferSelect mode,
                          int batch, uint64_t eval_seed, std::vector<double>* probs_out) {
  const int n = static_cast<int>(testset.samples.size());
  std::vector<double> probs;
  std::vector<int> labels;
  probs.reserve(static_cast<size_t>(n));
  Rng rng = Rng::derive(eval_seed, kStreamEvalSelect);
  for (int start = 0; start < n; start += batch) {
    const int take = std::min(batch, n - start);
    std::vector<const jpeg::Image*> imgs;
    for (int i = 0; i < take; ++i) {
      imgs.push_back(&testset.samples[static_cast<size_t>(start + i)].image);
      labels.push_back(testset.samples[static_cast<size_t>(start + i)].y);
    }
    Tensor images = data::images_to_tensor(imgs);
    nn::ForwardOptions opt;
    opt.select = infer_to_mode(mode);
    opt.with_reversal = false;
    nn::ForwardOutput out = nn::forward(m.cfg, m.plan, m.params, images, {}, opt, rng);
    for (int i = 0; i < take; ++i) probs.push_back(sigmoid_value(out.logit_rf.data()[i]));
  }
  if (probs_out) *probs_out = probs;
  EvalResult res;
  res.n = n;
  res.accuracy = accuracy_at(probs, labels, 0.5);
  res.ap = average_precision(probs, labels);
  return res;
}

data::Dataset apply_protocol(const data::Dataset& raw, const data::Protocol& protocol,
                             uint64_t seed) {
  data::Dataset out = raw;
  if (protocol.kind == data::Protocol::Kind::Raw) return out;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    data::Sample& s = out.samples[i];
    int qp = protocol.qp;
    if (protocol.kind == data::Protocol::Kind::QualityAgnostic) {
      Rng rng = Rng::derive(seed, kStreamTestSet, static_cast<uint64_t>(i));
      qp = static_cast<int>(rng.uniform_int(protocol.lo, protocol.hi));
    }
    s.source_hash = jpeg::image_hash(s.image);
    s.image = jpeg::compress(s.image, qp);
    s.y_c = 1;
    s.qp = qp;
  }
  return out;
}

EvalResult evaluate(const std::string& ckpt_path, const std::string& data_dir,
                    const data::Protocol& protocol, const std::string& out_csv,
                    nn::InferSelect mode, uint64_t eval_seed) {
  nn::Model m = nn::load_checkpoint(ckpt_path);
  data::Dataset raw = data::load_dataset(data_dir);
  data::Dataset test = apply_protocol(raw, protocol, raw.manifest.seed);
  std::vector<double> probs;
  EvalResult res = evaluate_model(m, test, mode, 32, eval_seed, &probs);
  if (!out_csv.empty()) {
    std::ofstream f(out_csv);
    f << "id,y,y_c,qp,prob\n";
    for (size_t i = 0; i < probs.size(); ++i) {
      const data::Sample& s = test.samples[i];
      f << i << "," << s.y << "," << s.y_c << ",";
      if (s.qp) f << *s.qp;
      f << "," << fmt_f64(probs[i]) << "\n";
    }
    if (!f) throw IoError("failed writing " + out_csv);
  }
  return res;
}

void export_features(const std::string& ckpt_path, const std::string& data_dir,
                     const std::string& out_csv) {
  nn::Model m = nn::load_checkpoint(ckpt_path);
  data::Dataset ds = data::load_dataset(data_dir);
  std::ofstream f(out_csv);
  f << "id,y,y_c,qp";
  for (int c = 0; c < m.cfg.dim; ++c) f << ",f" << c;
  f << "\n";
  Rng rng(0);
  const int n = static_cast<int>(ds.samples.size());
  for (int start = 0; start < n; start += 32) {
    const int take = std::min(32, n - start);
    std::vector<const jpeg::Image*> imgs;
    for (int i = 0; i < take; ++i) imgs.push_back(&ds.samples[static_cast<size_t>(start + i)].image);
    nn::ForwardOptions opt;
    opt.select = nn::SelectMode::FullAverage;
    opt.with_reversal = false;
    nn::ForwardOutput out =
        nn::forward(m.cfg, m.plan, m.params, data::images_to_tensor(imgs), {}, opt, rng);
    for (int i = 0; i < take; ++i) {
      const data::Sample& s = ds.samples[static_cast<size_t>(start + i)];
      f << (start + i) << "," << s.y << "," << s.y_c << ",";
      if (s.qp) f << *s.qp;
      for (int c = 0; c < m.cfg.dim; ++c)
        f << "," << fmt_f64(out.h_rf.data()[static_cast<int64_t>(i) * m.cfg.dim + c]);
      f << "\n";
    }
  }
  if (!f) throw IoError("failed writing " + out_csv);
}

std::vector<AblationRow> run_ablation(const std::string& axis,
                                      const std::vector<std::string>& values,
                                      const TrainConfig& base, const std::string& out_dir) {
  fs::create_directories(out_dir);
  data::Dataset train_ds = data::load_dataset(base.train_data);

  // Evaluation sets share the training corpus statistics but fresh streams.
  data::DatasetManifest test_m = train_ds.manifest;
  test_m.seed = mix64(train_ds.manifest.seed, kStreamTestSet);
  if (test_m.seed == train_ds.manifest.seed) ++test_m.seed;
  test_m.n_total = 1000;
  test_m.paired_fraction = 0.0;
  const std::vector<data::Protocol> protocols = {data::Protocol::parse("aware:50"),
                                                 data::Protocol::parse("agnostic:30-100"),
                                                 data::Protocol::parse("raw")};
  std::vector<data::Dataset> testsets;
  for (const auto& proto : protocols)
    testsets.push_back(data::make_test_set(test_m, proto, train_ds.manifest.seed));

  std::vector<AblationRow> rows;
  std::ofstream csv(out_dir + "/comparison.csv");
  csv << "axis,value,protocol,accuracy,ap\n";
  for (const std::string& value : values) {
    TrainConfig cfg = base;
    if (axis == "components") {
      if (value == "baseline")
        cfg.components = {"none", false, false};
      else if (value == "oda")
        cfg.components = {"none", true, false};
      else if (value == "rg")
        cfg.components = {"rg", false, true};
      else if (value == "cg")
        cfg.components = {"cg", false, true};
      else if (value == "b2e")
        cfg.components = {"b2e", false, true};
      else if (value == "full")
        cfg.components = {"b2e", true, true};
      else
        throw ValidationError("components value must be baseline|oda|rg|cg|b2e|full");
    } else if (axis == "distance") {
      cfg.distance = value;
    } else if (axis == "prompt-selection") {
      cfg.selection = nn::PromptSelection::parse(value);
    } else if (axis == "pool-size") {
      cfg.backbone.pool_size = std::stoi(value);
    } else if (axis == "prompt-length") {
      cfg.backbone.prompt_len = std::stoi(value);
    } else if (axis == "rg-depth") {
      cfg.components.prompts = "rg";
      cfg.rg_depth = std::stoi(value);
      cfg.cg_depth = 0;
    } else if (axis == "cg-depth") {
      cfg.components.prompts = "b2e";
      cfg.rg_depth = cfg.backbone.depth;
      cfg.cg_depth = std::stoi(value);
    } else {
      throw ValidationError(
          "axis must be one of components|distance|prompt-selection|pool-size|prompt-length|rg-"
          "depth|cg-depth");
    }
    std::string run_dir = out_dir + "/" + axis + "_" + value;
    std::replace(run_dir.begin(), run_dir.end(), ':', '_');
    train_with_dataset(cfg, train_ds, run_dir);

    nn::Model m =
        nn::load_checkpoint(run_dir + "/ckpt_epoch" + std::to_string(cfg.epochs) + ".plada");
    for (size_t pi = 0; pi < protocols.size(); ++pi) {
      EvalResult r =
          evaluate_model(m, testsets[pi], cfg.selection.infer_mode, cfg.batch, cfg.seed);
      AblationRow row{value, protocols[pi].str(), r.accuracy, r.ap};
      rows.push_back(row);
      csv << axis << "," << value << "," << row.protocol << "," << fmt_f64(row.accuracy) << ","
          << fmt_f64(row.ap) << "\n";
    }
  }
  if (!csv) throw IoError("failed writing " + out_dir + "/comparison.csv");
  return rows;
}

}  // namespace plada::run
