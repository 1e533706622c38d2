#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "plada/data.hpp"
#include "plada/harness.hpp"
#include "plada/jpeg.hpp"
#include "plada/model.hpp"
#include "plada/tensor.hpp"

namespace {

using namespace plada;

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    out.push_back(s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"PLADA compressed-deepfake detection workbench"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
  std::string gen_out;
  int gen_n = 1000;
  double gen_paired = 0.2, gen_balance = 0.5, gen_strength = 0.5;
  std::string gen_regime = "fixed:50";
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--n", gen_n);
  gen->add_option("--paired", gen_paired);
  gen->add_option("--qp-regime", gen_regime);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--balance", gen_balance);
  gen->add_option("--strength", gen_strength);

  // train
  auto* tr = app.add_subcommand("train", "train a detector");
  std::string tr_config, tr_out;
  tr->add_option("--config", tr_config)->required();
  tr->add_option("--out", tr_out)->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_proto = "aware:50", ev_out = "eval.csv", ev_infer = "FA";
  std::string ev_config;
  uint64_t ev_seed = 0;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--protocol", ev_proto);
  ev->add_option("--out", ev_out);
  ev->add_option("--infer", ev_infer, "R|FA|HA");
  ev->add_option("--seed", ev_seed);
  ev->add_option("--config", ev_config, "optional config whose backbone must match the checkpoint");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate along one config axis");
  std::string ab_axis, ab_values, ab_config, ab_out;
  ab->add_option("--axis", ab_axis)->required();
  ab->add_option("--values", ab_values)->required();
  ab->add_option("--config", ab_config)->required();
  ab->add_option("--out", ab_out)->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of every op");
  uint64_t gc_seed = 42;
  int gc_instances = 20;
  gc->add_option("--seed", gc_seed);
  gc->add_option("--instances", gc_instances);

  // export-features
  auto* ex = app.add_subcommand("export-features", "dump detector features for a dataset");
  std::string ex_ckpt, ex_data, ex_out = "features.csv";
  ex->add_option("--ckpt", ex_ckpt)->required();
  ex->add_option("--data", ex_data)->required();
  ex->add_option("--out", ex_out);

  // compress-image
  auto* ci = app.add_subcommand("compress-image", "block-DCT quantization pass over a PPM");
  std::string ci_in, ci_out;
  int ci_qp = 50;
  ci->add_option("--in", ci_in)->required();
  ci->add_option("--out", ci_out)->required();
  ci->add_option("--qp", ci_qp)->required();

  CLI11_PARSE(app, argc, argv);

  if (*gen) {
    data::DatasetManifest m;
    m.seed = gen_seed;
    m.n_total = gen_n;
    m.paired_fraction = gen_paired;
    m.qp_regime = data::QpRegime::parse(gen_regime);
    m.class_balance = gen_balance;
    m.fingerprint_strength = gen_strength;
    data::Dataset ds = data::build_dataset(m);
    data::save_dataset(ds, gen_out);
    std::printf("wrote %zu samples to %s\n", ds.samples.size(), gen_out.c_str());
  } else if (*tr) {
    run::TrainConfig cfg = run::TrainConfig::load(tr_config);
    run::train(cfg, tr_out);
    std::printf("trained %d epochs into %s\n", cfg.epochs, tr_out.c_str());
  } else if (*ev) {
    if (!ev_config.empty()) {
      run::TrainConfig cfg = run::TrainConfig::load(ev_config);
      nn::Model m = nn::load_checkpoint(ev_ckpt);
      const auto& a = cfg.backbone;
      const auto& b = m.cfg;
      if (a.depth != b.depth || a.dim != b.dim || a.heads != b.heads || a.patch != b.patch ||
          a.n_b2e != b.n_b2e || a.pool_size != b.pool_size || a.prompt_len != b.prompt_len)
        throw ConfigError("checkpoint backbone config disagrees with --config");
    }
    nn::InferSelect mode = nn::InferSelect::FullAverage;
    if (ev_infer == "R")
      mode = nn::InferSelect::Random;
    else if (ev_infer == "HA")
      mode = nn::InferSelect::HalfAverage;
    else if (ev_infer != "FA")
      throw ValidationError("--infer must be R, FA or HA");
    run::EvalResult r = run::evaluate(ev_ckpt, ev_data, data::Protocol::parse(ev_proto), ev_out,
                                      mode, ev_seed);
    std::printf("protocol=%s n=%d accuracy=%.4f ap=%.4f\n", ev_proto.c_str(), r.n, r.accuracy,
                r.ap);
  } else if (*ab) {
    run::TrainConfig cfg = run::TrainConfig::load(ab_config);
    auto rows = run::run_ablation(ab_axis, split_csv(ab_values), cfg, ab_out);
    for (const auto& r : rows)
      std::printf("%s value=%s protocol=%s acc=%.4f ap=%.4f\n", ab_axis.c_str(), r.value.c_str(),
                  r.protocol.c_str(), r.accuracy, r.ap);
  } else if (*gc) {
    bool all_pass = true;
    for (const auto& r : run_gradcheck(gc_seed, gc_instances)) {
      std::printf("%-24s %.3e  %s\n", r.op.c_str(), r.max_rel_err, r.pass ? "PASS" : "FAIL");
      all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
  } else if (*ex) {
    run::export_features(ex_ckpt, ex_data, ex_out);
    std::printf("wrote %s\n", ex_out.c_str());
  } else if (*ci) {
    jpeg::Image img = jpeg::read_ppm(ci_in);
    jpeg::write_ppm(jpeg::compress(img, ci_qp), ci_out);
    std::printf("compressed %s at qp=%d -> %s\n", ci_in.c_str(), ci_qp, ci_out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const plada::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 2;
  } catch (const plada::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
