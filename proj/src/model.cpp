#include "plada/model.hpp"
#include <cmath>

#include <cstdlib>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace plada::nn {

namespace {

using nlohmann::json;

Tensor gaussian(Rng& rng, Shape s, double std_dev = 0.02) {
  Tensor t = Tensor::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, std_dev);
  return t;
}

const char* kind_str(LayerKind k) {
  switch (k) {
    case LayerKind::Plain:
      return "plain";
    case LayerKind::Rg:
      return "rg";
    case LayerKind::PlainCg:
      return "plain+cg";
    case LayerKind::RgCg:
      return "rg+cg";
  }
  return "?";
}

// Untracked patch flattening: [B,3,64,64] -> [B*L, patch*patch*3].
Tensor extract_patches(const Tensor& images, int patch) {
  const int b = images.dim(0), side = images.dim(2);
  const int grid = side / patch;
  const int l = grid * grid;
  const int p = patch * patch * 3;
  Tensor out = Tensor::zeros({b * l, p});
  const double* src = images.data();
  double* dst = out.data();
  for (int bi = 0; bi < b; ++bi)
    for (int py = 0; py < grid; ++py)
      for (int px = 0; px < grid; ++px) {
        double* row = dst + (static_cast<int64_t>(bi) * l + py * grid + px) * p;
        int o = 0;
        for (int c = 0; c < 3; ++c)
          for (int dy = 0; dy < patch; ++dy)
            for (int dx = 0; dx < patch; ++dx)
              row[o++] = src[((static_cast<int64_t>(bi) * 3 + c) * side + py * patch + dy) * side +
                             px * patch + dx];
      }
  return out;
}

}  // namespace

std::vector<LayerKind> default_plan(const BackboneConfig& cfg) {
  return plan_for(cfg, cfg.depth, cfg.n_b2e);
}

std::vector<LayerKind> plan_for(const BackboneConfig& cfg, int rg_layers, int cg_layers) {
  if (rg_layers < 0 || rg_layers > cfg.depth || cg_layers < 0 || cg_layers > cfg.depth)
    throw ConfigError("layer plan: rg/cg layer counts out of range");
  std::vector<LayerKind> plan;
  for (int i = 0; i < cfg.depth; ++i) {
    const bool rg = i < rg_layers, cg = i < cg_layers;
    plan.push_back(rg ? (cg ? LayerKind::RgCg : LayerKind::Rg)
                      : (cg ? LayerKind::PlainCg : LayerKind::Plain));
  }
  return plan;
}

std::string plan_str(const std::vector<LayerKind>& plan) {
  std::string s;
  for (LayerKind k : plan) {
    if (!s.empty()) s += ",";
    s += kind_str(k);
  }
  return s;
}

std::vector<LayerKind> parse_plan(const std::string& s) {
  std::vector<LayerKind> plan;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (tok == "plain")
      plan.push_back(LayerKind::Plain);
    else if (tok == "rg")
      plan.push_back(LayerKind::Rg);
    else if (tok == "plain+cg")
      plan.push_back(LayerKind::PlainCg);
    else if (tok == "rg+cg")
      plan.push_back(LayerKind::RgCg);
    else
      throw ConfigError("unknown layer kind '" + tok + "' in plan");
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return plan;
}

std::vector<std::pair<std::string, Tensor*>> param_registry(ModelParams& p) {
  std::vector<std::pair<std::string, Tensor*>> reg;
  reg.emplace_back("embed.w", &p.embed_w);
  reg.emplace_back("embed.b", &p.embed_b);
  reg.emplace_back("pos", &p.pos);
  reg.emplace_back("cls", &p.cls);
  reg.emplace_back("pv", &p.pv);
  for (size_t i = 0; i < p.layers.size(); ++i) {
    LayerParams& L = p.layers[i];
    const std::string pre = "layer" + std::to_string(i) + ".";
    reg.emplace_back(pre + "ln1.g", &L.ln1_g);
    reg.emplace_back(pre + "ln1.b", &L.ln1_b);
    reg.emplace_back(pre + "attn.wq", &L.attn.w_q);
    reg.emplace_back(pre + "attn.wk", &L.attn.w_k);
    reg.emplace_back(pre + "attn.wv", &L.attn.w_v);
    reg.emplace_back(pre + "attn.wo", &L.attn.w_o);
    for (size_t e = 0; e < L.pool.entries.size(); ++e) {
      reg.emplace_back(pre + "pool" + std::to_string(e) + ".k", &L.pool.entries[e].first);
      reg.emplace_back(pre + "pool" + std::to_string(e) + ".v", &L.pool.entries[e].second);
    }
    if (L.cg) {
      CgParams& cg = *L.cg;
      for (size_t h = 0; h < cg.head_conv_w.size(); ++h) {
        reg.emplace_back(pre + "cg.head" + std::to_string(h) + ".w", &cg.head_conv_w[h]);
        reg.emplace_back(pre + "cg.head" + std::to_string(h) + ".b", &cg.head_conv_b[h]);
      }
      reg.emplace_back(pre + "cg.mlp.w1", &cg.mlp_w1);
      reg.emplace_back(pre + "cg.mlp.b1", &cg.mlp_b1);
      reg.emplace_back(pre + "cg.mlp.w2", &cg.mlp_w2);
      reg.emplace_back(pre + "cg.mlp.b2", &cg.mlp_b2);
      reg.emplace_back(pre + "cg.gconv.w", &cg.g_conv_w);
      reg.emplace_back(pre + "cg.gconv.b", &cg.g_conv_b);
    }
    reg.emplace_back(pre + "ln2.g", &L.ln2_g);
    reg.emplace_back(pre + "ln2.b", &L.ln2_b);
    reg.emplace_back(pre + "mlp.w1", &L.mlp_w1);
    reg.emplace_back(pre + "mlp.b1", &L.mlp_b1);
    reg.emplace_back(pre + "mlp.w2", &L.mlp_w2);
    reg.emplace_back(pre + "mlp.b2", &L.mlp_b2);
  }
  reg.emplace_back("lnf.g", &p.lnf_g);
  reg.emplace_back("lnf.b", &p.lnf_b);
  reg.emplace_back("head.rf.w", &p.head_rf_w);
  reg.emplace_back("head.rf.b", &p.head_rf_b);
  reg.emplace_back("head.cmp.w", &p.head_cmp_w);
  reg.emplace_back("head.cmp.b", &p.head_cmp_b);
  return reg;
}

std::vector<std::pair<std::string, const Tensor*>> param_registry(const ModelParams& p) {
  auto mut = param_registry(const_cast<ModelParams&>(p));
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(n, t);
  return out;
}

Model build_model(const BackboneConfig& cfg, const std::vector<LayerKind>& plan, uint64_t seed) {
  if (cfg.depth < 1 || cfg.dim < 1 || cfg.heads < 1 || cfg.dim % cfg.heads != 0)
    throw ConfigError("backbone: dim must divide evenly into heads");
  if (cfg.patch < 1 || 64 % cfg.patch != 0) throw ConfigError("backbone: patch must divide 64");
  if (cfg.n_b2e < 0 || cfg.n_b2e > cfg.depth)
    throw ConfigError("backbone: n_b2e must be within depth");
  if (cfg.pool_size < 1 || cfg.prompt_len < 1)
    throw ConfigError("backbone: pool_size and prompt_len must be >= 1");
  if (static_cast<int>(plan.size()) != cfg.depth)
    throw ConfigError("backbone: plan length must equal depth");

  const int d = cfg.dim, t = cfg.tokens(), p = cfg.patch * cfg.patch * 3;
  const int dh = d / cfg.heads, hid = 2 * d;
  Rng rng = Rng::derive(seed, 0x4d4f44454cULL);

  Model m;
  m.cfg = cfg;
  m.plan = plan;
  ModelParams& mp = m.params;
  // Patch embedding: half generic Gaussian filters, half local pixel-difference
  // filters. A from-scratch backbone gets no pretrained frequency-sensitive
  // filters, and the texture statistics this detector must pick up are
  // second-order; difference filters give gradient descent a usable starting
  // basis without encoding any class boundary.
  mp.embed_w = gaussian(rng, {p, d});
  for (int col = 0; col < d; col += 2) {
    const int c = static_cast<int>(rng.uniform_int(0, 2));
    const bool horizontal = rng.uniform() < 0.5;
    const int x0 = static_cast<int>(rng.uniform_int(0, cfg.patch - (horizontal ? 2 : 1)));
    const int y0 = static_cast<int>(rng.uniform_int(0, cfg.patch - (horizontal ? 1 : 2)));
    const int x1 = horizontal ? x0 + 1 : x0, y1 = horizontal ? y0 : y0 + 1;
    const double amp = rng.uniform(0.5, 1.5);
    double* w = mp.embed_w.data();
    const auto idx = [&](int ch, int y, int x) { return (ch * cfg.patch + y) * cfg.patch + x; };
    w[static_cast<int64_t>(idx(c, y0, x0)) * d + col] += amp;
    w[static_cast<int64_t>(idx(c, y1, x1)) * d + col] -= amp;
  }
  mp.embed_b = Tensor::zeros({d});
  mp.pos = gaussian(rng, {t, d});
  mp.cls = gaussian(rng, {1, d});
  mp.pv = gaussian(rng, {2, d});
  for (int i = 0; i < cfg.depth; ++i) {
    LayerParams L;
    L.ln1_g = Tensor::full({d}, 1.0);
    L.ln1_b = Tensor::zeros({d});
    L.ln2_g = Tensor::full({d}, 1.0);
    L.ln2_b = Tensor::zeros({d});
    L.attn.heads = cfg.heads;
    const double wproj = 1.0 / std::sqrt(static_cast<double>(d));
    const double whid = 1.0 / std::sqrt(static_cast<double>(hid));
    L.attn.w_q = gaussian(rng, {d, d}, wproj);
    L.attn.w_k = gaussian(rng, {d, d}, wproj);
    L.attn.w_v = gaussian(rng, {d, d}, wproj);
    L.attn.w_o = gaussian(rng, {d, d}, wproj);
    L.mlp_w1 = gaussian(rng, {d, hid}, wproj);
    L.mlp_b1 = Tensor::zeros({hid});
    L.mlp_w2 = gaussian(rng, {hid, d}, whid);
    L.mlp_b2 = Tensor::zeros({d});
    const LayerKind kind = plan[static_cast<size_t>(i)];
    if (kind != LayerKind::Plain) {
      for (int e = 0; e < cfg.pool_size; ++e)
        L.pool.entries.emplace_back(gaussian(rng, {cfg.prompt_len, d}),
                                    gaussian(rng, {cfg.prompt_len, d}));
    }
    if (kind == LayerKind::RgCg || kind == LayerKind::PlainCg) {
      CgParams cg;
      for (int h = 0; h < cfg.heads; ++h) {
        cg.head_conv_w.push_back(gaussian(rng, {3, dh, dh}, 1.0 / std::sqrt(3.0 * dh)));
        cg.head_conv_b.push_back(Tensor::zeros({dh}));
      }
      cg.mlp_w1 = gaussian(rng, {d, hid}, 1.0 / std::sqrt(static_cast<double>(d)));
      cg.mlp_b1 = Tensor::zeros({hid});
      cg.mlp_w2 = gaussian(rng, {hid, d}, 1.0 / std::sqrt(static_cast<double>(hid)));
      cg.mlp_b2 = Tensor::zeros({d});
      cg.g_conv_w = gaussian(rng, {3, d, d}, 1.0 / std::sqrt(3.0 * d));
      cg.g_conv_b = Tensor::zeros({d});
      L.cg = std::move(cg);
    }
    mp.layers.push_back(std::move(L));
  }
  mp.lnf_g = Tensor::full({d}, 1.0);
  mp.lnf_b = Tensor::zeros({d});
  mp.head_rf_w = gaussian(rng, {d, 1}, 1.0 / std::sqrt(static_cast<double>(d)));
  mp.head_rf_b = Tensor::zeros({1});
  mp.head_cmp_w = gaussian(rng, {d, 1}, 1.0 / std::sqrt(static_cast<double>(d)));
  mp.head_cmp_b = Tensor::zeros({1});
  return m;
}

Model build_model(const BackboneConfig& cfg, uint64_t seed) {
  return build_model(cfg, default_plan(cfg), seed);
}

ModelParams watch_params(const ModelParams& p, Tape& tape) {
  ModelParams w = p;
  for (auto& [name, t] : param_registry(w)) {
    (void)name;
    *t = tape.watch(*t);
  }
  return w;
}

ForwardOutput forward(const BackboneConfig& cfg, const std::vector<LayerKind>& plan,
                      const ModelParams& p, const Tensor& images,
                      const std::vector<int>& paired_rows, const ForwardOptions& opt, Rng& rng) {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw DimensionError("forward: images must be [B,3,S,S]");
  const int b = images.dim(0);
  const int t = cfg.tokens(), d = cfg.dim;

  auto proj = [&](const Tensor& src, const Tensor& w) {
    return reshape(matmul(reshape(src, {b * t, d}), w), {b, t, d});
  };

  Tensor patches = extract_patches(images, cfg.patch);  // untracked
  Tensor tok = add_rowvec(matmul(patches, p.embed_w), p.embed_b);
  Tensor x =
      concat({tile_rows(concat({p.cls, p.pv}, 0), b), reshape(tok, {b, cfg.patches(), d})}, 1);
  x = reshape(add_rowvec(reshape(x, {b, t * d}), reshape(p.pos, {t * d})), {b, t, d});

  ForwardOutput out;
  for (size_t li = 0; li < plan.size(); ++li) {
    const LayerParams& L = p.layers[li];
    const LayerKind kind = plan[li];
    Tensor z = layernorm(x, L.ln1_g, L.ln1_b);
    Tensor attn_out;
    int picked = -1;
    if (kind == LayerKind::Plain) {
      attn_out = msa(proj(z, L.attn.w_q), proj(z, L.attn.w_k), proj(z, L.attn.w_v), L.attn);
    } else {
      auto [pk, pv] = select_prompt(L.pool, opt.select, &rng, opt.fixed_index, &picked);
      if (kind == LayerKind::Rg) {
        attn_out = residual_guidance(z, pk, pv, L.attn);
      } else if (kind == LayerKind::RgCg) {
        Tensor rg = residual_guidance(z, pk, pv, L.attn);
        attn_out = coordination_guidance(rg, z, pk, pv, L.attn, *L.cg);
      } else {  // PlainCg
        Tensor h =
            msa(proj(z, L.attn.w_q), proj(z, L.attn.w_k), proj(z, L.attn.w_v), L.attn);
        attn_out = coordination_guidance(h, z, pk, pv, L.attn, *L.cg);
      }
    }
    if (opt.trace) opt.trace->push_back(kind_str(kind));
    out.picked.push_back(picked);
    x = add(x, attn_out);

    Tensor m = layernorm(x, L.ln2_g, L.ln2_b);
    Tensor h1 = gelu(add_rowvec(reshape(matmul(reshape(m, {b * t, d}), L.mlp_w1), {b, t, 2 * d}),
                                L.mlp_b1));
    Tensor h2 =
        add_rowvec(reshape(matmul(reshape(h1, {b * t, 2 * d}), L.mlp_w2), {b, t, d}), L.mlp_b2);
    x = add(x, h2);
  }

  Tensor f = layernorm(x, p.lnf_g, p.lnf_b);
  out.h_rf = reshape(slice(f, 1, 0, 1), {b, d});
  out.logit_rf = add_rowvec(matmul(out.h_rf, p.head_rf_w), p.head_rf_b);
  if (!paired_rows.empty()) {
    Tensor sel = rows_select(out.h_rf, paired_rows);
    Tensor rev = opt.with_reversal ? reverse_gradient(sel, opt.reversal_scale) : sel;
    out.h_cmp = rev;
    out.logit_cmp = add_rowvec(matmul(rev, p.head_cmp_w), p.head_cmp_b);
  }
  return out;
}

std::vector<double> predict(const Model& m, const Tensor& images) {
  Rng rng(0);  // unused under FullAverage selection
  ForwardOptions opt;
  opt.select = SelectMode::FullAverage;
  ForwardOutput out = forward(m.cfg, m.plan, m.params, images, {}, opt, rng);
  std::vector<double> probs(static_cast<size_t>(images.dim(0)));
  for (size_t i = 0; i < probs.size(); ++i) {
    const double z = out.logit_rf.data()[i];
    probs[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return probs;
}

int beam_pick(const Model& m, const Tensor& images, const std::vector<double>& y_targets) {
  int pool_size = 0;
  for (const auto& L : m.params.layers)
    if (!L.pool.entries.empty()) pool_size = L.pool.size();
  if (pool_size == 0) throw ConfigError("beam_pick: model has no guide prompt pools");
  Tensor targets = Tensor::from({static_cast<int>(y_targets.size()), 1},
                                std::vector<double>(y_targets));
  Rng rng(0);
  int best = 0;
  double best_loss = 0.0;
  for (int j = 0; j < pool_size; ++j) {
    ForwardOptions opt;
    opt.select = SelectMode::Fixed;
    opt.fixed_index = j;
    ForwardOutput out = forward(m.cfg, m.plan, m.params, images, {}, opt, rng);
    const double loss = bce_with_logits(out.logit_rf, targets).scalar();
    if (j == 0 || loss < best_loss) {
      best = j;
      best_loss = loss;
    }
  }
  return best;
}

void save_checkpoint(const Model& m, const std::string& path) {
  json header;
  header["config"] = {{"depth", m.cfg.depth},     {"dim", m.cfg.dim},
                      {"heads", m.cfg.heads},     {"patch", m.cfg.patch},
                      {"n_b2e", m.cfg.n_b2e},     {"pool_size", m.cfg.pool_size},
                      {"prompt_len", m.cfg.prompt_len}};
  header["plan"] = plan_str(m.plan);
  json table = json::array();
  auto reg = param_registry(m.params);
  uint64_t offset = 0;
  for (auto& [name, t] : reg) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t->shape;
    entry["offset"] = offset;
    table.push_back(entry);
    offset += static_cast<uint64_t>(t->numel()) * sizeof(double);
  }
  header["tensors"] = table;
  const std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write("PLADA1", 6);
  const uint64_t hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (auto& [name, t] : reg) {
    (void)name;
    f.write(reinterpret_cast<const char*>(t->data()),
            static_cast<std::streamsize>(t->numel() * static_cast<int64_t>(sizeof(double))));
  }
  if (!f) throw IoError("checkpoint write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  char magic[6];
  f.read(magic, 6);
  if (f.gcount() != 6 || std::memcmp(magic, "PLADA1", 6) != 0)
    throw IoError(path + ": not a PLADA1 checkpoint");
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  json header = json::parse(htext);

  BackboneConfig cfg;
  const json& c = header.at("config");
  cfg.depth = c.at("depth").get<int>();
  cfg.dim = c.at("dim").get<int>();
  cfg.heads = c.at("heads").get<int>();
  cfg.patch = c.at("patch").get<int>();
  cfg.n_b2e = c.at("n_b2e").get<int>();
  cfg.pool_size = c.at("pool_size").get<int>();
  cfg.prompt_len = c.at("prompt_len").get<int>();
  Model m = build_model(cfg, parse_plan(header.at("plan").get<std::string>()), 0);

  auto reg = param_registry(m.params);
  const json& table = header.at("tensors");
  if (table.size() != reg.size()) throw IoError(path + ": checkpoint tensor table size mismatch");
  for (size_t i = 0; i < reg.size(); ++i) {
    const json& entry = table[i];
    Tensor* t = reg[i].second;
    if (entry.at("name").get<std::string>() != reg[i].first)
      throw IoError(path + ": tensor name mismatch at index " + std::to_string(i));
    if (entry.at("shape").get<std::vector<int>>() != t->shape)
      throw IoError(path + ": tensor shape mismatch for " + reg[i].first);
    f.read(reinterpret_cast<char*>(t->data()),
           static_cast<std::streamsize>(t->numel() * static_cast<int64_t>(sizeof(double))));
    if (f.gcount() != static_cast<std::streamsize>(t->numel() * static_cast<int64_t>(sizeof(double))))
      throw IoError(path + ": truncated tensor payload");
  }
  return m;
}

}  // namespace plada::nn
