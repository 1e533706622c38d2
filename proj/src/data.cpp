#include "plada/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace plada::data {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr uint64_t kStreamReal = 0x52454131;
constexpr uint64_t kStreamFake = 0x46414b45;
constexpr uint64_t kStreamPairQp = 0x51505251;
constexpr uint64_t kStreamShuffle = 0x53485546;
constexpr uint64_t kStreamEpoch = 0x45504f43;
constexpr uint64_t kStreamProtoQp = 0x50524f51;

constexpr int kW = kImageSize;

// Separable box blur with edge clamping, `passes` repetitions.
void box_blur(std::vector<double>& field, int radius, int passes) {
  std::vector<double> tmp(field.size());
  const double inv = 1.0 / (2.0 * radius + 1.0);
  for (int p = 0; p < passes; ++p) {
    for (int y = 0; y < kW; ++y)
      for (int x = 0; x < kW; ++x) {
        double s = 0.0;
        for (int d = -radius; d <= radius; ++d)
          s += field[static_cast<size_t>(y) * kW + std::clamp(x + d, 0, kW - 1)];
        tmp[static_cast<size_t>(y) * kW + x] = s * inv;
      }
    for (int x = 0; x < kW; ++x)
      for (int y = 0; y < kW; ++y) {
        double s = 0.0;
        for (int d = -radius; d <= radius; ++d)
          s += tmp[static_cast<size_t>(std::clamp(y + d, 0, kW - 1)) * kW + x];
        field[static_cast<size_t>(y) * kW + x] = s * inv;
      }
  }
}

// Shared procedural source: smooth structure field + fine texture + a few
// soft-edged shapes, float RGB in roughly [0,255].
std::array<std::vector<double>, 3> gen_base_float(Rng& rng) {
  std::vector<double> structure(kW * kW), texture(kW * kW);
  for (auto& v : structure) v = rng.normal();
  for (auto& v : texture) v = rng.normal();
  box_blur(structure, 2, 2);
  box_blur(texture, 1, 1);

  const double base_gray = rng.uniform(96.0, 160.0);
  const double structure_amp = rng.uniform(90.0, 150.0);
  const double texture_amp = rng.uniform(14.0, 30.0);
  std::array<double, 3> tint{rng.uniform(-18.0, 18.0), rng.uniform(-18.0, 18.0),
                             rng.uniform(-18.0, 18.0)};
  std::array<double, 3> chroma{rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15),
                               rng.uniform(0.85, 1.15)};

  std::array<std::vector<double>, 3> img;
  for (auto& c : img) c.resize(kW * kW);
  for (int i = 0; i < kW * kW; ++i)
    for (int c = 0; c < 3; ++c)
      img[static_cast<size_t>(c)][static_cast<size_t>(i)] =
          base_gray + tint[static_cast<size_t>(c)] +
          chroma[static_cast<size_t>(c)] *
              (structure_amp * structure[static_cast<size_t>(i)] +
               texture_amp * texture[static_cast<size_t>(i)]);

  const int n_shapes = static_cast<int>(rng.uniform_int(1, 3));
  for (int s = 0; s < n_shapes; ++s) {
    const double cx = rng.uniform(8.0, 56.0), cy = rng.uniform(8.0, 56.0);
    const double rx = rng.uniform(7.0, 22.0), ry = rng.uniform(7.0, 22.0);
    const double soft = rng.uniform(4.0, 8.0);
    std::array<double, 3> col{rng.uniform(40.0, 215.0), rng.uniform(40.0, 215.0),
                              rng.uniform(40.0, 215.0)};
    for (int y = 0; y < kW; ++y)
      for (int x = 0; x < kW; ++x) {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        const double alpha = 1.0 / (1.0 + std::exp(soft * (dx * dx + dy * dy - 1.0)));
        if (alpha < 1e-4) continue;
        for (int c = 0; c < 3; ++c) {
          double& p = img[static_cast<size_t>(c)][static_cast<size_t>(y) * kW + x];
          p += 0.75 * alpha * (col[static_cast<size_t>(c)] - p);
        }
      }
  }

  // Global contrast with a thin near-flat tail: most images stay crisp, a few
  // sit close to the 8-bit quantization floor where any fingerprint drowns.
  const double u = rng.uniform();
  const double contrast = std::exp(-5.0 * u * u * u * u);
  for (int c = 0; c < 3; ++c) {
    double mu = 0.0;
    for (double v : img[static_cast<size_t>(c)]) mu += v;
    mu /= kW * kW;
    for (double& v : img[static_cast<size_t>(c)]) v = mu + contrast * (v - mu);
  }
  return img;
}

jpeg::Image quantize_to_image(const std::array<std::vector<double>, 3>& f) {
  jpeg::Image img = jpeg::Image::create(kW, kW);
  for (int i = 0; i < kW * kW; ++i)
    for (int c = 0; c < 3; ++c) {
      long v = std::lround(f[static_cast<size_t>(c)][static_cast<size_t>(i)]);
      img.pixels[static_cast<size_t>(i) * 3 + static_cast<size_t>(c)] =
          static_cast<uint8_t>(std::clamp(v, 0L, 255L));
    }
  return img;
}

int draw_qp(const QpRegime& regime, Rng& rng) {
  if (regime.kind == QpRegime::Kind::Fixed) return regime.fixed;
  return static_cast<int>(rng.uniform_int(regime.lo, regime.hi));
}

}  // namespace

QpRegime QpRegime::parse(const std::string& s) {
  QpRegime r;
  if (s.rfind("fixed:", 0) == 0) {
    r.kind = Kind::Fixed;
    r.fixed = std::stoi(s.substr(6));
  } else if (s.rfind("uniform:", 0) == 0) {
    r.kind = Kind::Uniform;
    const std::string body = s.substr(8);
    const size_t dash = body.find('-');
    if (dash == std::string::npos)
      throw ValidationError("qp regime: expected uniform:LO-HI, got " + s);
    r.lo = std::stoi(body.substr(0, dash));
    r.hi = std::stoi(body.substr(dash + 1));
  } else {
    throw ValidationError("qp regime: expected fixed:N or uniform:LO-HI, got " + s);
  }
  const int lo = r.kind == Kind::Fixed ? r.fixed : r.lo;
  const int hi = r.kind == Kind::Fixed ? r.fixed : r.hi;
  if (lo < 1 || hi > 100 || lo > hi) throw ValidationError("qp regime out of range: " + s);
  return r;
}

std::string QpRegime::str() const {
  return kind == Kind::Fixed ? "fixed:" + std::to_string(fixed)
                             : "uniform:" + std::to_string(lo) + "-" + std::to_string(hi);
}

Protocol Protocol::parse(const std::string& s) {
  Protocol p;
  if (s == "raw") {
    p.kind = Kind::Raw;
  } else if (s.rfind("aware:", 0) == 0) {
    p.kind = Kind::QualityAware;
    p.qp = std::stoi(s.substr(6));
    if (p.qp < 1 || p.qp > 100) throw ValidationError("protocol qp out of range: " + s);
  } else if (s.rfind("agnostic:", 0) == 0) {
    p.kind = Kind::QualityAgnostic;
    const std::string body = s.substr(9);
    const size_t dash = body.find('-');
    if (dash == std::string::npos)
      throw ValidationError("protocol: expected agnostic:LO-HI, got " + s);
    p.lo = std::stoi(body.substr(0, dash));
    p.hi = std::stoi(body.substr(dash + 1));
    if (p.lo < 1 || p.hi > 100 || p.lo > p.hi)
      throw ValidationError("protocol qp range out of range: " + s);
  } else {
    throw ValidationError("protocol: expected aware:N | agnostic:LO-HI | raw, got " + s);
  }
  return p;
}

std::string Protocol::str() const {
  switch (kind) {
    case Kind::QualityAware:
      return "aware:" + std::to_string(qp);
    case Kind::QualityAgnostic:
      return "agnostic:" + std::to_string(lo) + "-" + std::to_string(hi);
    default:
      return "raw";
  }
}

// Additive sensor-style noise applied after any resampling, so it is the one
// component a fingerprint cannot scale away.
void add_sensor_noise(std::array<std::vector<double>, 3>& img, Rng& rng) {
  const double sigma = std::exp(rng.uniform(std::log(0.4), std::log(1.2)));
  for (auto& plane : img)
    for (double& v : plane) v += sigma * rng.normal();
}

jpeg::Image gen_real_image(uint64_t seed, uint64_t index) {
  Rng rng = Rng::derive(seed, kStreamReal, index);
  auto base = gen_base_float(rng);
  add_sensor_noise(base, rng);
  return quantize_to_image(base);
}

// Peak amplitude of the periodic generator trace that rides on the resampled
// image. Sub-noise visually, but a Nyquist-band component that block-DCT
// quantization wipes at mid qualities.
constexpr double kCheckerAmp = 2.0;

jpeg::Image gen_fake_image(uint64_t seed, uint64_t index, double strength) {
  if (!(strength > 0.0 && strength <= 1.0))
    throw ValidationError("gen_fake: strength must be in (0,1]");
  Rng rng = Rng::derive(seed, kStreamFake, index);
  auto base = gen_base_float(rng);
  // x2 box downsample + nearest-neighbor upsample, blended at `strength`,
  // plus the checkerboard harmonic such an upsampling cycle leaves behind.
  for (auto& plane : base) {
    std::vector<double> up(kW * kW);
    for (int y = 0; y < kW; y += 2)
      for (int x = 0; x < kW; x += 2) {
        const double m = 0.25 * (plane[static_cast<size_t>(y) * kW + x] +
                                 plane[static_cast<size_t>(y) * kW + x + 1] +
                                 plane[static_cast<size_t>(y + 1) * kW + x] +
                                 plane[static_cast<size_t>(y + 1) * kW + x + 1]);
        up[static_cast<size_t>(y) * kW + x] = m;
        up[static_cast<size_t>(y) * kW + x + 1] = m;
        up[static_cast<size_t>(y + 1) * kW + x] = m;
        up[static_cast<size_t>(y + 1) * kW + x + 1] = m;
      }
    for (int y = 0; y < kW; ++y)
      for (int x = 0; x < kW; ++x) {
        const size_t i = static_cast<size_t>(y) * kW + x;
        const double checker = ((x + y) & 1) ? -kCheckerAmp : kCheckerAmp;
        plane[i] = (1.0 - strength) * plane[i] + strength * (up[i] + checker);
      }
  }
  add_sensor_noise(base, rng);
  return quantize_to_image(base);
}

std::vector<jpeg::Image> gen_real(uint64_t seed, int count) {
  if (count < 1) throw ValidationError("gen_real: count must be >= 1");
  std::vector<jpeg::Image> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(gen_real_image(seed, static_cast<uint64_t>(i)));
  return out;
}

std::vector<jpeg::Image> gen_fake(uint64_t seed, int count, double strength) {
  if (count < 1) throw ValidationError("gen_fake: count must be >= 1");
  std::vector<jpeg::Image> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(gen_fake_image(seed, static_cast<uint64_t>(i), strength));
  return out;
}

Dataset build_dataset(const DatasetManifest& m) {
  if (m.paired_fraction < 0.0 || m.paired_fraction > 0.5)
    throw ValidationError(
        "paired_fraction must be <= 0.5: paired data is limited to at most half the dataset");
  if (m.n_total < 1) throw ValidationError("n_total must be >= 1");
  if (m.class_balance < 0.0 || m.class_balance > 1.0)
    throw ValidationError("class_balance must be in [0,1]");

  const int n_fake = static_cast<int>(std::lround(m.class_balance * m.n_total));
  const int n_real = m.n_total - n_fake;

  std::vector<Sample> raws;
  raws.reserve(static_cast<size_t>(m.n_total));
  for (int i = 0; i < n_real; ++i) {
    Sample s;
    s.image = gen_real_image(m.seed, static_cast<uint64_t>(i));
    s.y = 0;
    raws.push_back(std::move(s));
  }
  for (int i = 0; i < n_fake; ++i) {
    Sample s;
    s.image = gen_fake_image(m.seed, static_cast<uint64_t>(i), m.fingerprint_strength);
    s.y = 1;
    raws.push_back(std::move(s));
  }

  // Choose the paired subset and emit compressed twins.
  const int n_paired = static_cast<int>(std::lround(m.paired_fraction * m.n_total));
  std::vector<int> idx(raws.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  Rng sel_rng = Rng::derive(m.seed, kStreamShuffle);
  sel_rng.shuffle(idx);

  // A unit is either a lone raw sample or a (raw, compressed twin) pair;
  // units are shuffled, then flattened.
  std::vector<std::vector<Sample>> units;
  units.reserve(raws.size());
  for (int k = 0; k < static_cast<int>(raws.size()); ++k) {
    Sample& raw = raws[static_cast<size_t>(idx[static_cast<size_t>(k)])];
    if (k < n_paired) {
      Rng qp_rng = Rng::derive(m.seed, kStreamPairQp, static_cast<uint64_t>(k));
      const int qp = draw_qp(m.qp_regime, qp_rng);
      Sample twin;
      twin.image = jpeg::compress(raw.image, qp);
      twin.y = raw.y;
      twin.y_c = 1;
      twin.qp = qp;
      twin.pair_id = k;
      twin.source_hash = jpeg::image_hash(raw.image);
      raw.pair_id = k;
      units.push_back({std::move(raw), std::move(twin)});
    } else {
      units.push_back({std::move(raw)});
    }
  }
  Rng unit_rng = Rng::derive(m.seed, kStreamShuffle, 1);
  unit_rng.shuffle(units);

  Dataset ds;
  ds.manifest = m;
  for (auto& u : units)
    for (auto& s : u) ds.samples.push_back(std::move(s));
  return ds;
}

Dataset make_test_set(const DatasetManifest& m, const Protocol& protocol,
                      std::optional<uint64_t> train_seed) {
  if (train_seed && *train_seed == m.seed)
    throw ValidationError("test set seed overlaps the training manifest seed");
  DatasetManifest raw_manifest = m;
  raw_manifest.paired_fraction = 0.0;
  Dataset raw = build_dataset(raw_manifest);

  if (protocol.kind == Protocol::Kind::Raw) return raw;
  for (size_t i = 0; i < raw.samples.size(); ++i) {
    Sample& s = raw.samples[i];
    int qp = protocol.qp;
    if (protocol.kind == Protocol::Kind::QualityAgnostic) {
      Rng rng = Rng::derive(m.seed, kStreamProtoQp, static_cast<uint64_t>(i));
      qp = static_cast<int>(rng.uniform_int(protocol.lo, protocol.hi));
    }
    s.source_hash = jpeg::image_hash(s.image);
    s.image = jpeg::compress(s.image, qp);
    s.y_c = 1;
    s.qp = qp;
  }
  return raw;
}

Tensor images_to_tensor(const std::vector<const jpeg::Image*>& imgs) {
  const int b = static_cast<int>(imgs.size());
  Tensor t = Tensor::zeros({b, 3, kW, kW});
  double* p = t.data();
  for (int i = 0; i < b; ++i) {
    const jpeg::Image& img = *imgs[static_cast<size_t>(i)];
    if (img.width != kW || img.height != kW)
      throw DimensionError("images_to_tensor: expected 64x64 images");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < kW; ++y)
        for (int x = 0; x < kW; ++x)
          p[((static_cast<int64_t>(i) * 3 + c) * kW + y) * kW + x] =
              img.pixels[(static_cast<size_t>(y) * kW + x) * 3 + static_cast<size_t>(c)] / 255.0;
  }
  return t;
}

Batch make_batch(const Dataset& ds, const std::vector<int>& indices) {
  Batch b;
  std::vector<const jpeg::Image*> imgs;
  std::map<int, std::pair<int, int>> twin_rows;  // pair_id -> (raw_row, cmp_row)
  for (size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = ds.samples[static_cast<size_t>(indices[r])];
    imgs.push_back(&s.image);
    b.y.push_back(s.y);
    b.y_c.push_back(s.y_c);
    b.qp.push_back(s.qp.value_or(-1));
    b.paired_mask.push_back(s.pair_id.has_value());
    b.sample_ids.push_back(indices[r]);
    b.partition.sets[static_cast<size_t>(s.y)][static_cast<size_t>(s.y_c)].push_back(
        static_cast<int>(r));
    if (s.pair_id) {
      auto& rows = twin_rows.try_emplace(*s.pair_id, -1, -1).first->second;
      (s.y_c == 0 ? rows.first : rows.second) = static_cast<int>(r);
    }
  }
  for (const auto& [pid, rows] : twin_rows) {
    (void)pid;
    if (rows.first < 0 || rows.second < 0) continue;  // twin fell outside this batch
    const int cls = b.y[static_cast<size_t>(rows.first)];
    b.pairs_by_class[static_cast<size_t>(cls)].emplace_back(rows.second, rows.first);
  }
  b.images = images_to_tensor(imgs);
  return b;
}

BatchStream::BatchStream(const Dataset& ds, int batch_size, uint64_t seed)
    : ds_(&ds), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 4) throw ValidationError("batch_size must be >= 4");
  per_epoch_ = static_cast<int>(ds.samples.size()) / batch_size;
}

std::vector<int> BatchStream::order(int epoch) const {
  // Units keep raw/compressed twins adjacent through the reshuffle so paired
  // rows land in one batch.
  std::map<int, std::pair<int, int>> twins;
  std::vector<std::vector<int>> units;
  for (int i = 0; i < static_cast<int>(ds_->samples.size()); ++i) {
    const Sample& s = ds_->samples[static_cast<size_t>(i)];
    if (!s.pair_id) {
      units.push_back({i});
      continue;
    }
    auto [it, fresh] = twins.try_emplace(*s.pair_id, -1, -1);
    (s.y_c == 0 ? it->second.first : it->second.second) = i;
    if (fresh) units.push_back({-(*s.pair_id) - 1});  // placeholder in first-seen position
  }
  for (auto& u : units) {
    if (u[0] >= 0) continue;
    const auto& rows = twins.at(-u[0] - 1);
    u.clear();
    if (rows.first >= 0) u.push_back(rows.first);
    if (rows.second >= 0) u.push_back(rows.second);
  }
  Rng rng = Rng::derive(seed_, kStreamEpoch, static_cast<uint64_t>(epoch));
  rng.shuffle(units);
  std::vector<int> flat;
  flat.reserve(ds_->samples.size());
  for (const auto& u : units) flat.insert(flat.end(), u.begin(), u.end());
  return flat;
}

Batch BatchStream::batch(int epoch, int index) const {
  if (index < 0 || index >= per_epoch_) throw Error("batch index out of range");
  const std::vector<int> flat = order(epoch);
  std::vector<int> sel(flat.begin() + static_cast<std::ptrdiff_t>(index) * batch_size_,
                       flat.begin() + static_cast<std::ptrdiff_t>(index + 1) * batch_size_);
  return make_batch(*ds_, sel);
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  json m;
  m["seed"] = ds.manifest.seed;
  m["n_total"] = ds.manifest.n_total;
  m["paired_fraction"] = ds.manifest.paired_fraction;
  m["qp_regime"] = ds.manifest.qp_regime.str();
  m["class_balance"] = ds.manifest.class_balance;
  m["fingerprint_strength"] = ds.manifest.fingerprint_strength;
  std::ofstream mf(dir + "/manifest.json");
  mf << m.dump(2) << "\n";

  std::ofstream csv(dir + "/samples.csv");
  csv << "file,y,y_c,qp,pair_id\n";
  char name[32];
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    std::snprintf(name, sizeof name, "img_%06zu.ppm", i);
    jpeg::write_ppm(s.image, dir + "/" + name);
    csv << name << "," << s.y << "," << s.y_c << ",";
    if (s.qp) csv << *s.qp;
    csv << ",";
    if (s.pair_id) csv << *s.pair_id;
    csv << "\n";
  }
  if (!csv) throw IoError("failed writing dataset to " + dir);
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw IoError("cannot open " + dir + "/manifest.json");
  json m = json::parse(mf);
  Dataset ds;
  ds.manifest.seed = m.at("seed").get<uint64_t>();
  ds.manifest.n_total = m.at("n_total").get<int>();
  ds.manifest.paired_fraction = m.at("paired_fraction").get<double>();
  ds.manifest.qp_regime = QpRegime::parse(m.at("qp_regime").get<std::string>());
  ds.manifest.class_balance = m.at("class_balance").get<double>();
  ds.manifest.fingerprint_strength = m.at("fingerprint_strength").get<double>();

  std::ifstream csv(dir + "/samples.csv");
  if (!csv) throw IoError("cannot open " + dir + "/samples.csv");
  std::string line;
  std::getline(csv, line);  // header
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string file, ys, ycs, qps, pids;
    std::getline(ss, file, ',');
    std::getline(ss, ys, ',');
    std::getline(ss, ycs, ',');
    std::getline(ss, qps, ',');
    std::getline(ss, pids, ',');
    Sample s;
    s.image = jpeg::read_ppm(dir + "/" + file);
    s.y = std::stoi(ys);
    s.y_c = std::stoi(ycs);
    if (!qps.empty()) s.qp = std::stoi(qps);
    if (!pids.empty()) s.pair_id = std::stoi(pids);
    ds.samples.push_back(std::move(s));
  }
  // Restore compressed twins' source digests from their raw twins.
  std::map<int, const jpeg::Image*> raw_of;
  for (const Sample& s : ds.samples)
    if (s.pair_id && s.y_c == 0) raw_of[*s.pair_id] = &s.image;
  for (Sample& s : ds.samples)
    if (s.pair_id && s.y_c == 1) {
      auto it = raw_of.find(*s.pair_id);
      if (it != raw_of.end()) s.source_hash = jpeg::image_hash(*it->second);
    }
  return ds;
}

}  // namespace plada::data
