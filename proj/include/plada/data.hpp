#pragma once

#include <optional>
#include <string>
#include <vector>

#include "plada/jpeg.hpp"
#include "plada/oda.hpp"
#include "plada/tensor.hpp"

namespace plada::data {

constexpr int kImageSize = 64;

struct Sample {
  jpeg::Image image;
  int y = 0;                 // 0 real, 1 fake
  int y_c = 0;               // 0 raw, 1 compressed
  std::optional<int> qp;     // present iff y_c == 1
  std::optional<int> pair_id;  // present iff the sample belongs to a raw/compressed pair
  uint64_t source_hash = 0;  // compressed twin only: digest of its raw twin
};

struct QpRegime {
  enum class Kind { Fixed, Uniform } kind = Kind::Fixed;
  int fixed = 50;
  int lo = 30, hi = 100;

  static QpRegime parse(const std::string& s);  // "fixed:50" | "uniform:30-100"
  std::string str() const;
};

struct DatasetManifest {
  uint64_t seed = 0;
  int n_total = 1000;
  double paired_fraction = 0.2;  // <= 0.5
  QpRegime qp_regime;
  double class_balance = 0.5;
  double fingerprint_strength = 0.5;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

struct Protocol {
  enum class Kind { QualityAware, QualityAgnostic, Raw } kind = Kind::QualityAware;
  int qp = 50;
  int lo = 30, hi = 100;

  static Protocol parse(const std::string& s);  // "aware:50" | "agnostic:30-100" | "raw"
  std::string str() const;
};

// Procedural 64x64 sources. `index` selects an independent random stream, so
// generation order and worker count never matter.
jpeg::Image gen_real_image(uint64_t seed, uint64_t index);
jpeg::Image gen_fake_image(uint64_t seed, uint64_t index, double strength);
std::vector<jpeg::Image> gen_real(uint64_t seed, int count);
std::vector<jpeg::Image> gen_fake(uint64_t seed, int count, double strength);

// Balanced raw corpus + paired compressed twins per the manifest; pure
// function of the manifest.
Dataset build_dataset(const DatasetManifest& manifest);

// Fresh evaluation set under a protocol. Throws if the manifest seed collides
// with `train_seed`.
Dataset make_test_set(const DatasetManifest& manifest, const Protocol& protocol,
                      std::optional<uint64_t> train_seed = std::nullopt);

struct Batch {
  Tensor images;  // [B,3,64,64], scaled to [0,1]
  std::vector<int> y, y_c;
  std::vector<int> qp;           // -1 where absent
  std::vector<bool> paired_mask;
  oda::BatchPartition partition;
  // (compressed_row, raw_row) twins co-located in this batch, split by class
  std::array<std::vector<std::pair<int, int>>, 2> pairs_by_class;
  std::vector<int> sample_ids;  // dataset indices
};

// Deterministic per-epoch batching. Twin pairs travel as a unit through the
// shuffle so paired rows land in the same batch; the final short batch is
// dropped.
class BatchStream {
 public:
  BatchStream(const Dataset& ds, int batch_size, uint64_t seed);
  int per_epoch() const { return per_epoch_; }
  std::vector<int> order(int epoch) const;
  Batch batch(int epoch, int index) const;

 private:
  const Dataset* ds_;
  int batch_size_;
  uint64_t seed_;
  int per_epoch_;
};

Batch make_batch(const Dataset& ds, const std::vector<int>& indices);
Tensor images_to_tensor(const std::vector<const jpeg::Image*>& imgs);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace plada::data
