#pragma once

#include <cmath>
#include <vector>

#include "plada/data.hpp"
#include "plada/jpeg.hpp"

namespace plada_tests {

inline double luma_std(const plada::jpeg::Image& img) {
  const size_t n = img.pixels.size() / 3;
  double mean = 0;
  std::vector<double> lum(n);
  for (size_t i = 0; i < n; ++i) {
    lum[i] = 0.299 * img.pixels[i * 3] + 0.587 * img.pixels[i * 3 + 1] +
             0.114 * img.pixels[i * 3 + 2];
    mean += lum[i];
  }
  mean /= static_cast<double>(n);
  double var = 0;
  for (double v : lum) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(n));
}

// Textured reference corpus for compression-physics checks: near-flat images
// (where grid steps round away nondeterministically in quality) are excluded.
inline std::vector<plada::jpeg::Image> jpeg_corpus(uint64_t seed, int count) {
  std::vector<plada::jpeg::Image> out;
  for (uint64_t idx = 0; static_cast<int>(out.size()) < count; ++idx) {
    plada::jpeg::Image img = plada::data::gen_real_image(seed, idx);
    if (luma_std(img) >= 12.0) out.push_back(std::move(img));
  }
  return out;
}

}  // namespace plada_tests
