#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "plada/common.hpp"

namespace plada::jpeg {

// 8-bit RGB image; dimensions are multiples of 8 (block grid alignment is an
// invariant of everything in this module).
struct Image {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // row-major RGB

  static Image create(int w, int h);
  uint8_t& at(int x, int y, int c) { return pixels[static_cast<size_t>((y * width + x) * 3 + c)]; }
  uint8_t at(int x, int y, int c) const {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }
};

using QuantTable = std::array<int, 64>;

struct CompressionRecord {
  int qp = 0;
  uint64_t source_hash = 0;
};

// Orthonormal type-II 8x8 DCT and its inverse; round-trip error <= 1e-9.
void dct8(const double in[64], double out[64]);
void idct8(const double in[64], double out[64]);

// IJG quality scaling of the standard base luminance table:
// s = q < 50 ? 5000/q : 200 - 2q; entry = clamp(floor((Q*s + 50)/100), 1, 255).
QuantTable quant_table_for_quality(int q);

// Lossy block-DCT quantization pass: BT.601 full-range YCbCr, per-channel
// per-block quantize/dequantize, no subsampling, no entropy coding.
Image compress(const Image& img, int qp);

// Mean absolute luminance step across the 8-pixel grid boundaries minus the
// mean step across off-grid transitions, floored at 0.
double blockiness(const Image& img);

uint64_t image_hash(const Image& img);

// Binary PPM (P6, maxval 255).
Image read_ppm(const std::string& path);
void write_ppm(const Image& img, const std::string& path);

}  // namespace plada::jpeg
