#include "plada/jpeg.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace plada::jpeg {

namespace {

// Standard base luminance quantization table, row-major (no zig-zag).
constexpr int kBaseTable[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

struct DctBasis {
  double c[8][8];
  DctBasis() {
    const double pi = 3.14159265358979323846;
    for (int u = 0; u < 8; ++u) {
      const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) c[u][x] = a * std::cos((2.0 * x + 1.0) * u * pi / 16.0);
    }
  }
};
const DctBasis kBasis;

void require_block_dims(const Image& img, const char* op) {
  if (img.width <= 0 || img.height <= 0 || img.width % 8 != 0 || img.height % 8 != 0)
    throw ValidationError(std::string(op) + ": image dimensions must be positive multiples of 8");
}

inline uint8_t clamp_u8(double v) {
  long r = std::lround(v);
  if (r < 0) r = 0;
  if (r > 255) r = 255;
  return static_cast<uint8_t>(r);
}

}  // namespace

Image Image::create(int w, int h) {
  if (w <= 0 || h <= 0 || w % 8 != 0 || h % 8 != 0)
    throw ValidationError("Image dimensions must be positive multiples of 8");
  Image img;
  img.width = w;
  img.height = h;
  img.pixels.assign(static_cast<size_t>(w) * h * 3, 0);
  return img;
}

void dct8(const double in[64], double out[64]) {
  // tmp = C * in
  double tmp[64];
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int y = 0; y < 8; ++y) s += kBasis.c[u][y] * in[y * 8 + x];
      tmp[u * 8 + x] = s;
    }
  // out = tmp * C^T
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int x = 0; x < 8; ++x) s += tmp[u * 8 + x] * kBasis.c[v][x];
      out[u * 8 + v] = s;
    }
}

void idct8(const double in[64], double out[64]) {
  // tmp = C^T * in
  double tmp[64];
  for (int y = 0; y < 8; ++y)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int u = 0; u < 8; ++u) s += kBasis.c[u][y] * in[u * 8 + v];
      tmp[y * 8 + v] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int v = 0; v < 8; ++v) s += tmp[y * 8 + v] * kBasis.c[v][x];
      out[y * 8 + x] = s;
    }
}

QuantTable quant_table_for_quality(int q) {
  if (q < 1 || q > 100) throw ValidationError("quality must be in [1,100]");
  const int s = q < 50 ? 5000 / q : 200 - 2 * q;
  QuantTable t{};
  for (int i = 0; i < 64; ++i) {
    int v = (kBaseTable[i] * s + 50) / 100;
    t[static_cast<size_t>(i)] = v < 1 ? 1 : (v > 255 ? 255 : v);
  }
  return t;
}

Image compress(const Image& img, int qp) {
  require_block_dims(img, "compress");
  const QuantTable qt = quant_table_for_quality(qp);
  const int w = img.width, h = img.height;
  const size_t n = static_cast<size_t>(w) * h;

  // BT.601 full-range color transform.
  std::vector<double> ch[3];
  for (auto& c : ch) c.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const double r = img.pixels[i * 3 + 0];
    const double g = img.pixels[i * 3 + 1];
    const double b = img.pixels[i * 3 + 2];
    ch[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
    ch[1][i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    ch[2][i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
  }

  double block[64], coef[64];
  for (auto& plane : ch)
    for (int by = 0; by < h; by += 8)
      for (int bx = 0; bx < w; bx += 8) {
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            block[y * 8 + x] = plane[static_cast<size_t>(by + y) * w + (bx + x)] - 128.0;
        dct8(block, coef);
        for (int i = 0; i < 64; ++i) {
          const double q = qt[static_cast<size_t>(i)];
          coef[i] = static_cast<double>(std::llround(coef[i] / q)) * q;
        }
        idct8(coef, block);
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            plane[static_cast<size_t>(by + y) * w + (bx + x)] = block[y * 8 + x] + 128.0;
      }

  Image out = Image::create(w, h);
  for (size_t i = 0; i < n; ++i) {
    const double y = ch[0][i];
    const double cb = ch[1][i] - 128.0;
    const double cr = ch[2][i] - 128.0;
    out.pixels[i * 3 + 0] = clamp_u8(y + 1.402 * cr);
    out.pixels[i * 3 + 1] = clamp_u8(y - 0.344136 * cb - 0.714136 * cr);
    out.pixels[i * 3 + 2] = clamp_u8(y + 1.772 * cb);
  }
  return out;
}

double blockiness(const Image& img) {
  require_block_dims(img, "blockiness");
  const int w = img.width, h = img.height;
  std::vector<double> luma(static_cast<size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y) * w + x;
      luma[i] = 0.299 * img.pixels[i * 3] + 0.587 * img.pixels[i * 3 + 1] +
                0.114 * img.pixels[i * 3 + 2];
    }
  double grid_sum = 0.0, off_sum = 0.0;
  int64_t grid_n = 0, off_n = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 1; x < w; ++x) {
      const double d = std::fabs(luma[static_cast<size_t>(y) * w + x] -
                                 luma[static_cast<size_t>(y) * w + x - 1]);
      if (x % 8 == 0) {
        grid_sum += d;
        ++grid_n;
      } else {
        off_sum += d;
        ++off_n;
      }
    }
  for (int x = 0; x < w; ++x)
    for (int y = 1; y < h; ++y) {
      const double d = std::fabs(luma[static_cast<size_t>(y) * w + x] -
                                 luma[static_cast<size_t>(y - 1) * w + x]);
      if (y % 8 == 0) {
        grid_sum += d;
        ++grid_n;
      } else {
        off_sum += d;
        ++off_n;
      }
    }
  const double grid_mean = grid_n ? grid_sum / static_cast<double>(grid_n) : 0.0;
  const double off_mean = off_n ? off_sum / static_cast<double>(off_n) : 0.0;
  return std::max(0.0, grid_mean - off_mean);
}

uint64_t image_hash(const Image& img) {
  uint64_t h = fnv1a64(img.pixels.data(), img.pixels.size());
  h = mix64(h, static_cast<uint64_t>(img.width));
  h = mix64(h, static_cast<uint64_t>(img.height));
  return h;
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  auto next_token = [&f, &path]() {
    std::string tok;
    int c;
    while ((c = f.get()) != EOF) {
      if (c == '#') {
        while ((c = f.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw IoError("truncated PPM header in " + path);
    return tok;
  };
  if (next_token() != "P6") throw IoError(path + ": not a binary PPM (P6) file");
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (maxval != 255) throw IoError(path + ": PPM maxval must be 255");
  Image img = Image::create(w, h);
  f.read(reinterpret_cast<char*>(img.pixels.data()),
         static_cast<std::streamsize>(img.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw IoError(path + ": truncated pixel data");
  return img;
}

void write_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw IoError(path + ": write failed");
}

}  // namespace plada::jpeg
