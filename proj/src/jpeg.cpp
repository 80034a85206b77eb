#include "esf/jpeg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "esf/error.hpp"

namespace esf::jpeg {

const std::array<int, 64> kLuminanceTable = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

std::array<int, 64> scaled_table(int quality) {
  if (quality < 1 || quality > 100) {
    throw ContractError("jpeg: quality " + std::to_string(quality) + " outside 1..100");
  }
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> table{};
  for (std::size_t i = 0; i < 64; ++i) {
    table[i] = std::clamp((kLuminanceTable[i] * scale + 50) / 100, 1, 255);
  }
  return table;
}

namespace {

// basis[u][x] = c(u) * cos((2x + 1) u pi / 16), orthonormal 8-point DCT-II.
struct DctBasis {
  double m[8][8];
  DctBasis() {
    for (int u = 0; u < 8; ++u) {
      const double c = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) {
        m[u][x] = c * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
    }
  }
};

const DctBasis& basis() {
  static const DctBasis b;
  return b;
}

void forward_dct(const double in[64], double out[64]) {
  const auto& m = basis().m;
  double tmp[64];
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0;
      for (int x = 0; x < 8; ++x) s += m[u][x] * in[y * 8 + x];
      tmp[y * 8 + u] = s;
    }
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      double s = 0;
      for (int y = 0; y < 8; ++y) s += m[v][y] * tmp[y * 8 + u];
      out[v * 8 + u] = s;
    }
}

void inverse_dct(const double in[64], double out[64]) {
  const auto& m = basis().m;
  double tmp[64];
  for (int v = 0; v < 8; ++v)
    for (int x = 0; x < 8; ++x) {
      double s = 0;
      for (int u = 0; u < 8; ++u) s += m[u][x] * in[v * 8 + u];
      tmp[v * 8 + x] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0;
      for (int v = 0; v < 8; ++v) s += m[v][y] * tmp[v * 8 + x];
      out[y * 8 + x] = s;
    }
}

}  // namespace

GrayImage roundtrip(const GrayImage& image, int quality) {
  const auto table = scaled_table(quality);
  if (image.empty()) return image;
  const std::size_t w = image.width, h = image.height;
  const std::size_t pw = (w + 7) / 8 * 8, ph = (h + 7) / 8 * 8;
  GrayImage out(w, h);
  double block[64], coef[64], recon[64];
  for (std::size_t by = 0; by < ph; by += 8)
    for (std::size_t bx = 0; bx < pw; bx += 8) {
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t sx = std::min(bx + x, w - 1);
          const std::size_t sy = std::min(by + y, h - 1);
          block[y * 8 + x] = double(image.at(sx, sy)) - 128.0;
        }
      forward_dct(block, coef);
      for (int i = 0; i < 64; ++i) {
        coef[i] = double(std::lround(coef[i] / table[i]) * table[i]);
      }
      inverse_dct(coef, recon);
      for (std::size_t y = 0; y < 8 && by + y < h; ++y)
        for (std::size_t x = 0; x < 8 && bx + x < w; ++x) {
          const long v = std::lround(recon[y * 8 + x] + 128.0);
          out.at(bx + x, by + y) = static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
        }
    }
  return out;
}

}  // namespace esf::jpeg
