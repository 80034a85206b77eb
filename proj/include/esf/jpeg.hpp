#pragma once

#include <array>

#include "esf/image.hpp"

namespace esf::jpeg {

/// Baseline luminance table (ITU-T T.81 Annex K), row-major.
extern const std::array<int, 64> kLuminanceTable;

/// libjpeg quality scaling: q < 50 -> 5000/q percent, else 200 - 2q percent;
/// entries rounded, clamped to [1, 255].
std::array<int, 64> scaled_table(int quality);

/// Lossy path of a baseline grayscale JPEG codec: level shift, 8x8 DCT-II,
/// quantize/dequantize with the scaled table, inverse DCT, clamp. Borders are
/// padded to multiples of 8 by edge replication and cropped after decoding.
/// Entropy coding is skipped since it is lossless.
GrayImage roundtrip(const GrayImage& image, int quality);

}  // namespace esf::jpeg
