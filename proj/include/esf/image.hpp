#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace esf {

/// Single-channel 8-bit image, row-major. The working representation for the
/// network is float in [0,1] (pixel / 255).
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(w * h, fill) {}
  GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> data);

  bool empty() const noexcept { return pixels.empty(); }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  std::vector<double> to_unit() const;
  /// Rounds to nearest and clamps to [0,255].
  static GrayImage from_unit(std::span<const double> values, std::size_t w, std::size_t h);
  static GrayImage from_levels(std::span<const double> values, std::size_t w, std::size_t h);

  bool operator==(const GrayImage&) const = default;
};

std::vector<std::uint8_t> encode_pgm(const GrayImage& image);
GrayImage decode_pgm(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>");

std::vector<std::uint8_t> encode_png(const GrayImage& image);
GrayImage decode_png(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>");

/// Decodes by content: binary PGM (P5) or 8-bit grayscale PNG. Anything else,
/// including color PNGs, raises FormatError naming the file.
GrayImage load_image(const std::filesystem::path& path);

/// Writes PNG when the extension is .png, PGM otherwise.
void save_image(const std::filesystem::path& path, const GrayImage& image);

/// Bilinear interpolation with half-pixel centers (align_corners = false).
/// Source coordinates are clamped to the border.
template <typename T>
std::vector<T> resample_bilinear(std::span<const T> src, std::size_t w, std::size_t h,
                                 std::size_t target_w, std::size_t target_h);

GrayImage resample(const GrayImage& image, std::size_t target_w, std::size_t target_h);

GrayImage flip_horizontal(const GrayImage& image);

/// Peak signal-to-noise ratio in dB for 8-bit images; +inf when identical.
double psnr(const GrayImage& a, const GrayImage& b);

}  // namespace esf
