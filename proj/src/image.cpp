#include "esf/image.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include "esf/error.hpp"

namespace esf {

GrayImage::GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> data)
    : width(w), height(h), pixels(std::move(data)) {
  if (pixels.size() != w * h) {
    throw DimensionError("GrayImage: " + std::to_string(w) + "x" + std::to_string(h) +
                         " needs " + std::to_string(w * h) + " pixels, got " +
                         std::to_string(pixels.size()));
  }
}

std::vector<double> GrayImage::to_unit() const {
  std::vector<double> out(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = pixels[i] / 255.0;
  return out;
}

GrayImage GrayImage::from_levels(std::span<const double> values, std::size_t w, std::size_t h) {
  GrayImage img(w, h);
  if (values.size() != w * h) throw DimensionError("GrayImage::from_levels: size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(values[i]), 0L, 255L));
  }
  return img;
}

GrayImage GrayImage::from_unit(std::span<const double> values, std::size_t w, std::size_t h) {
  std::vector<double> levels(values.begin(), values.end());
  for (auto& v : levels) v *= 255.0;
  return from_levels(levels, w, h);
}

// ---------------------------------------------------------------------------
// PGM

std::vector<std::uint8_t> encode_pgm(const GrayImage& image) {
  const std::string header = "P5\n" + std::to_string(image.width) + " " +
                             std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

GrayImage decode_pgm(std::span<const std::uint8_t> bytes, const std::string& name) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError(name + ": PGM header value too large");
    }
    if (digits == 0) throw FormatError(name + ": malformed PGM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw FormatError(name + ": not a binary PGM (P5) file");
  }
  pos = 2;
  const std::size_t w = read_uint();
  const std::size_t h = read_uint();
  const std::size_t maxval = read_uint();
  if (maxval != 255) {
    throw FormatError(name + ": unsupported PGM maxval " + std::to_string(maxval) +
                      " (8-bit only)");
  }
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw FormatError(name + ": malformed PGM header");
  }
  ++pos;
  if (w == 0 || h == 0) throw FormatError(name + ": empty PGM image");
  if (bytes.size() - pos < w * h) throw FormatError(name + ": truncated PGM payload");
  return GrayImage(w, h, std::vector<std::uint8_t>(bytes.begin() + pos, bytes.begin() + pos + w * h));
}

// ---------------------------------------------------------------------------
// PNG, through libpng's simplified API

namespace {

constexpr std::array<std::uint8_t, 8> kPngSignature = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

}  // namespace

std::vector<std::uint8_t> encode_png(const GrayImage& image) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  info.width = static_cast<png_uint_32>(image.width);
  info.height = static_cast<png_uint_32>(image.height);
  info.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&info, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encoding failed: ") + info.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&info, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encoding failed: ") + info.message);
  }
  out.resize(size);
  return out;
}

GrayImage decode_png(std::span<const std::uint8_t> bytes, const std::string& name) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&info, bytes.data(), bytes.size())) {
    throw FormatError(name + ": not a readable PNG (" + info.message + ")");
  }
  // Anything but plain grayscale (color, palette, alpha, 16-bit) is refused
  // rather than converted.
  if (info.format != PNG_FORMAT_GRAY) {
    png_image_free(&info);
    const bool wide = info.format & PNG_FORMAT_FLAG_LINEAR;
    throw FormatError(name + (wide ? ": unsupported PNG bit depth 16 (8-bit required)"
                                   : ": unsupported PNG color type (single-channel grayscale required)"));
  }
  GrayImage img(info.width, info.height);
  if (!png_image_finish_read(&info, nullptr, img.pixels.data(), 0, nullptr)) {
    throw FormatError(name + ": corrupt PNG image data (" + info.message + ")");
  }
  if (img.empty()) throw FormatError(name + ": empty PNG image");
  return img;
}

GrayImage load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  if (bytes.size() >= 8 && std::equal(kPngSignature.begin(), kPngSignature.end(), bytes.begin())) {
    return decode_png(bytes, path.string());
  }
  if (bytes.size() >= 2 && bytes[0] == 'P') {
    if (bytes[1] != '5') {
      throw FormatError(path.string() + ": unsupported PNM variant P" +
                        std::string(1, static_cast<char>(bytes[1])));
    }
    return decode_pgm(bytes, path.string());
  }
  throw FormatError(path.string() + ": unrecognized image format");
}

void save_image(const std::filesystem::path& path, const GrayImage& image) {
  const auto bytes = path.extension() == ".png" ? encode_png(image) : encode_pgm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> resample_bilinear(std::span<const T> src, std::size_t w, std::size_t h,
                                 std::size_t target_w, std::size_t target_h) {
  if (w == 0 || h == 0 || src.size() != w * h) throw DimensionError("resample: empty or mismatched source");
  if (target_w == 0 || target_h == 0) throw ContractError("resample: target size must be >= 1");
  if (target_w == w && target_h == h) return std::vector<T>(src.begin(), src.end());
  struct Tap {
    std::size_t i0, i1;
    T frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double ratio = double(in) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = (double(o) + 0.5) * ratio - 0.5;
      s = std::clamp(s, 0.0, double(in - 1));
      const auto i0 = static_cast<std::size_t>(s);
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<T>(s - double(i0))};
    }
    return t;
  };
  const auto tx = taps(w, target_w);
  const auto ty = taps(h, target_h);
  std::vector<T> out(target_w * target_h);
  for (std::size_t y = 0; y < target_h; ++y) {
    const T* r0 = src.data() + ty[y].i0 * w;
    const T* r1 = src.data() + ty[y].i1 * w;
    const T fy = ty[y].frac;
    for (std::size_t x = 0; x < target_w; ++x) {
      const auto [x0, x1, fx] = tx[x];
      const T top = r0[x0] + (r0[x1] - r0[x0]) * fx;
      const T bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
      out[y * target_w + x] = top + (bottom - top) * fy;
    }
  }
  return out;
}

template std::vector<float> resample_bilinear(std::span<const float>, std::size_t, std::size_t,
                                              std::size_t, std::size_t);
template std::vector<double> resample_bilinear(std::span<const double>, std::size_t, std::size_t,
                                               std::size_t, std::size_t);

GrayImage resample(const GrayImage& image, std::size_t target_w, std::size_t target_h) {
  if (target_w == image.width && target_h == image.height) return image;
  std::vector<double> levels(image.pixels.begin(), image.pixels.end());
  const auto out = resample_bilinear<double>(levels, image.width, image.height, target_w, target_h);
  return GrayImage::from_levels(out, target_w, target_h);
}

GrayImage flip_horizontal(const GrayImage& image) {
  GrayImage out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    auto row = out.pixels.begin() + y * image.width;
    std::reverse(row, row + image.width);
  }
  return out;
}

double psnr(const GrayImage& a, const GrayImage& b) {
  if (a.width != b.width || a.height != b.height) throw DimensionError("psnr: size mismatch");
  double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels[i]) - double(b.pixels[i]);
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  const double mse = se / double(a.pixels.size());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

}  // namespace esf
