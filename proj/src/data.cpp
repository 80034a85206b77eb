#include "esf/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "esf/error.hpp"
#include "esf/jpeg.hpp"

namespace esf {
namespace fs = std::filesystem;

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : subsets) {
    subs.push_back({{"name", s.name},
                    {"real_dir", s.real_dir.generic_string()},
                    {"fake_dir", s.fake_dir.generic_string()},
                    {"n_real", s.n_real},
                    {"n_fake", s.n_fake}});
  }
  return {{"subsets", subs}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, fs::path root) {
  DatasetManifest m;
  m.root = std::move(root);
  try {
    for (const auto& s : j.at("subsets")) {
      m.subsets.push_back({s.at("name").get<std::string>(),
                           fs::path(s.at("real_dir").get<std::string>()),
                           fs::path(s.at("fake_dir").get<std::string>()),
                           s.at("n_real").get<std::size_t>(), s.at("n_fake").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".pgm" || ext == ".png") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

DatasetManifest scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " does not exist");
  DatasetManifest m;
  m.root = root;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    const auto n_real = list_images(dir / "real").size();
    const auto n_fake = list_images(dir / "fake").size();
    if (n_real + n_fake == 0) continue;
    const auto name = dir.filename();
    m.subsets.push_back({name.string(), name / "real", name / "fake", n_real, n_fake});
  }
  if (m.subsets.empty()) {
    throw IoError("dataset root " + root.string() + " has no <subset>/{real,fake} images");
  }
  return m;
}

std::vector<LabeledImage> load_subset(const DatasetManifest& manifest, const Subset& subset) {
  std::vector<LabeledImage> out;
  for (const auto& p : list_images(manifest.root / subset.real_dir)) out.push_back({load_image(p), 0, p});
  for (const auto& p : list_images(manifest.root / subset.fake_dir)) out.push_back({load_image(p), 1, p});
  return out;
}

std::vector<LabeledImage> load_all(const DatasetManifest& manifest) {
  std::vector<LabeledImage> out;
  for (const auto& s : manifest.subsets) {
    auto part = load_subset(manifest, s);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Separable Gaussian blur with periodic wrap, so the field has no border
// discontinuity in its spectrum.
std::vector<double> circular_blur(const std::vector<double>& src, std::size_t n, double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-double(i * i) / (2 * sigma * sigma));
    total += k[i + radius];
  }
  for (auto& v : k) v /= total;
  const auto sn = static_cast<std::ptrdiff_t>(n);
  auto wrap = [sn](std::ptrdiff_t i) { return ((i % sn) + sn) % sn; };
  std::vector<double> tmp(n * n), out(n * n);
  for (std::ptrdiff_t y = 0; y < sn; ++y)
    for (std::ptrdiff_t x = 0; x < sn; ++x) {
      double acc = 0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) acc += k[i + radius] * src[y * sn + wrap(x + i)];
      tmp[y * sn + x] = acc;
    }
  for (std::ptrdiff_t y = 0; y < sn; ++y)
    for (std::ptrdiff_t x = 0; x < sn; ++x) {
      double acc = 0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[wrap(y + i) * sn + x];
      out[y * sn + x] = acc;
    }
  return out;
}

std::vector<double> toy_field(std::size_t n, std::mt19937_64& rng, const ToyOptions& opt) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> noise(n * n);
  for (auto& v : noise) v = normal(rng);
  auto field = circular_blur(noise, n, opt.field_sigma);
  double mean = 0;
  for (double v : field) mean += v;
  mean /= double(field.size());
  double var = 0;
  for (double v : field) var += (v - mean) * (v - mean);
  const double scale = opt.field_std / std::sqrt(var / double(field.size()));
  // One period across the image keeps the gradient on the lowest frequency bin.
  std::uniform_real_distribution<double> amp(-opt.gradient_amplitude, opt.gradient_amplitude);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  const double ax = amp(rng), ay = amp(rng), px = phase(rng), py = phase(rng);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double& v = field[y * n + x];
      v = 0.5 + (v - mean) * scale + ax * std::cos(kTwoPi * double(x) / double(n) + px) +
          ay * std::cos(kTwoPi * double(y) / double(n) + py);
    }
  return field;
}

void require_toy_size(std::size_t size) {
  if (size < 32 || (size & (size - 1)) != 0) {
    throw ContractError("toy images need a power-of-two size >= 32, got " + std::to_string(size));
  }
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string image_name(std::size_t index) {
  std::string digits = std::to_string(index);
  return std::string(digits.size() < 6 ? 6 - digits.size() : 0, '0') + digits + ".pgm";
}

}  // namespace

GrayImage toy_real_image(std::size_t size, std::mt19937_64& rng, const ToyOptions& opt) {
  require_toy_size(size);
  return GrayImage::from_unit(toy_field(size, rng, opt), size, size);
}

GrayImage toy_fake_image(std::size_t size, std::mt19937_64& rng, const ToyOptions& opt) {
  require_toy_size(size);
  auto field = toy_field(size, rng, opt);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  const double px = phase(rng), py = phase(rng);
  const double f = kTwoPi / double(opt.grid_period);
  for (std::size_t y = 0; y < size; ++y) {
    const double cy = std::cos(f * double(y) + py);
    for (std::size_t x = 0; x < size; ++x) {
      const double cx = std::cos(f * double(x) + px);
      field[y * size + x] += opt.grid_amplitude / 3.0 * (cx + cy + cx * cy);
    }
  }
  return GrayImage::from_unit(field, size, size);
}

DatasetManifest gen_toy_dataset(std::size_t n_per_class, std::size_t size, std::uint64_t seed,
                                const fs::path& out_dir, const ToyOptions& opt) {
  if (n_per_class == 0) throw ContractError("gen_toy_dataset: n must be >= 1");
  require_toy_size(size);
  std::error_code ec;
  for (const char* label : {"real", "fake"}) {
    fs::create_directories(out_dir / "toy" / label, ec);
    if (ec) throw IoError("cannot create " + (out_dir / "toy" / label).string() + ": " + ec.message());
  }
  for (std::size_t i = 0; i < n_per_class; ++i) {
    std::mt19937_64 real_rng(derive_seed(seed, 2 * i));
    save_image(out_dir / "toy" / "real" / image_name(i), toy_real_image(size, real_rng, opt));
    std::mt19937_64 fake_rng(derive_seed(seed, 2 * i + 1));
    save_image(out_dir / "toy" / "fake" / image_name(i), toy_fake_image(size, fake_rng, opt));
  }
  DatasetManifest m{out_dir, {{"toy", fs::path("toy") / "real", fs::path("toy") / "fake",
                               n_per_class, n_per_class}}};
  write_file(out_dir / "manifest.json", m.to_json().dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------------------
// Perturbations

PerturbKind parse_perturb_kind(std::string_view name) {
  if (name == "blur") return PerturbKind::blur;
  if (name == "crop") return PerturbKind::crop;
  if (name == "jpeg") return PerturbKind::jpeg;
  if (name == "noise") return PerturbKind::noise;
  if (name == "all") return PerturbKind::all;
  throw ContractError("unknown perturbation kind '" + std::string(name) + "'");
}

std::string_view perturb_kind_name(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::blur: return "blur";
    case PerturbKind::crop: return "crop";
    case PerturbKind::jpeg: return "jpeg";
    case PerturbKind::noise: return "noise";
    case PerturbKind::all: return "all";
  }
  throw ContractError("unknown perturbation kind");
}

double blur_sigma_for_kernel(std::size_t kernel_size) {
  return 0.3 * ((double(kernel_size) - 1.0) / 2.0 - 1.0) + 0.8;
}

GrayImage gaussian_blur(const GrayImage& image, double sigma, std::size_t kernel_size) {
  if (kernel_size % 2 == 0) throw ContractError("gaussian_blur: kernel size must be odd");
  if (!(sigma > 0)) throw ContractError("gaussian_blur: sigma must be positive");
  const auto r = static_cast<std::ptrdiff_t>(kernel_size / 2);
  std::vector<double> k(kernel_size);
  double total = 0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-double(i * i) / (2 * sigma * sigma));
    total += k[i + r];
  }
  for (auto& v : k) v /= total;
  const auto w = static_cast<std::ptrdiff_t>(image.width);
  const auto h = static_cast<std::ptrdiff_t>(image.height);
  std::vector<double> tmp(image.pixels.size()), out(image.pixels.size());
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0;
      for (std::ptrdiff_t i = -r; i <= r; ++i)
        acc += k[i + r] * image.pixels[y * w + std::clamp<std::ptrdiff_t>(x + i, 0, w - 1)];
      tmp[y * w + x] = acc;
    }
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0;
      for (std::ptrdiff_t i = -r; i <= r; ++i)
        acc += k[i + r] * tmp[std::clamp<std::ptrdiff_t>(y + i, 0, h - 1) * w + x];
      out[y * w + x] = acc;
    }
  return GrayImage::from_levels(out, image.width, image.height);
}

GrayImage crop_resize(const GrayImage& image, double ratio_percent, double offset_x,
                      double offset_y) {
  if (ratio_percent < 0 || ratio_percent >= 100) {
    throw ContractError("crop_resize: ratio must be in [0,100)");
  }
  auto window = [&](std::size_t side) {
    const auto kept = std::lround(double(side) * (1.0 - ratio_percent / 100.0));
    return std::clamp<std::size_t>(static_cast<std::size_t>(kept), 1, side);
  };
  const std::size_t cw = window(image.width), ch = window(image.height);
  const auto x0 = static_cast<std::size_t>(std::lround(std::clamp(offset_x, 0.0, 1.0) * double(image.width - cw)));
  const auto y0 = static_cast<std::size_t>(std::lround(std::clamp(offset_y, 0.0, 1.0) * double(image.height - ch)));
  GrayImage crop(cw, ch);
  for (std::size_t y = 0; y < ch; ++y)
    for (std::size_t x = 0; x < cw; ++x) crop.at(x, y) = image.at(x0 + x, y0 + y);
  return resample(crop, image.width, image.height);
}

GrayImage add_gaussian_noise(const GrayImage& image, double variance, std::mt19937_64& rng) {
  if (variance < 0) throw ContractError("add_gaussian_noise: variance must be >= 0");
  std::normal_distribution<double> normal(0.0, std::sqrt(variance));
  std::vector<double> levels(image.pixels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = double(image.pixels[i]) + normal(rng);
  return GrayImage::from_levels(levels, image.width, image.height);
}

GrayImage perturb(const GrayImage& image, PerturbKind kind, std::mt19937_64& rng,
                  const PerturbOptions& opt) {
  if (image.empty()) throw ContractError("perturb: empty image");
  switch (kind) {
    case PerturbKind::blur: {
      std::uniform_int_distribution<std::size_t> pick(0, opt.blur_kernels.size() - 1);
      const std::size_t k = opt.blur_kernels.at(pick(rng));
      return gaussian_blur(image, blur_sigma_for_kernel(k), k);
    }
    case PerturbKind::crop: {
      std::uniform_real_distribution<double> ratio(opt.crop_min, opt.crop_max);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const double r = ratio(rng);
      const double ox = unit(rng), oy = unit(rng);
      return crop_resize(image, r, ox, oy);
    }
    case PerturbKind::jpeg: {
      std::uniform_int_distribution<int> quality(opt.jpeg_min, opt.jpeg_max);
      return jpeg::roundtrip(image, quality(rng));
    }
    case PerturbKind::noise: {
      std::uniform_real_distribution<double> var(opt.noise_var_min, opt.noise_var_max);
      return add_gaussian_noise(image, var(rng), rng);
    }
    case PerturbKind::all: {
      GrayImage out = image;
      for (auto k : {PerturbKind::blur, PerturbKind::crop, PerturbKind::jpeg, PerturbKind::noise}) {
        out = perturb(out, k, rng, opt);
      }
      return out;
    }
  }
  throw ContractError("perturb: unknown kind");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over seed + index.
  std::uint64_t z = seed + index + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

DatasetManifest perturb_dataset(const DatasetManifest& manifest, PerturbKind kind,
                                std::uint64_t seed, const fs::path& out_root) {
  DatasetManifest out{out_root, {}};
  std::uint64_t index = 0;
  for (const auto& subset : manifest.subsets) {
    Subset mirrored = subset;
    for (const auto& [src_dir, dst_dir, count] :
         {std::tuple{subset.real_dir, subset.real_dir, &mirrored.n_real},
          std::tuple{subset.fake_dir, subset.fake_dir, &mirrored.n_fake}}) {
      std::error_code ec;
      fs::create_directories(out_root / dst_dir, ec);
      if (ec) throw IoError("cannot create " + (out_root / dst_dir).string() + ": " + ec.message());
      *count = 0;
      for (const auto& p : list_images(manifest.root / src_dir)) {
        std::mt19937_64 rng(derive_seed(seed, index++));
        auto name = p.filename();
        name.replace_extension(".pgm");
        save_image(out_root / dst_dir / name, perturb(load_image(p), kind, rng));
        ++*count;
      }
    }
    out.subsets.push_back(mirrored);
  }
  write_file(out_root / "manifest.json", out.to_json().dump(2) + "\n");
  return out;
}

}  // namespace esf
