#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "esf/image.hpp"

namespace esf {

/// Label convention: 0 = real, 1 = fake.
struct LabeledImage {
  GrayImage image;
  int label = 0;
  std::filesystem::path path;
};

struct Subset {
  std::string name;
  std::filesystem::path real_dir;  // relative to the dataset root
  std::filesystem::path fake_dir;
  std::size_t n_real = 0;
  std::size_t n_fake = 0;

  bool operator==(const Subset&) const = default;
};

/// A dataset root laid out as root/<subset>/{real,fake}/*.pgm|*.png.
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<Subset> subsets;

  /// Root-independent description: subset names, relative dirs, counts.
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, std::filesystem::path root);

  bool operator==(const DatasetManifest&) const = default;
};

/// Image files (.pgm/.png) of a directory in filename order. Missing
/// directory -> empty list.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Scans root for subsets. Throws IoError if root is missing or holds none.
DatasetManifest scan_dataset(const std::filesystem::path& root);

/// Real images first, then fakes, each in filename order.
std::vector<LabeledImage> load_subset(const DatasetManifest& manifest, const Subset& subset);
std::vector<LabeledImage> load_all(const DatasetManifest& manifest);

// ---- synthetic data -------------------------------------------------------

struct ToyOptions {
  double field_sigma = 3.0;          // blur of the white-noise field, pixels
  double field_std = 0.1;            // intensity std of the field around 0.5
  double gradient_amplitude = 0.08;  // max amplitude of the low-order ramp
  std::size_t grid_period = 4;       // pixels
  double grid_amplitude = 8.0 / 255.0;
};

/// Smooth random field plus a periodic lowest-frequency intensity gradient.
GrayImage toy_real_image(std::size_t size, std::mt19937_64& rng, const ToyOptions& opt = {});

/// A real-style field plus a separable periodic grid artifact of the given
/// period with random phase.
GrayImage toy_fake_image(std::size_t size, std::mt19937_64& rng, const ToyOptions& opt = {});

/// Writes out_dir/toy/{real,fake}/NNNNNN.pgm and out_dir/manifest.json.
DatasetManifest gen_toy_dataset(std::size_t n_per_class, std::size_t size, std::uint64_t seed,
                                const std::filesystem::path& out_dir,
                                const ToyOptions& opt = {});

// ---- perturbations --------------------------------------------------------

enum class PerturbKind { blur, crop, jpeg, noise, all };

PerturbKind parse_perturb_kind(std::string_view name);
std::string_view perturb_kind_name(PerturbKind kind);

/// Normalized separable Gaussian blur with replicated borders.
GrayImage gaussian_blur(const GrayImage& image, double sigma, std::size_t kernel_size);

/// sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8
double blur_sigma_for_kernel(std::size_t kernel_size);

/// Removes `ratio_percent` of each side; the window's top-left corner is at
/// (offset_x, offset_y) in [0,1] of the free range. Resampled back bilinearly.
GrayImage crop_resize(const GrayImage& image, double ratio_percent, double offset_x,
                      double offset_y);

/// Adds Gaussian noise of the given variance (squared 8-bit levels), rounds
/// and clamps.
GrayImage add_gaussian_noise(const GrayImage& image, double variance, std::mt19937_64& rng);

struct PerturbOptions {
  std::vector<std::size_t> blur_kernels{3, 5, 7, 9};
  double crop_min = 5.0, crop_max = 20.0;  // percent of side
  int jpeg_min = 10, jpeg_max = 75;
  double noise_var_min = 5.0, noise_var_max = 20.0;
};

/// Random perturbation of one kind; `all` applies blur, crop, jpeg, noise in
/// that order. Pure function of (image, rng state).
GrayImage perturb(const GrayImage& image, PerturbKind kind, std::mt19937_64& rng,
                  const PerturbOptions& opt = {});

/// Seed for the file at `index` within a perturbation run.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// Mirrors a dataset under out_root with every image perturbed. Images are
/// written as PGM regardless of the source format.
DatasetManifest perturb_dataset(const DatasetManifest& manifest, PerturbKind kind,
                                std::uint64_t seed, const std::filesystem::path& out_root);

}  // namespace esf
