#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "esf/data.hpp"
#include "esf/image.hpp"
#include "esf/train.hpp"

namespace esf {

/// Percent of samples where (score >= 0.5) equals the label.
double accuracy(std::span<const double> scores, std::span<const int> labels);

/// Mean precision at the rank of each positive after a stable descending
/// sort, in percent. Throws ContractError without positives.
double average_precision(std::span<const double> scores, std::span<const int> labels);

struct SubsetReport {
  std::string name;
  std::size_t n_real = 0;
  std::size_t n_fake = 0;
  double acc = 0;
  double ap = 0;

  bool operator==(const SubsetReport&) const = default;
};

struct PerturbationReport {
  std::uint64_t seed = 0;
  double clean_macc = 0;
  std::map<std::string, double> macc;  // per setting: blur, crop, jpeg, noise, all
  double average_drop = 0;

  bool operator==(const PerturbationReport&) const = default;
};

struct EvalReport {
  std::vector<SubsetReport> subsets;
  double macc = 0;
  double map = 0;
  std::vector<std::string> warnings;
  std::optional<PerturbationReport> perturbation;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  bool operator==(const EvalReport&) const = default;
};

/// Probability of "fake" for each image.
using Scorer = std::function<std::vector<double>(std::span<const GrayImage>)>;

Scorer model_scorer(const Checkpoint& checkpoint);

/// Per-subset Acc/AP and unweighted means. Subsets missing a class are
/// skipped and noted in `warnings`.
EvalReport evaluate(const Scorer& scorer, const DatasetManifest& manifest);
EvalReport evaluate(const Checkpoint& checkpoint, const DatasetManifest& manifest);

/// Evaluates perturbed copies (in memory) for every requested setting and
/// fills `clean` with the perturbation block. average_drop = clean mAcc - mean
/// over settings; 0 when `kinds` is empty.
PerturbationReport robustness_eval(const Scorer& scorer, const DatasetManifest& manifest,
                                   std::span<const PerturbKind> kinds, std::uint64_t seed,
                                   const EvalReport& clean);

/// The four single perturbations followed by their composition.
std::vector<PerturbKind> full_perturbation_suite();

struct SpectrumMap {
  std::size_t width = 0, height = 0;
  std::vector<double> values;  // min-max normalized to [0,1], DC at the center
  GrayImage image;             // values scaled to 0..255
};

/// Mean over images of log(1 + |centered 2D FFT|) on 8-bit levels.
SpectrumMap spectrum_average(std::span<const GrayImage> images);
SpectrumMap spectrum_average(const std::filesystem::path& image_dir);

/// Value at (x, y) over the median of its 8 neighbours, both measured above
/// the map minimum. Neighbours wrap around the borders.
double peak_ratio(const SpectrumMap& map, std::size_t x, std::size_t y);

/// Centered-spectrum positions of a period-`period` separable grid (axis and
/// diagonal harmonics) on a size x size image.
std::vector<std::pair<std::size_t, std::size_t>> grid_bins(std::size_t size, std::size_t period);

}  // namespace esf
