#include "esf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "esf/error.hpp"
#include "esf/fft.hpp"

namespace esf {

namespace {

void check_scores(std::span<const double> scores, std::span<const int> labels, const char* op) {
  if (scores.empty()) throw ContractError(std::string(op) + ": empty input");
  if (scores.size() != labels.size()) {
    throw ContractError(std::string(op) + ": " + std::to_string(scores.size()) + " scores for " +
                        std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw ContractError(std::string(op) + ": labels must be 0 or 1");
  }
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

double accuracy(std::span<const double> scores, std::span<const int> labels) {
  check_scores(scores, labels, "accuracy");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if ((scores[i] >= 0.5 ? 1 : 0) == labels[i]) ++correct;
  }
  return 100.0 * double(correct) / double(scores.size());
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  check_scores(scores, labels, "average_precision");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] == 1) {
      ++hits;
      sum += double(hits) / double(rank + 1);
    }
  }
  if (hits == 0) throw ContractError("average_precision: undefined without positive labels");
  return 100.0 * sum / double(hits);
}

// ---------------------------------------------------------------------------
// Reports

nlohmann::json EvalReport::to_json() const {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : subsets) {
    subs.push_back({{"name", s.name}, {"n_real", s.n_real}, {"n_fake", s.n_fake},
                    {"acc", s.acc}, {"ap", s.ap}});
  }
  nlohmann::json j = {{"subsets", subs}, {"mAcc", macc}, {"mAP", map}, {"warnings", warnings}};
  if (perturbation) {
    j["perturbation"] = {{"seed", perturbation->seed},
                         {"clean_mAcc", perturbation->clean_macc},
                         {"mAcc", perturbation->macc},
                         {"average_drop", perturbation->average_drop}};
  }
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    for (const auto& s : j.at("subsets")) {
      r.subsets.push_back({s.at("name").get<std::string>(), s.at("n_real").get<std::size_t>(),
                           s.at("n_fake").get<std::size_t>(), s.at("acc").get<double>(),
                           s.at("ap").get<double>()});
    }
    r.macc = j.at("mAcc").get<double>();
    r.map = j.at("mAP").get<double>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    if (j.contains("perturbation")) {
      const auto& p = j.at("perturbation");
      r.perturbation = PerturbationReport{p.at("seed").get<std::uint64_t>(),
                                          p.at("clean_mAcc").get<double>(),
                                          p.at("mAcc").get<std::map<std::string, double>>(),
                                          p.at("average_drop").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
  return r;
}

Scorer model_scorer(const Checkpoint& checkpoint) {
  return [checkpoint](std::span<const GrayImage> images) {
    const auto logits = forward_many(checkpoint.params, checkpoint.config, images);
    std::vector<double> scores(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) scores[i] = 1.0 / (1.0 + std::exp(-double(logits[i])));
    return scores;
  };
}

namespace {

struct LoadedSubset {
  const Subset* subset;
  std::vector<GrayImage> images;
  std::vector<int> labels;
};

std::vector<LoadedSubset> load_subsets(const DatasetManifest& manifest) {
  std::vector<LoadedSubset> out;
  for (const auto& s : manifest.subsets) {
    LoadedSubset ls{&s, {}, {}};
    for (auto& item : load_subset(manifest, s)) {
      ls.images.push_back(std::move(item.image));
      ls.labels.push_back(item.label);
    }
    out.push_back(std::move(ls));
  }
  return out;
}

EvalReport evaluate_loaded(const Scorer& scorer, const std::vector<LoadedSubset>& subsets) {
  EvalReport report;
  std::vector<double> accs, aps;
  for (const auto& ls : subsets) {
    const auto n_fake = std::size_t(std::count(ls.labels.begin(), ls.labels.end(), 1));
    const std::size_t n_real = ls.labels.size() - n_fake;
    if (n_fake == 0 || n_real == 0) {
      report.warnings.push_back("subset " + ls.subset->name + " skipped: missing " +
                                (n_fake == 0 ? "fake" : "real") + " images");
      continue;
    }
    const auto scores = scorer(ls.images);
    if (scores.size() != ls.images.size()) throw ContractError("scorer returned the wrong count");
    SubsetReport sr{ls.subset->name, n_real, n_fake, accuracy(scores, ls.labels),
                    average_precision(scores, ls.labels)};
    accs.push_back(sr.acc);
    aps.push_back(sr.ap);
    report.subsets.push_back(std::move(sr));
  }
  if (report.subsets.empty()) throw ConfigError("evaluate: no subset has both classes");
  report.macc = mean(accs);
  report.map = mean(aps);
  return report;
}

}  // namespace

EvalReport evaluate(const Scorer& scorer, const DatasetManifest& manifest) {
  return evaluate_loaded(scorer, load_subsets(manifest));
}

EvalReport evaluate(const Checkpoint& checkpoint, const DatasetManifest& manifest) {
  return evaluate(model_scorer(checkpoint), manifest);
}

std::vector<PerturbKind> full_perturbation_suite() {
  return {PerturbKind::blur, PerturbKind::crop, PerturbKind::jpeg, PerturbKind::noise,
          PerturbKind::all};
}

PerturbationReport robustness_eval(const Scorer& scorer, const DatasetManifest& manifest,
                                   std::span<const PerturbKind> kinds, std::uint64_t seed,
                                   const EvalReport& clean) {
  PerturbationReport out;
  out.seed = seed;
  out.clean_macc = clean.macc;
  if (kinds.empty()) return out;
  const auto subsets = load_subsets(manifest);
  std::vector<double> settings;
  for (PerturbKind kind : kinds) {
    auto perturbed = subsets;
    // Same per-file seeds as perturb_dataset, so on-disk copies match.
    std::uint64_t index = 0;
    for (auto& ls : perturbed) {
      for (auto& img : ls.images) {
        std::mt19937_64 rng(derive_seed(seed, index++));
        img = perturb(img, kind, rng);
      }
    }
    const double macc = evaluate_loaded(scorer, perturbed).macc;
    out.macc[std::string(perturb_kind_name(kind))] = macc;
    settings.push_back(macc);
  }
  out.average_drop = clean.macc - mean(settings);
  return out;
}

// ---------------------------------------------------------------------------
// Spectrum analysis

SpectrumMap spectrum_average(std::span<const GrayImage> images) {
  if (images.empty()) throw ContractError("spectrum_average: no images");
  const std::size_t w = images[0].width, h = images[0].height;
  if (!is_power_of_two(w) || !is_power_of_two(h)) {
    throw DimensionError("spectrum_average: image size " + std::to_string(w) + "x" +
                         std::to_string(h) + " is not a power of two");
  }
  std::vector<std::vector<double>> per_pixel(w * h);
  for (const auto& img : images) {
    if (img.width != w || img.height != h) {
      throw DimensionError("spectrum_average: image " + std::to_string(img.width) + "x" +
                           std::to_string(img.height) + " differs from " + std::to_string(w) +
                           "x" + std::to_string(h));
    }
    Tensor<double> levels({1, h, w});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) levels[i] = img.pixels[i];
    const auto spec = fft2d(levels);
    Tensor<double> logmag({1, h, w});
    for (std::size_t i = 0; i < logmag.size(); ++i) {
      logmag[i] = std::log1p(std::hypot(spec.real[i], spec.imag[i]));
    }
    const auto centered = fftshift(logmag);
    for (std::size_t i = 0; i < centered.size(); ++i) per_pixel[i].push_back(centered[i]);
  }
  SpectrumMap map;
  map.width = w;
  map.height = h;
  map.values.resize(w * h);
  for (std::size_t i = 0; i < per_pixel.size(); ++i) {
    // Summing in sorted order makes the mean independent of file order.
    auto& v = per_pixel[i];
    std::sort(v.begin(), v.end());
    map.values[i] = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  }
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const double min = *lo, range = *hi - *lo;
  for (auto& v : map.values) v = range > 0 ? (v - min) / range : 0.0;
  std::vector<double> levels(map.values.size());
  for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = map.values[i] * 255.0;
  map.image = GrayImage::from_levels(levels, w, h);
  return map;
}

SpectrumMap spectrum_average(const std::filesystem::path& image_dir) {
  const auto paths = list_images(image_dir);
  if (paths.empty()) throw IoError("spectrum: no images in " + image_dir.string());
  std::vector<GrayImage> images;
  for (const auto& p : paths) images.push_back(load_image(p));
  return spectrum_average(images);
}

double peak_ratio(const SpectrumMap& map, std::size_t x, std::size_t y) {
  if (x >= map.width || y >= map.height) throw ContractError("peak_ratio: position outside the map");
  const double min = *std::min_element(map.values.begin(), map.values.end());
  std::vector<double> ring;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      if (dx == 0 && dy == 0) continue;
      const std::size_t nx = (x + map.width + dx) % map.width;
      const std::size_t ny = (y + map.height + dy) % map.height;
      ring.push_back(map.values[ny * map.width + nx] - min);
    }
  std::sort(ring.begin(), ring.end());
  const double median = 0.5 * (ring[3] + ring[4]);
  const double value = map.values[y * map.width + x] - min;
  if (median <= 0) return value > 0 ? std::numeric_limits<double>::infinity() : 1.0;
  return value / median;
}

std::vector<std::pair<std::size_t, std::size_t>> grid_bins(std::size_t size, std::size_t period) {
  if (period == 0 || size % period != 0) throw ContractError("grid_bins: period must divide size");
  const std::size_t c = size / 2, d = size / period;
  std::vector<std::pair<std::size_t, std::size_t>> bins;
  for (int sy = -1; sy <= 1; ++sy)
    for (int sx = -1; sx <= 1; ++sx) {
      if (sx == 0 && sy == 0) continue;
      bins.emplace_back((c + size + sx * std::ptrdiff_t(d)) % size,
                        (c + size + sy * std::ptrdiff_t(d)) % size);
    }
  return bins;
}

}  // namespace esf
