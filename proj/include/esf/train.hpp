#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "esf/data.hpp"
#include "esf/image.hpp"
#include "esf/model.hpp"

namespace esf {

struct AugmentConfig {
  bool hflip = true;
  bool blur = true;
  bool jpeg = true;
  double probability = 0.5;
  double blur_sigma_min = 0.5, blur_sigma_max = 1.5;
  int jpeg_quality_min = 60, jpeg_quality_max = 95;

  bool operator==(const AugmentConfig&) const = default;
};

struct TrainConfig {
  ModelConfig model;
  double learning_rate = 2e-4;
  double lr_min = 0.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Unknown keys and wrong types raise ConfigError; missing keys keep defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2 for 0 <= t <= T.
double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min);

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  std::size_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One bias-corrected Adam update of every trainable tensor. Buffers are
/// skipped. A non-finite gradient raises NumericError before anything changes.
template <typename T>
void adam_step(ModelParams<T>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state, double lr);

/// Flip, blur, JPEG, each applied independently with `probability`.
GrayImage augment(const GrayImage& image, std::mt19937_64& rng, const AugmentConfig& config);

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double train_acc = 0;  // percent, on the augmented training batches
  double lr = 0;         // learning rate of the epoch's first step
};

struct TrainResult {
  ModelParams<float> params;
  std::vector<EpochStats> trace;
  std::vector<double> lr_trace;  // one entry per optimizer step
};

/// Seeded shuffle, augment, forward, BCE, backward, Adam with per-step cosine
/// annealing. Progress lines go to `log` when given.
TrainResult train(const std::vector<LabeledImage>& data, const TrainConfig& config,
                  std::ostream* log = nullptr);

/// epoch,mean_loss,train_acc,lr
std::string trace_csv(const std::vector<EpochStats>& trace);

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                             const std::string& name = "<memory>");

}  // namespace esf
