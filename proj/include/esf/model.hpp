#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "esf/autodiff.hpp"
#include "esf/image.hpp"
#include "esf/ops.hpp"
#include "esf/tensor.hpp"

namespace esf {

/// Input images are single-channel.
inline constexpr std::size_t kInputChannels = 1;

struct ModelConfig {
  std::size_t base_scale = 224;   // S; stems run at 2S, S and S/2
  std::size_t base_channels = 32; // feature width after each stem
  std::size_t fpb_count = 2;
  std::size_t wtconv_levels = 1;
  // Ablation switches. The medium scale S is always present.
  bool use_large_scale = true;  // 2S stem plus the first spatial block
  bool use_small_scale = true;  // S/2 stem fused after the second spatial block
  bool wavelet_branch = true;   // wavelet enhancement inside each stem
  bool central_conv = true;     // central-difference conv; plain 3x3 conv when off

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamInit { kaiming_uniform, zeros, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init;
  std::size_t fan_in = 1;
};

/// Every tensor a configuration needs, in a fixed declaration order.
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

/// Named tensors of one model instance. BatchNorm running statistics live
/// here too but are buffers: not trained, updated by train-mode forwards.
template <typename T>
struct ModelParams {
  std::map<std::string, Tensor<T>> tensors;

  static bool is_buffer(const std::string& name);

  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }

  bool operator==(const ModelParams&) const = default;
};

/// Kaiming-uniform (bound 1 / sqrt(fan_in)) weights, zero biases, unit
/// BatchNorm/LayerNorm gains, running mean 0 / var 1. Deterministic in seed.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

/// Every tensor zero, including norm gains and running statistics.
template <typename T>
ModelParams<T> zero_params(const ModelConfig& config);

/// Throws ConfigError if the tensor set does not match the configuration.
template <typename T>
void check_params(const ModelParams<T>& params, const ModelConfig& config);

/// A parameter set placed on a tape for one forward pass.
template <typename T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, ModelParams<T>& params, ops::Mode mode, bool trainable);

  Var<T> operator[](const std::string& name) const;
  ops::BatchNormStats<T> bn_stats(const std::string& prefix);
  Tape<T>& tape() const { return *tape_; }
  ops::Mode mode() const { return mode_; }
  const std::map<std::string, Var<T>>& vars() const { return vars_; }

 private:
  Tape<T>* tape_;
  ModelParams<T>* params_;
  ops::Mode mode_;
  std::map<std::string, Var<T>> vars_;
};

/// Central-difference convolution, 3x3, stride 1, padding 1:
///   y(p0) = sum_i w(p_i) x(p0 + p_i) - x(p0) sum_i w(p_i)
/// evaluated as conv(x, w) minus a 1x1 conv with the per-kernel tap sums.
template <typename T>
Var<T> cdc_conv(const Var<T>& x, const Var<T>& weight, const std::optional<std::type_identity_t<Var<T>>>& bias);

/// [N,1,H,W] -> [N,W,H/2,W/2] for one scale. `prefix` selects the stem's
/// parameters (e.g. "stem.medium").
template <typename T>
Var<T> wavelet_enhanced_stem(BoundParams<T>& p, const std::string& prefix,
                             const Var<T>& image, const ModelConfig& config);

/// Downsampling residual block followed by an identity residual block.
/// [N,W,H,W] -> [N,W,H/2,W/2].
template <typename T>
Var<T> spatial_process_block(BoundParams<T>& p, const std::string& prefix, const Var<T>& x);

/// Residual frequency block: project(gate(expand(norm(ffc(x))))) + x.
template <typename T>
Var<T> frequency_process_block(BoundParams<T>& p, const std::string& prefix, const Var<T>& x);

/// Resampled network inputs, each [N,1,side,side]. `large`/`small` are empty
/// when the configuration disables that scale.
template <typename T>
struct ScaleBatch {
  Tensor<T> large, medium, small;
};

template <typename T>
ScaleBatch<T> prepare_scales(std::span<const GrayImage> images, const ModelConfig& config);

/// Full network on a prepared batch; returns logits of shape [N].
template <typename T>
Var<T> forward_logits(BoundParams<T>& p, const ModelConfig& config, const ScaleBatch<T>& batch);

/// Eval-mode logit of one image. Label 1 (fake) when sigmoid(logit) >= 0.5.
template <typename T>
T forward(const ModelParams<T>& params, const ModelConfig& config, const GrayImage& image);

/// Eval-mode logits for many images, processed in fixed-size chunks. Each
/// sample's result is independent of the chunking.
template <typename T>
std::vector<T> forward_many(const ModelParams<T>& params, const ModelConfig& config,
                            std::span<const GrayImage> images);

}  // namespace esf
