#include "esf/model.hpp"

#include <cmath>
#include <random>

#include "esf/error.hpp"
#include "esf/wavelet.hpp"

namespace esf {

void ModelConfig::validate() const {
  if (base_scale == 0 || base_scale % 16 != 0) {
    throw ConfigError("model: base_scale " + std::to_string(base_scale) +
                      " must be a positive multiple of 16");
  }
  if (base_channels < 2 || base_channels % 2 != 0) {
    throw ConfigError("model: base_channels " + std::to_string(base_channels) +
                      " must be even and >= 2");
  }
  if (fpb_count < 1) throw ConfigError("model: fpb_count must be >= 1");
  if (wtconv_levels < 1) throw ConfigError("model: wtconv_levels must be >= 1");
  // Each wavelet level halves the ll band of the smallest stem input.
  const std::size_t smallest = use_small_scale ? base_scale / 2 : base_scale;
  if (wavelet_branch && (smallest >> wtconv_levels) % 2 != 0) {
    throw ConfigError("model: wtconv_levels " + std::to_string(wtconv_levels) +
                      " too deep for input side " + std::to_string(smallest));
  }
}

namespace {

std::vector<std::string> stem_names(const ModelConfig& c) {
  std::vector<std::string> out;
  if (c.use_large_scale) out.push_back("stem.large");
  out.push_back("stem.medium");
  if (c.use_small_scale) out.push_back("stem.small");
  return out;
}

void add_conv(std::vector<ParamSpec>& specs, const std::string& name, Shape weight, bool bias) {
  const std::size_t fan_in = weight[1] * weight[2] * weight[3];
  const std::size_t out = weight[0];
  specs.push_back({name + ".weight", std::move(weight), ParamInit::kaiming_uniform, fan_in});
  if (bias) specs.push_back({name + ".bias", {out}, ParamInit::zeros, 1});
}

void add_norm(std::vector<ParamSpec>& specs, const std::string& name, std::size_t c,
              bool running_stats) {
  specs.push_back({name + ".gamma", {c}, ParamInit::ones, 1});
  specs.push_back({name + ".beta", {c}, ParamInit::zeros, 1});
  if (running_stats) {
    specs.push_back({name + ".running_mean", {c}, ParamInit::zeros, 1});
    specs.push_back({name + ".running_var", {c}, ParamInit::ones, 1});
  }
}

}  // namespace

std::vector<ParamSpec> parameter_specs(const ModelConfig& config) {
  config.validate();
  const std::size_t c = kInputChannels;
  const std::size_t w = config.base_channels;
  std::vector<ParamSpec> specs;
  for (const auto& stem : stem_names(config)) {
    if (config.wavelet_branch) {
      add_conv(specs, stem + ".dsconv.depthwise", {3 * c, 1, 3, 3}, true);
      add_conv(specs, stem + ".dsconv.pointwise", {3 * c, c, 1, 1}, true);
      add_conv(specs, stem + ".wtconv.base", {c, 1, 3, 3}, true);
      for (std::size_t l = 0; l < config.wtconv_levels; ++l) {
        add_conv(specs, stem + ".wtconv.level" + std::to_string(l), {4 * c, 1, 3, 3}, false);
      }
      add_conv(specs, stem + ".dir_x", {c, c, 1, 3}, true);
      add_conv(specs, stem + ".dir_y", {c, c, 3, 1}, true);
      add_conv(specs, stem + ".dir_xy", {c, c, 3, 3}, true);
      add_conv(specs, stem + ".ffn.fc1", {6 * c, 6 * c, 1, 1}, true);
      add_conv(specs, stem + ".ffn.fc2", {3 * c, 6 * c, 1, 1}, true);
    }
    add_conv(specs, stem + ".cdc", {w, c, 3, 3}, true);
    add_norm(specs, stem + ".bn", w, true);
  }
  std::vector<std::string> spbs;
  if (config.use_large_scale) spbs.push_back("spb1");
  spbs.push_back("spb2");
  for (const auto& spb : spbs) {
    add_conv(specs, spb + ".conv1", {w, w, 3, 3}, false);
    add_norm(specs, spb + ".bn1", w, true);
    add_conv(specs, spb + ".proj", {w, w, 1, 1}, true);
    add_conv(specs, spb + ".conv2", {w, w, 3, 3}, false);
    add_norm(specs, spb + ".bn2", w, true);
  }
  for (std::size_t i = 0; i < config.fpb_count; ++i) {
    const std::string fpb = "fpb" + std::to_string(i);
    add_conv(specs, fpb + ".spectral", {2 * w, 2 * w, 1, 1}, true);
    add_norm(specs, fpb + ".norm", w, false);
    add_conv(specs, fpb + ".expand", {2 * w, w, 1, 1}, true);
    add_conv(specs, fpb + ".project", {w, w, 1, 1}, true);
  }
  specs.push_back({"head.fc1.weight", {w / 2, w}, ParamInit::kaiming_uniform, w});
  specs.push_back({"head.fc1.bias", {w / 2}, ParamInit::zeros, 1});
  specs.push_back({"head.fc2.weight", {1, w / 2}, ParamInit::kaiming_uniform, w / 2});
  specs.push_back({"head.fc2.bias", {1}, ParamInit::zeros, 1});
  return specs;
}

template <typename T>
bool ModelParams<T>::is_buffer(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".running_mean") || ends_with(".running_var");
}

template <typename T>
Tensor<T>& ModelParams<T>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter " + name);
  return it->second;
}

template <typename T>
const Tensor<T>& ModelParams<T>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter " + name);
  return it->second;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams<T> params;
  for (const auto& spec : parameter_specs(config)) {
    Tensor<T> t(spec.shape);
    switch (spec.init) {
      case ParamInit::zeros:
        break;
      case ParamInit::ones:
        t.fill(T(1));
        break;
      case ParamInit::kaiming_uniform: {
        const double bound = 1.0 / std::sqrt(double(spec.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.values()) v = T(dist(rng));
        break;
      }
    }
    params.tensors.emplace(spec.name, std::move(t));
  }
  return params;
}

template <typename T>
ModelParams<T> zero_params(const ModelConfig& config) {
  ModelParams<T> params;
  for (const auto& spec : parameter_specs(config)) params.tensors.emplace(spec.name, Tensor<T>(spec.shape));
  return params;
}

template <typename T>
void check_params(const ModelParams<T>& params, const ModelConfig& config) {
  const auto specs = parameter_specs(config);
  if (specs.size() != params.tensors.size()) {
    throw ConfigError("parameter set has " + std::to_string(params.tensors.size()) +
                      " tensors, configuration expects " + std::to_string(specs.size()));
  }
  for (const auto& spec : specs) {
    const auto it = params.tensors.find(spec.name);
    if (it == params.tensors.end()) throw ConfigError("missing parameter " + spec.name);
    if (it->second.shape() != spec.shape) {
      throw ConfigError("parameter " + spec.name + " has shape " + to_string(it->second.shape()) +
                        ", expected " + to_string(spec.shape));
    }
    if (!all_finite(it->second)) throw NumericError("parameter " + spec.name + " is not finite");
  }
}

template <typename T>
BoundParams<T>::BoundParams(Tape<T>& tape, ModelParams<T>& params, ops::Mode mode,
                            bool trainable)
    : tape_(&tape), params_(&params), mode_(mode) {
  for (const auto& [name, t] : params.tensors) {
    if (ModelParams<T>::is_buffer(name)) continue;
    vars_.emplace(name, trainable ? tape.parameter(t) : tape.constant(t));
  }
}

template <typename T>
Var<T> BoundParams<T>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("missing parameter " + name);
  return it->second;
}

template <typename T>
ops::BatchNormStats<T> BoundParams<T>::bn_stats(const std::string& prefix) {
  return {params_->at(prefix + ".running_mean"), params_->at(prefix + ".running_var")};
}

template <typename T>
Var<T> cdc_conv(const Var<T>& x, const Var<T>& weight, const std::optional<std::type_identity_t<Var<T>>>& bias) {
  if (weight.value().rank() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ContractError("cdc_conv: kernel must be 3x3, got " + to_string(weight.shape()));
  }
  const Var<T> neighborhood = ops::conv2d(x, weight, bias, ops::Conv2dOptions::same(3, 3));
  const Var<T> center = ops::conv2d(x, ops::kernel_sum(weight), std::nullopt, {});
  return ops::sub(neighborhood, center);
}

namespace {

template <typename T>
std::optional<Var<T>> opt(const Var<T>& v) {
  return std::optional<Var<T>>(v);
}

template <typename T>
Var<T> conv_layer(BoundParams<T>& p, const std::string& name, const Var<T>& x,
                  const ops::Conv2dOptions& options, bool bias = true) {
  return ops::conv2d(x, p[name + ".weight"], bias ? opt(p[name + ".bias"]) : std::nullopt,
                     options);
}

template <typename T>
Var<T> norm_layer(BoundParams<T>& p, const std::string& name, const Var<T>& x) {
  return ops::batch_norm(x, p[name + ".gamma"], p[name + ".beta"], p.bn_stats(name), p.mode());
}

// Replaces the image with I + idwt2(ll, enhanced high-frequency bands).
template <typename T>
Var<T> wavelet_enhance(BoundParams<T>& p, const std::string& s, const Var<T>& image,
                       const ModelConfig& config) {
  const std::size_t c = kInputChannels;
  const Var<T> bands = dwt2(image);  // ll, lh, hl, hh
  const Var<T> ll = ops::slice_channels(bands, 0, c);
  const Var<T> lh = ops::slice_channels(bands, c, c);
  const Var<T> hl = ops::slice_channels(bands, 2 * c, c);
  const Var<T> hh = ops::slice_channels(bands, 3 * c, c);

  // One depthwise separable conv per high band: grouped depthwise over the
  // stacked (hh, hl, lh) channels, then a pointwise conv with one group each.
  const Var<T> high = ops::concat_channels<T>({hh, hl, lh});
  const Var<T> dw = conv_layer(p, s + ".dsconv.depthwise", high,
                               ops::Conv2dOptions::same(3, 3, 3 * c));
  const Var<T> ds = conv_layer(p, s + ".dsconv.pointwise", dw, ops::Conv2dOptions{1, 0, 0, 3});
  const Var<T> hh_p = ops::slice_channels(ds, 0, c);
  const Var<T> hl_p = ops::slice_channels(ds, c, c);
  const Var<T> lh_p = ops::slice_channels(ds, 2 * c, c);

  WtConvWeights<T> wt{p[s + ".wtconv.base.weight"], p[s + ".wtconv.base.bias"], {}};
  for (std::size_t l = 0; l < config.wtconv_levels; ++l) {
    wt.levels.push_back(p[s + ".wtconv.level" + std::to_string(l) + ".weight"]);
  }
  const Var<T> ll_p = wtconv(ll, wt);

  const Var<T> diag = conv_layer(p, s + ".dir_xy", ll_p, ops::Conv2dOptions{1, 1, 1, 1});
  const Var<T> horiz = conv_layer(p, s + ".dir_x", ll_p, ops::Conv2dOptions{1, 0, 1, 1});
  const Var<T> vert = conv_layer(p, s + ".dir_y", ll_p, ops::Conv2dOptions{1, 1, 0, 1});

  const Var<T> enhanced = ops::concat_channels<T>({hh_p, diag, hl_p, horiz, lh_p, vert});
  const Var<T> hidden = ops::relu(conv_layer(p, s + ".ffn.fc1", enhanced, ops::Conv2dOptions{}));
  // Channel blocks follow the (hh, hl, lh) order of the enhanced input.
  const Var<T> fe = conv_layer(p, s + ".ffn.fc2", hidden, ops::Conv2dOptions{});
  const Var<T> packed = ops::concat_channels<T>({ll, ops::slice_channels(fe, 2 * c, c),
                                                 ops::slice_channels(fe, c, c),
                                                 ops::slice_channels(fe, 0, c)});
  return ops::add(image, idwt2(packed));
}

}  // namespace

template <typename T>
Var<T> wavelet_enhanced_stem(BoundParams<T>& p, const std::string& s, const Var<T>& image,
                             const ModelConfig& config) {
  const Shape& shape = image.shape();
  if (shape.size() != 4 || shape[1] != kInputChannels) {
    throw DimensionError("stem: expected [N,1,H,W], got " + to_string(shape));
  }
  if (shape[2] % 4 != 0 || shape[3] % 4 != 0) {
    throw DimensionError("stem: spatial size " + std::to_string(shape[2]) + "x" +
                         std::to_string(shape[3]) + " must be divisible by 4");
  }
  const Var<T> enhanced = config.wavelet_branch ? wavelet_enhance(p, s, image, config) : image;
  const Var<T> feat = config.central_conv
                          ? cdc_conv(enhanced, p[s + ".cdc.weight"], opt(p[s + ".cdc.bias"]))
                          : conv_layer(p, s + ".cdc", enhanced, ops::Conv2dOptions::same(3, 3));
  return ops::max_pool2d(ops::relu(norm_layer(p, s + ".bn", feat)));
}

template <typename T>
Var<T> spatial_process_block(BoundParams<T>& p, const std::string& s, const Var<T>& x) {
  const Shape& shape = x.shape();
  if (shape.size() != 4) throw DimensionError("spatial_process_block: expected [N,C,H,W]");
  if (shape[2] % 2 != 0 || shape[3] % 2 != 0) {
    throw DimensionError("spatial_process_block: spatial size " + std::to_string(shape[2]) +
                         "x" + std::to_string(shape[3]) + " must be even");
  }
  const Var<T> main1 = norm_layer(p, s + ".bn1",
                                  conv_layer(p, s + ".conv1", x, {2, 1, 1, 1}, false));
  const Var<T> skip1 = conv_layer(p, s + ".proj", x, {2, 0, 0, 1});
  const Var<T> out1 = ops::relu(ops::add(main1, skip1));
  const Var<T> main2 = norm_layer(p, s + ".bn2",
                                  conv_layer(p, s + ".conv2", out1, {1, 1, 1, 1}, false));
  return ops::relu(ops::add(main2, out1));
}

template <typename T>
Var<T> frequency_process_block(BoundParams<T>& p, const std::string& s, const Var<T>& x) {
  const Shape& shape = x.shape();
  if (shape.size() != 4) throw DimensionError("frequency_process_block: expected [N,C,H,W]");
  // Fourier unit: pointwise mixing of the stacked real/imag spectrum.
  const Var<T> spectrum = ops::fft2d_stacked(x, true);
  const Var<T> mixed = ops::relu(conv_layer(p, s + ".spectral", spectrum, {}));
  const Var<T> ffc = ops::ifft2d_stacked_real(mixed, true);
  const Var<T> normed = ops::layer_norm(ffc, p[s + ".norm.gamma"], p[s + ".norm.beta"]);
  const Var<T> expanded = conv_layer(p, s + ".expand", normed, {});
  const std::size_t wide = expanded.dim(1);
  if (wide % 2 != 0) {
    throw ContractError("frequency_process_block: gate needs an even channel count, got " +
                        std::to_string(wide));
  }
  const Var<T> gated = ops::mul(ops::slice_channels(expanded, 0, wide / 2),
                                ops::slice_channels(expanded, wide / 2, wide / 2));
  return ops::add(conv_layer(p, s + ".project", gated, {}), x);
}

template <typename T>
ScaleBatch<T> prepare_scales(std::span<const GrayImage> images, const ModelConfig& config) {
  config.validate();
  if (images.empty()) throw ContractError("prepare_scales: empty batch");
  const std::size_t s = config.base_scale;
  auto build = [&](std::size_t side) {
    Tensor<T> t({images.size(), 1, side, side});
    for (std::size_t i = 0; i < images.size(); ++i) {
      const GrayImage& img = images[i];
      if (img.empty()) throw ContractError("forward: empty image");
      if (img.width < 16 || img.height < 16) {
        throw ContractError("forward: image " + std::to_string(img.width) + "x" +
                            std::to_string(img.height) + " smaller than 16x16");
      }
      std::vector<T> unit(img.pixels.size());
      for (std::size_t k = 0; k < unit.size(); ++k) unit[k] = T(img.pixels[k]) / T(255);
      const auto r = resample_bilinear<T>(unit, img.width, img.height, side, side);
      std::copy(r.begin(), r.end(), t.data() + i * side * side);
    }
    return t;
  };
  ScaleBatch<T> batch;
  if (config.use_large_scale) batch.large = build(2 * s);
  batch.medium = build(s);
  if (config.use_small_scale) batch.small = build(s / 2);
  return batch;
}

template <typename T>
Var<T> forward_logits(BoundParams<T>& p, const ModelConfig& config, const ScaleBatch<T>& batch) {
  Tape<T>& tape = p.tape();
  Var<T> f;
  if (config.use_large_scale) {
    f = wavelet_enhanced_stem(p, "stem.large", tape.constant(batch.large), config);
    f = spatial_process_block(p, "spb1", f);
    f = ops::add(f, wavelet_enhanced_stem(p, "stem.medium", tape.constant(batch.medium), config));
  } else {
    f = wavelet_enhanced_stem(p, "stem.medium", tape.constant(batch.medium), config);
  }
  f = spatial_process_block(p, "spb2", f);
  if (config.use_small_scale) {
    f = ops::add(f, wavelet_enhanced_stem(p, "stem.small", tape.constant(batch.small), config));
  }
  for (std::size_t i = 0; i < config.fpb_count; ++i) {
    f = frequency_process_block(p, "fpb" + std::to_string(i), f);
  }
  const Var<T> pooled = ops::global_avg_pool(f);
  const Var<T> hidden =
      ops::relu(ops::linear(pooled, p["head.fc1.weight"], opt(p["head.fc1.bias"])));
  const Var<T> logit = ops::linear(hidden, p["head.fc2.weight"], opt(p["head.fc2.bias"]));
  return ops::reshape(logit, {logit.dim(0)});
}

template <typename T>
std::vector<T> forward_many(const ModelParams<T>& params, const ModelConfig& config,
                            std::span<const GrayImage> images) {
  constexpr std::size_t kChunk = 16;
  check_params(params, config);
  // Eval mode never writes running statistics, but binding needs a mutable set.
  ModelParams<T> local = params;
  std::vector<T> out;
  out.reserve(images.size());
  for (std::size_t begin = 0; begin < images.size(); begin += kChunk) {
    const auto chunk = images.subspan(begin, std::min(kChunk, images.size() - begin));
    Tape<T> tape;
    BoundParams<T> bound(tape, local, ops::Mode::eval, false);
    const Var<T> logits = forward_logits(bound, config, prepare_scales<T>(chunk, config));
    out.insert(out.end(), logits.value().values().begin(), logits.value().values().end());
  }
  return out;
}

template <typename T>
T forward(const ModelParams<T>& params, const ModelConfig& config, const GrayImage& image) {
  return forward_many(params, config, std::span<const GrayImage>(&image, 1)).front();
}

#define ESF_INSTANTIATE_MODEL(T)                                                              \
  template struct ModelParams<T>;                                                             \
  template class BoundParams<T>;                                                              \
  template ModelParams<T> init_params(const ModelConfig&, std::uint64_t);                     \
  template ModelParams<T> zero_params(const ModelConfig&);                                    \
  template void check_params(const ModelParams<T>&, const ModelConfig&);                      \
  template Var<T> cdc_conv(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);       \
  template Var<T> wavelet_enhanced_stem(BoundParams<T>&, const std::string&, const Var<T>&,   \
                                        const ModelConfig&);                                  \
  template Var<T> spatial_process_block(BoundParams<T>&, const std::string&, const Var<T>&);  \
  template Var<T> frequency_process_block(BoundParams<T>&, const std::string&, const Var<T>&);\
  template ScaleBatch<T> prepare_scales(std::span<const GrayImage>, const ModelConfig&);      \
  template Var<T> forward_logits(BoundParams<T>&, const ModelConfig&, const ScaleBatch<T>&);  \
  template std::vector<T> forward_many(const ModelParams<T>&, const ModelConfig&,             \
                                      std::span<const GrayImage>);                            \
  template T forward(const ModelParams<T>&, const ModelConfig&, const GrayImage&);

ESF_INSTANTIATE_MODEL(float)
ESF_INSTANTIATE_MODEL(double)

}  // namespace esf
