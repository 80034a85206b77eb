#include "esf/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "esf/error.hpp"
#include "esf/jpeg.hpp"

namespace esf {

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  model.validate();
  if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
  if (lr_min < 0 || lr_min > learning_rate) {
    throw ConfigError("train: lr_min must lie in [0, learning_rate]");
  }
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (augment.probability < 0 || augment.probability > 1) {
    throw ConfigError("train: augment.probability must lie in [0,1]");
  }
  if (!(augment.blur_sigma_min > 0) || augment.blur_sigma_max < augment.blur_sigma_min) {
    throw ConfigError("train: invalid blur sigma range");
  }
  if (augment.jpeg_quality_min < 1 || augment.jpeg_quality_max > 100 ||
      augment.jpeg_quality_max < augment.jpeg_quality_min) {
    throw ConfigError("train: invalid jpeg quality range");
  }
}

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  return {{"base_scale", c.base_scale},           {"base_channels", c.base_channels},
          {"fpb_count", c.fpb_count},             {"wtconv_levels", c.wtconv_levels},
          {"use_large_scale", c.use_large_scale}, {"use_small_scale", c.use_small_scale},
          {"wavelet_branch", c.wavelet_branch},   {"central_conv", c.central_conv}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  const std::string where = "model config";
  reject_unknown(j, {"base_scale", "base_channels", "fpb_count", "wtconv_levels",
                     "use_large_scale", "use_small_scale", "wavelet_branch", "central_conv"},
                 where);
  ModelConfig c;
  read(j, "base_scale", c.base_scale, where);
  read(j, "base_channels", c.base_channels, where);
  read(j, "fpb_count", c.fpb_count, where);
  read(j, "wtconv_levels", c.wtconv_levels, where);
  read(j, "use_large_scale", c.use_large_scale, where);
  read(j, "use_small_scale", c.use_small_scale, where);
  read(j, "wavelet_branch", c.wavelet_branch, where);
  read(j, "central_conv", c.central_conv, where);
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  const auto& a = c.augment;
  return {{"model", to_json(c.model)},
          {"learning_rate", c.learning_rate},
          {"lr_min", c.lr_min},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"augment",
           {{"hflip", a.hflip},
            {"blur", a.blur},
            {"jpeg", a.jpeg},
            {"probability", a.probability},
            {"blur_sigma_min", a.blur_sigma_min},
            {"blur_sigma_max", a.blur_sigma_max},
            {"jpeg_quality_min", a.jpeg_quality_min},
            {"jpeg_quality_max", a.jpeg_quality_max}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  const std::string where = "train config";
  reject_unknown(j, {"model", "learning_rate", "lr_min", "batch_size", "epochs", "seed", "augment"},
                 where);
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  read(j, "learning_rate", c.learning_rate, where);
  read(j, "lr_min", c.lr_min, where);
  read(j, "batch_size", c.batch_size, where);
  read(j, "epochs", c.epochs, where);
  read(j, "seed", c.seed, where);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    const std::string aw = "train config augment";
    reject_unknown(a, {"hflip", "blur", "jpeg", "probability", "blur_sigma_min", "blur_sigma_max",
                       "jpeg_quality_min", "jpeg_quality_max"},
                   aw);
    read(a, "hflip", c.augment.hflip, aw);
    read(a, "blur", c.augment.blur, aw);
    read(a, "jpeg", c.augment.jpeg, aw);
    read(a, "probability", c.augment.probability, aw);
    read(a, "blur_sigma_min", c.augment.blur_sigma_min, aw);
    read(a, "blur_sigma_max", c.augment.blur_sigma_max, aw);
    read(a, "jpeg_quality_min", c.augment.jpeg_quality_min, aw);
    read(a, "jpeg_quality_max", c.augment.jpeg_quality_max, aw);
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Optimization

double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min) {
  if (total == 0) throw ContractError("cosine_lr: total steps must be > 0");
  if (t > total) {
    throw ContractError("cosine_lr: step " + std::to_string(t) + " beyond " + std::to_string(total));
  }
  return lr_min + 0.5 * (lr_max - lr_min) *
                      (1.0 + std::cos(std::numbers::pi * double(t) / double(total)));
}

template <typename T>
void adam_step(ModelParams<T>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state, double lr) {
  for (const auto& [name, g] : grads) {
    const Tensor<T>& p = params.at(name);
    if (ModelParams<T>::is_buffer(name)) {
      throw ContractError("adam_step: " + name + " is a buffer, not a trainable tensor");
    }
    if (g.shape() != p.shape()) {
      throw DimensionError("adam_step: gradient of " + name + " has shape " +
                           to_string(g.shape()) + ", parameter " + to_string(p.shape()));
    }
    if (!all_finite(g)) throw NumericError("adam_step: non-finite gradient for " + name);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (const auto& [name, g] : grads) {
    Tensor<T>& p = params.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, p.shape());
    auto [vit, v_new] = state.v.try_emplace(name, p.shape());
    T* m = mit->second.data();
    T* v = vit->second.data();
    T* w = p.data();
    const T* gd = g.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = gd[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      m[i] = T(mi);
      v[i] = T(vi);
      w[i] = T(w[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps));
    }
  }
}

template void adam_step(ModelParams<float>&, const std::map<std::string, Tensor<float>>&,
                        AdamState<float>&, double);
template void adam_step(ModelParams<double>&, const std::map<std::string, Tensor<double>>&,
                        AdamState<double>&, double);

GrayImage augment(const GrayImage& image, std::mt19937_64& rng, const AugmentConfig& config) {
  std::bernoulli_distribution coin(config.probability);
  GrayImage out = image;
  // Every coin is drawn even when its augmentation is disabled so that the
  // stream consumed per image does not depend on the flags.
  if (coin(rng) && config.hflip) out = flip_horizontal(out);
  if (coin(rng) && config.blur) {
    std::uniform_real_distribution<double> sigma_dist(config.blur_sigma_min, config.blur_sigma_max);
    const double sigma = sigma_dist(rng);
    const auto k = static_cast<std::size_t>(2 * std::ceil(2 * sigma) + 1);
    out = gaussian_blur(out, sigma, k);
  }
  if (coin(rng) && config.jpeg) {
    std::uniform_int_distribution<int> quality(config.jpeg_quality_min, config.jpeg_quality_max);
    out = jpeg::roundtrip(out, quality(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(const std::vector<LabeledImage>& data, const TrainConfig& config,
                  std::ostream* log) {
  config.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  const auto n_fake = std::count_if(data.begin(), data.end(), [](const auto& s) { return s.label == 1; });
  if (n_fake == 0 || std::size_t(n_fake) == data.size()) {
    throw ConfigError("train: dataset needs both real and fake images");
  }

  TrainResult result;
  result.params = init_params<float>(config.model, config.seed);
  AdamState<float> adam;
  std::mt19937_64 shuffle_rng(derive_seed(config.seed, 1));
  std::mt19937_64 augment_rng(derive_seed(config.seed, 2));

  const std::size_t steps_per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<GrayImage> images;
      std::vector<float> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& sample = data[order[i]];
        images.push_back(augment(sample.image, augment_rng, config.augment));
        labels.push_back(float(sample.label));
      }

      Tape<float> tape;
      BoundParams<float> bound(tape, result.params, ops::Mode::train, true);
      const Var<float> logits =
          forward_logits(bound, config.model, prepare_scales<float>(images, config.model));
      const Var<float> loss = ops::bce_with_logits(logits, std::span<const float>(labels));
      tape.backward(loss);
      std::map<std::string, Tensor<float>> grads;
      for (const auto& [name, var] : bound.vars()) grads.emplace(name, tape.grad(var));

      const double lr = total_steps > 1
                            ? cosine_lr(step, total_steps - 1, config.learning_rate, config.lr_min)
                            : config.learning_rate;
      if (begin == 0) stats.lr = lr;
      result.lr_trace.push_back(lr);
      adam_step(result.params, grads, adam, lr);
      ++step;

      loss_sum += double(loss.value()[0]) * double(end - begin);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const int predicted = logits.value()[i] >= 0.0f ? 1 : 0;
        if (predicted == int(labels[i])) ++correct;
      }
    }
    stats.mean_loss = loss_sum / double(data.size());
    stats.train_acc = 100.0 * double(correct) / double(data.size());
    result.trace.push_back(stats);
    if (log) {
      *log << "epoch " << epoch << "/" << config.epochs << " loss=" << stats.mean_loss
           << " train_acc=" << stats.train_acc << " lr=" << stats.lr << std::endl;
    }
  }
  return result;
}

std::string trace_csv(const std::vector<EpochStats>& trace) {
  std::ostringstream out;
  out << "epoch,mean_loss,train_acc,lr\n" << std::setprecision(9);
  for (const auto& e : trace) {
    out << e.epoch << "," << e.mean_loss << "," << e.train_acc << "," << e.lr << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kMagic[4] = {'E', 'S', 'F', 'C'};

enum ConfigFlag : std::uint32_t {
  kLargeScale = 1u << 0,
  kSmallScale = 1u << 1,
  kWaveletBranch = 1u << 2,
  kCentralConv = 1u << 3,
};

void put_u32(std::vector<std::uint8_t>& out, std::uint64_t value, const char* what) {
  if (value > 0xFFFFFFFFu) throw FormatError(std::string("checkpoint: ") + what + " exceeds 32 bits");
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

  const std::uint8_t* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError(name_ + ": truncated checkpoint");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const std::uint8_t* p = take(4);
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
  }

  bool done() const { return pos_ == bytes_.size(); }
  const std::string& name() const { return name_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  check_params(ckpt.params, ckpt.config);
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  const ModelConfig& c = ckpt.config;
  put_u32(out, kCheckpointVersion, "version");
  put_u32(out, c.base_scale, "base_scale");
  put_u32(out, c.base_channels, "base_channels");
  put_u32(out, c.fpb_count, "fpb_count");
  put_u32(out, c.wtconv_levels, "wtconv_levels");
  put_u32(out, (c.use_large_scale ? kLargeScale : 0u) | (c.use_small_scale ? kSmallScale : 0u) |
                   (c.wavelet_branch ? kWaveletBranch : 0u) | (c.central_conv ? kCentralConv : 0u),
          "flags");
  put_u32(out, ckpt.params.tensors.size(), "tensor count");
  // std::map iteration gives the tensors sorted by name.
  for (const auto& [name, t] : ckpt.params.tensors) {
    put_u32(out, name.size(), "name length");
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, t.rank(), "rank");
    for (std::size_t d : t.shape()) put_u32(out, d, "dimension");
    for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v), "value");
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  Reader in(bytes, name);
  if (std::memcmp(in.take(4), kMagic, 4) != 0) throw FormatError(name + ": not an ESFC checkpoint");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(name + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.base_scale = in.u32();
  c.base_channels = in.u32();
  c.fpb_count = in.u32();
  c.wtconv_levels = in.u32();
  const std::uint32_t flags = in.u32();
  if (flags & ~std::uint32_t(kLargeScale | kSmallScale | kWaveletBranch | kCentralConv)) {
    throw FormatError(name + ": unknown configuration flags");
  }
  c.use_large_scale = flags & kLargeScale;
  c.use_small_scale = flags & kSmallScale;
  c.wavelet_branch = flags & kWaveletBranch;
  c.central_conv = flags & kCentralConv;
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = in.u32();
    const auto* p = in.take(len);
    std::string tname(reinterpret_cast<const char*>(p), len);
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw FormatError(name + ": tensor " + tname + " has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = std::bit_cast<float>(in.u32());
    if (!ckpt.params.tensors.emplace(std::move(tname), std::move(t)).second) {
      throw FormatError(name + ": duplicate tensor");
    }
  }
  if (!in.done()) throw FormatError(name + ": trailing bytes after the last tensor");
  try {
    check_params(ckpt.params, c);
  } catch (const std::exception& e) {
    throw FormatError(name + ": " + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

}  // namespace esf
