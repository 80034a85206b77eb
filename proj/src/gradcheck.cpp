#include "esf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "esf/model.hpp"
#include "esf/ops.hpp"
#include "esf/wavelet.hpp"

namespace esf {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

std::vector<std::size_t> sample_indices(std::size_t size, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  if (size <= count) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

Objective projected_objective(Expression expression, std::uint64_t seed) {
  return [expression = std::move(expression), seed](const std::vector<Tensor<double>>& inputs,
                                                     std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.parameter(t));
    const Var<double> out = expression(tape, leaves);
    std::mt19937_64 rng(seed);
    const Var<double> proj = tape.constant(random_tensor(out.shape(), rng));
    const Var<double> loss = ops::sum(ops::mul(out, proj));
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (const auto& leaf : leaves) grads->push_back(tape.grad(leaf));
    }
    return loss.value()[0];
  };
}

GradCheckResult check_gradient(const std::string& name, const Objective& objective,
                               const std::vector<Tensor<double>>& inputs,
                               const std::vector<std::string>& input_names, std::mt19937_64& rng,
                               const GradCheckOptions& options) {
  GradCheckResult result;
  result.name = name;
  std::vector<Tensor<double>> analytic;
  objective(inputs, &analytic);
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i : sample_indices(inputs[k].size(), options.entries_per_input, rng)) {
      const double original = probe[k][i];
      auto error_at = [&](double h) {
        probe[k][i] = original + h;
        const double up = objective(probe, nullptr);
        probe[k][i] = original - h;
        const double down = objective(probe, nullptr);
        probe[k][i] = original;
        return relative_error(analytic[k][i], (up - down) / (2 * h), options.denominator_floor);
      };
      double err = error_at(options.step);
      // A difference that straddles a ReLU or max-pool kink is not a valid
      // oracle. Shrinking the step moves off the kink; a wrong gradient stays
      // wrong at every step.
      for (int refine = 1; refine <= options.refinements && err >= options.tolerance; ++refine) {
        if (refine == 1) ++result.refined;
        err = std::min(err, error_at(options.step * std::pow(0.1, refine)));
      }
      ++result.entries;
      if (result.worst.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        const std::string label = k < input_names.size() ? input_names[k] : "input" + std::to_string(k);
        result.worst = label + "[" + std::to_string(i) + "]";
      }
    }
  }
  result.passed = result.max_rel_error < options.tolerance;
  return result;
}

// ---------------------------------------------------------------------------
// Primitive suite

std::vector<GradCheckResult> gradcheck_ops(std::uint64_t seed, const GradCheckOptions& options) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> results;
  using V = std::vector<Var<double>>;
  auto run = [&](const std::string& name, Expression expr, std::vector<Tensor<double>> inputs) {
    const auto obj = projected_objective(std::move(expr), rng());
    results.push_back(check_gradient(name, obj, inputs, {}, rng, options));
  };
  auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };

  run("conv2d",
      [](Tape<double>&, const V& v) {
        return ops::conv2d(v[0], v[1], v[2], ops::Conv2dOptions::same(3, 3));
      },
      {r({2, 3, 5, 5}), r({4, 3, 3, 3}), r({4})});
  run("conv2d stride 2",
      [](Tape<double>&, const V& v) {
        return ops::conv2d(v[0], v[1], std::nullopt, ops::Conv2dOptions{2, 1, 1, 1});
      },
      {r({1, 2, 6, 6}), r({3, 2, 3, 3})});
  run("conv2d depthwise",
      [](Tape<double>&, const V& v) {
        return ops::conv2d(v[0], v[1], v[2], ops::Conv2dOptions::same(3, 3, 4));
      },
      {r({1, 4, 5, 5}), r({4, 1, 3, 3}), r({4})});
  run("conv2d grouped pointwise",
      [](Tape<double>&, const V& v) {
        return ops::conv2d(v[0], v[1], std::nullopt, ops::Conv2dOptions{1, 0, 0, 2});
      },
      {r({2, 4, 3, 3}), r({6, 2, 1, 1})});
  run("conv2d 1x3",
      [](Tape<double>&, const V& v) {
        return ops::conv2d(v[0], v[1], v[2], ops::Conv2dOptions{1, 0, 1, 1});
      },
      {r({1, 2, 4, 4}), r({2, 2, 1, 3}), r({2})});
  run("conv2d unbatched",
      [](Tape<double>&, const V& v) {
        return ops::conv2d(v[0], v[1], std::nullopt, ops::Conv2dOptions::same(3, 3));
      },
      {r({2, 4, 4}), r({3, 2, 3, 3})});

  auto stats = std::make_shared<std::pair<Tensor<double>, Tensor<double>>>(
      Tensor<double>({2}), Tensor<double>({2}, 1.0));
  run("batch_norm train",
      [stats](Tape<double>&, const V& v) {
        return ops::batch_norm(v[0], v[1], v[2], ops::BatchNormStats<double>{stats->first, stats->second},
                               ops::Mode::train);
      },
      {r({3, 2, 3, 3}), random_tensor({2}, rng, 0.5, 1.5), r({2})});
  auto eval_stats = std::make_shared<std::pair<Tensor<double>, Tensor<double>>>(
      random_tensor({2}, rng), random_tensor({2}, rng, 0.5, 2.0));
  run("batch_norm eval",
      [eval_stats](Tape<double>&, const V& v) {
        return ops::batch_norm(v[0], v[1], v[2],
                               ops::BatchNormStats<double>{eval_stats->first, eval_stats->second},
                               ops::Mode::eval);
      },
      {r({2, 2, 3, 3}), random_tensor({2}, rng, 0.5, 1.5), r({2})});
  run("layer_norm",
      [](Tape<double>&, const V& v) { return ops::layer_norm(v[0], v[1], v[2]); },
      {r({2, 4, 3, 3}), random_tensor({4}, rng, 0.5, 1.5), r({4})});
  run("relu", [](Tape<double>&, const V& v) { return ops::relu(v[0]); }, {r({2, 3, 4, 4})});
  run("sigmoid", [](Tape<double>&, const V& v) { return ops::sigmoid(v[0]); }, {r({2, 3, 4})});
  run("max_pool2d", [](Tape<double>&, const V& v) { return ops::max_pool2d(v[0]); }, {r({2, 2, 4, 6})});
  run("global_avg_pool", [](Tape<double>&, const V& v) { return ops::global_avg_pool(v[0]); },
      {r({2, 3, 4, 4})});
  run("linear", [](Tape<double>&, const V& v) { return ops::linear(v[0], v[1], v[2]); },
      {r({3, 4}), r({2, 4}), r({2})});
  run("add", [](Tape<double>&, const V& v) { return ops::add(v[0], v[1]); }, {r({2, 3}), r({2, 3})});
  run("sub", [](Tape<double>&, const V& v) { return ops::sub(v[0], v[1]); }, {r({2, 3}), r({2, 3})});
  run("mul", [](Tape<double>&, const V& v) { return ops::mul(v[0], v[1]); }, {r({2, 3}), r({2, 3})});
  run("scale", [](Tape<double>&, const V& v) { return ops::scale(v[0], -1.7); }, {r({5})});
  run("concat_channels",
      [](Tape<double>&, const V& v) { return ops::concat_channels<double>({v[0], v[1]}); },
      {r({2, 2, 2, 2}), r({2, 3, 2, 2})});
  run("slice_channels", [](Tape<double>&, const V& v) { return ops::slice_channels(v[0], 1, 2); },
      {r({2, 4, 2, 2})});
  run("kernel_sum", [](Tape<double>&, const V& v) { return ops::kernel_sum(v[0]); }, {r({2, 3, 3, 3})});
  run("sum", [](Tape<double>&, const V& v) { return ops::sum(v[0]); }, {r({3, 4})});
  run("mean", [](Tape<double>&, const V& v) { return ops::mean(v[0]); }, {r({3, 4})});
  run("reshape", [](Tape<double>&, const V& v) { return ops::reshape(v[0], {6, 2}); }, {r({3, 4})});
  run("fft2d_stacked", [](Tape<double>&, const V& v) { return ops::fft2d_stacked(v[0]); },
      {r({2, 2, 4, 8})});
  run("fft2d_stacked any size",
      [](Tape<double>&, const V& v) { return ops::fft2d_stacked(v[0], true); }, {r({1, 2, 6, 5})});
  run("ifft2d_stacked_real",
      [](Tape<double>&, const V& v) { return ops::ifft2d_stacked_real(v[0]); }, {r({2, 4, 4, 4})});
  run("ifft2d_stacked_real any size",
      [](Tape<double>&, const V& v) { return ops::ifft2d_stacked_real(v[0], true); },
      {r({1, 4, 3, 6})});
  run("bce_with_logits",
      [](Tape<double>&, const V& v) {
        static const double labels[] = {0, 1, 1, 0, 1};
        return ops::bce_with_logits(v[0], std::span<const double>(labels));
      },
      {random_tensor({5}, rng, -4, 4)});
  run("dwt2", [](Tape<double>&, const V& v) { return dwt2(v[0]); }, {r({2, 2, 4, 6})});
  run("idwt2", [](Tape<double>&, const V& v) { return idwt2(v[0]); }, {r({2, 8, 2, 3})});
  run("wtconv",
      [](Tape<double>&, const V& v) { return wtconv(v[0], WtConvWeights<double>{v[1], v[2], {v[3]}}); },
      {r({2, 2, 8, 8}), r({2, 1, 3, 3}), r({2}), r({8, 1, 3, 3})});
  run("wtconv two levels",
      [](Tape<double>&, const V& v) {
        return wtconv(v[0], WtConvWeights<double>{v[1], v[2], {v[3], v[4]}});
      },
      {r({1, 2, 8, 8}), r({2, 1, 3, 3}), r({2}), r({8, 1, 3, 3}), r({8, 1, 3, 3})});
  run("cdc_conv",
      [](Tape<double>&, const V& v) { return cdc_conv(v[0], v[1], v[2]); },
      {r({2, 3, 5, 5}), r({2, 3, 3, 3}), r({2})});
  return results;
}

// ---------------------------------------------------------------------------
// Block suite

namespace {

// Parameters with non-degenerate biases and norm gains.
ModelParams<double> randomized_params(const ModelConfig& config, std::mt19937_64& rng) {
  ModelParams<double> p = init_params<double>(config, rng());
  std::uniform_real_distribution<double> small(-0.1, 0.1);
  for (auto& [name, t] : p.tensors) {
    auto ends_with = [&](std::string_view s) {
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".bias") || ends_with(".beta")) {
      for (auto& v : t.values()) v = small(rng);
    } else if (ends_with(".gamma")) {
      for (auto& v : t.values()) v = 1.0 + 5.0 * small(rng);
    }
  }
  return p;
}

using BlockFn = std::function<Var<double>(BoundParams<double>&, const std::vector<Var<double>>&)>;

// Inputs are the `extra` tensors followed by every trainable tensor whose
// name starts with `prefix`.
struct BlockCase {
  ModelParams<double> base;
  std::vector<std::string> names;
  std::vector<Tensor<double>> inputs;
  std::vector<std::string> input_names;
  std::size_t n_extra = 0;
};

BlockCase make_case(const ModelParams<double>& all, const std::string& prefix,
                    std::vector<Tensor<double>> extra) {
  BlockCase c;
  c.n_extra = extra.size();
  c.inputs = std::move(extra);
  for (std::size_t i = 0; i < c.n_extra; ++i) c.input_names.push_back("x" + std::to_string(i));
  for (const auto& [name, t] : all.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    c.base.tensors.emplace(name, t);
    if (ModelParams<double>::is_buffer(name)) continue;
    c.names.push_back(name);
    c.inputs.push_back(t);
    c.input_names.push_back(name);
  }
  return c;
}

Objective block_objective(const BlockCase& c, BlockFn fn, std::uint64_t seed) {
  return [c, fn = std::move(fn), seed](const std::vector<Tensor<double>>& inputs,
                                       std::vector<Tensor<double>>* grads) {
    ModelParams<double> p = c.base;
    for (std::size_t i = 0; i < c.names.size(); ++i) p.at(c.names[i]) = inputs[c.n_extra + i];
    Tape<double> tape;
    BoundParams<double> bound(tape, p, ops::Mode::train, true);
    std::vector<Var<double>> extra;
    for (std::size_t i = 0; i < c.n_extra; ++i) extra.push_back(tape.parameter(inputs[i]));
    const Var<double> out = fn(bound, extra);
    std::mt19937_64 rng(seed);
    const Var<double> loss = ops::sum(ops::mul(out, tape.constant(random_tensor(out.shape(), rng))));
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (const auto& v : extra) grads->push_back(tape.grad(v));
      for (const auto& name : c.names) grads->push_back(tape.grad(bound[name]));
    }
    return loss.value()[0];
  };
}

}  // namespace

std::vector<GradCheckResult> gradcheck_blocks(std::uint64_t seed, const GradCheckOptions& options) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> results;
  auto run = [&](const std::string& name, const BlockCase& c, BlockFn fn, const GradCheckOptions& opt) {
    const auto obj = block_objective(c, std::move(fn), rng());
    results.push_back(check_gradient(name, obj, c.inputs, c.input_names, rng, opt));
  };

  ModelConfig small;
  small.base_scale = 16;
  small.base_channels = 4;
  for (bool plain : {false, true}) {
    ModelConfig cfg = small;
    cfg.wavelet_branch = !plain;
    cfg.central_conv = !plain;
    const auto params = randomized_params(cfg, rng);
    const auto c = make_case(params, "stem.medium.", {random_tensor({2, 1, 16, 16}, rng)});
    run(plain ? "stem (plain conv, no wavelet branch)" : "wavelet-enhanced stem", c,
        [cfg](BoundParams<double>& p, const std::vector<Var<double>>& x) {
          return wavelet_enhanced_stem(p, "stem.medium", x[0], cfg);
        },
        options);
  }
  {
    const auto params = randomized_params(small, rng);
    const auto c = make_case(params, "spb2.", {random_tensor({2, 4, 8, 8}, rng)});
    run("spatial process block", c,
        [](BoundParams<double>& p, const std::vector<Var<double>>& x) {
          return spatial_process_block(p, "spb2", x[0]);
        },
        options);
  }
  for (std::size_t side : {8, 6}) {
    const auto params = randomized_params(small, rng);
    const auto c = make_case(params, "fpb0.", {random_tensor({2, 4, side, side}, rng)});
    run("frequency process block " + std::to_string(side) + "x" + std::to_string(side), c,
        [](BoundParams<double>& p, const std::vector<Var<double>>& x) {
          return frequency_process_block(p, "fpb0", x[0]);
        },
        options);
  }
  {
    ModelConfig cfg;
    cfg.base_scale = 32;
    cfg.base_channels = 8;
    const auto params = randomized_params(cfg, rng);
    std::vector<GrayImage> images;
    std::uniform_int_distribution<int> level(0, 255);
    for (int i = 0; i < 2; ++i) {
      GrayImage img(40, 40);
      for (auto& px : img.pixels) px = static_cast<std::uint8_t>(level(rng));
      images.push_back(std::move(img));
    }
    const auto batch = std::make_shared<ScaleBatch<double>>(prepare_scales<double>(images, cfg));
    const auto c = make_case(params, "", {});
    GradCheckOptions opt = options;
    opt.entries_per_input = std::min<std::size_t>(opt.entries_per_input, 3);
    run("full network (base scale 32)", c,
        [cfg, batch](BoundParams<double>& p, const std::vector<Var<double>>&) {
          static const double labels[] = {0, 1};
          const Var<double> logits = forward_logits(p, cfg, *batch);
          return ops::bce_with_logits(logits, std::span<const double>(labels));
        },
        opt);
  }
  return results;
}

std::vector<GradCheckResult> gradcheck_all(std::uint64_t seed, const GradCheckOptions& options) {
  auto results = gradcheck_ops(seed, options);
  auto blocks = gradcheck_blocks(seed + 1, options);
  results.insert(results.end(), blocks.begin(), blocks.end());
  return results;
}

}  // namespace esf
