#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "esf/autodiff.hpp"
#include "esf/ops.hpp"
#include "esf/tensor.hpp"
#include "esf/wavelet.hpp"

// Reference implementations written from the definitions, shared by the unit
// tests and the acceptance run.
namespace esf::oracles {

// Definitional central-difference sum with zero padding.
inline Tensor<double> cdc(const Tensor<double>& x, const Tensor<double>& w) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  Tensor<double> y({n, co, h, wd});
  auto px = [&](std::size_t b, std::size_t c, long r, long q) {
    return (r < 0 || q < 0 || r >= long(h) || q >= long(wd)) ? 0.0
                                                             : x.at(b, c, std::size_t(r), std::size_t(q));
  };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < wd; ++q) {
          double acc = 0;
          for (std::size_t c = 0; c < ci; ++c)
            for (long u = -1; u <= 1; ++u)
              for (long v = -1; v <= 1; ++v)
                acc += w.at(o, c, std::size_t(u + 1), std::size_t(v + 1)) *
                       (px(b, c, long(r) + u, long(q) + v) - x.at(b, c, r, q));
          y.at(b, o, r, q) = acc;
        }
  return y;
}

// Step integration of the precision-recall curve over the ranked list.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double pos = double(std::count(labels.begin(), labels.end(), 1));
  double tp = 0, area = 0, prev_recall = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += labels[order[k]];
    const double recall = tp / pos, precision = tp / double(k + 1);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return 100 * area;
}

// Same integral in exact integer arithmetic, as numerator / denominator of the
// percent value. Valid for up to 20 items.
inline std::pair<std::uint64_t, std::uint64_t> average_precision_exact(const std::vector<double>& scores,
                                                                       const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::uint64_t lcm = 1;
  for (std::uint64_t k = 1; k <= order.size(); ++k) lcm = std::lcm(lcm, k);
  std::uint64_t tp = 0, sum = 0;
  for (std::size_t k = 0; k < order.size(); ++k)
    if (labels[order[k]] == 1) sum += ++tp * (lcm / (k + 1));
  return {100 * sum, lcm * tp};
}

// Two-level wavelet convolution spelled out: depthwise base conv plus bias,
// plus idwt(conv(dwt x) + idwt(conv(dwt ll))). x is [1, C, H, W].
inline Tensor<double> wtconv(const Tensor<double>& x, const Tensor<double>& base,
                             const Tensor<double>& bias, const Tensor<double>& k1,
                             const Tensor<double>& k2) {
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tape<double> tape;
  auto conv = [&](const Tensor<double>& in, const Tensor<double>& k, std::size_t g) {
    return ops::conv2d(tape.constant(in), tape.constant(k), std::nullopt,
                       ops::Conv2dOptions::same(3, 3, g))
        .value();
  };
  const auto p1 = dwt2_packed(x);
  const auto f1 = conv(p1, k1, 4 * c);
  Tensor<double> ll1({1, c, h / 2, w / 2});
  std::copy_n(p1.data(), ll1.size(), ll1.data());
  const auto r2 = idwt2_packed(conv(dwt2_packed(ll1), k2, 4 * c));
  auto merged = f1;
  for (std::size_t i = 0; i < r2.size(); ++i) merged[i] += r2[i];
  const auto r1 = idwt2_packed(merged);
  auto out = conv(x, base, c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) out[ch * h * w + i] += bias[ch] + r1[ch * h * w + i];
  return out;
}

}  // namespace esf::oracles
