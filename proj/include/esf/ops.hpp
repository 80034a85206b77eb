#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "esf/autodiff.hpp"
#include "esf/tensor.hpp"

// Differentiable neural primitives. Every function records its result on the
// tape of its first operand. Feature maps are [N,C,H,W]; conv2d additionally
// accepts an unbatched [C,H,W] input.
namespace esf::ops {

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  std::size_t groups = 1;

  static Conv2dOptions same(std::size_t kh, std::size_t kw,
                            std::size_t groups = 1) {
    return {1, kh / 2, kw / 2, groups};
  }
};

/// weight: [C_out, C_in/groups, kh, kw]; bias: [C_out].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight,
              const std::optional<std::type_identity_t<Var<T>>>& bias, const Conv2dOptions& options);

enum class Mode { train, eval };

/// Running statistics owned by the caller. Train-mode calls update them in
/// place: running = momentum * running + (1 - momentum) * batch.
template <typename T>
struct BatchNormStats {
  Tensor<T>& running_mean;
  Tensor<T>& running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);
};

template <typename T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma,
                  const Var<T>& beta, BatchNormStats<T> stats, Mode mode);

/// Normalizes over axis 1 independently for every other index.
template <typename T>
Var<T> layer_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5));

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

/// 2x2 window, stride 2. Gradient goes to the first maximum in row-major order.
template <typename T>
Var<T> max_pool2d(const Var<T>& x);

/// [N,C,H,W] -> [N,C].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

/// x: [N,in], weight: [out,in], bias: [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight,
              const std::optional<std::type_identity_t<Var<T>>>& bias);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count);

/// [C_out,C_in,kh,kw] -> [C_out,C_in,1,1], summing each kernel's taps.
template <typename T>
Var<T> kernel_sum(const Var<T>& weight);

template <typename T>
Var<T> sum(const Var<T>& x);

template <typename T>
Var<T> mean(const Var<T>& x);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// [N,C,H,W] -> [N,2C,H,W]: real parts in channels [0,C), imaginary in
/// [C,2C). Unnormalized. `allow_any_size` admits non-power-of-two maps via a
/// direct transform.
template <typename T>
Var<T> fft2d_stacked(const Var<T>& x, bool allow_any_size = false);

/// Inverse of the stacked layout: [N,2C,H,W] -> real part of the
/// 1/(H*W)-normalized inverse transform, [N,C,H,W].
template <typename T>
Var<T> ifft2d_stacked_real(const Var<T>& stacked, bool allow_any_size = false);

/// Mean binary cross-entropy on logits of shape [N] or [N,1]. Labels in {0,1}.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, std::span<const T> labels);

}  // namespace esf::ops
