#pragma once

#include <complex>
#include <cstddef>
#include <span>

#include "esf/tensor.hpp"

namespace esf {

/// Spectrum of a real feature map: real and imaginary parts with equal shapes.
template <typename T>
struct ComplexPlane {
  Tensor<T> real;
  Tensor<T> imag;
};

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

namespace fft {

/// In-place unnormalized 2D DFT of one H x W plane. `inverse` flips the
/// exponent sign without applying 1/(H*W). Radix-2 when both sides are powers
/// of two; `allow_any_size` enables a direct O(n^2) per-axis fallback.
template <typename T>
void transform_plane(std::span<std::complex<T>> plane, std::size_t height,
                     std::size_t width, bool inverse, bool allow_any_size);

}  // namespace fft

/// Unnormalized forward transform over the last two axes of a rank-3 or
/// rank-4 tensor. Both spatial sizes must be powers of two.
template <typename T>
ComplexPlane<T> fft2d(const Tensor<T>& x);

/// Inverse transform normalized by 1/(H*W), returning the full complex result.
template <typename T>
ComplexPlane<T> ifft2d_complex(const ComplexPlane<T>& spectrum);

/// Real part of the normalized inverse transform.
template <typename T>
Tensor<T> ifft2d(const ComplexPlane<T>& spectrum);

/// Moves the zero-frequency bin of each plane to (H/2, W/2).
template <typename T>
Tensor<T> fftshift(const Tensor<T>& x);

}  // namespace esf
