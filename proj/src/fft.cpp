#include "esf/fft.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace esf {
namespace fft {
namespace {

template <typename T>
void radix2(std::complex<T>* x, std::size_t n, std::size_t stride,
            bool inverse, std::vector<std::complex<T>>& scratch) {
  scratch.resize(n);
  for (std::size_t i = 0; i < n; ++i) scratch[i] = x[i * stride];
  // Bit reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(scratch[i], scratch[j]);
  }
  const T sign = inverse ? T(1) : T(-1);
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const T angle = sign * T(2) * std::numbers::pi_v<T> / T(len);
    const std::size_t half = len / 2;
    for (std::size_t k = 0; k < half; ++k) {
      const std::complex<T> w(std::cos(angle * T(k)), std::sin(angle * T(k)));
      for (std::size_t i = 0; i < n; i += len) {
        const std::complex<T> u = scratch[i + k];
        const std::complex<T> v = scratch[i + k + half] * w;
        scratch[i + k] = u + v;
        scratch[i + k + half] = u - v;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) x[i * stride] = scratch[i];
}

template <typename T>
void direct(std::complex<T>* x, std::size_t n, std::size_t stride,
            bool inverse, std::vector<std::complex<T>>& scratch) {
  scratch.resize(n);
  const T sign = inverse ? T(1) : T(-1);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<T> acc(0, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t phase = (k * j) % n;
      const T angle = sign * T(2) * std::numbers::pi_v<T> * T(phase) / T(n);
      acc += x[j * stride] * std::complex<T>(std::cos(angle), std::sin(angle));
    }
    scratch[k] = acc;
  }
  for (std::size_t k = 0; k < n; ++k) x[k * stride] = scratch[k];
}

template <typename T>
void transform_axis(std::complex<T>* x, std::size_t n, std::size_t stride,
                    bool inverse, std::vector<std::complex<T>>& scratch) {
  if (is_power_of_two(n)) {
    radix2(x, n, stride, inverse, scratch);
  } else {
    direct(x, n, stride, inverse, scratch);
  }
}

}  // namespace

template <typename T>
void transform_plane(std::span<std::complex<T>> plane, std::size_t height,
                     std::size_t width, bool inverse, bool allow_any_size) {
  if (plane.size() != height * width) {
    throw DimensionError("fft plane size mismatch");
  }
  if (!allow_any_size && (!is_power_of_two(height) || !is_power_of_two(width))) {
    throw DimensionError("fft2d: unsupported size " + std::to_string(height) +
                         "x" + std::to_string(width) +
                         " (radix-2 requires powers of two)");
  }
  std::vector<std::complex<T>> scratch;
  for (std::size_t r = 0; r < height; ++r) {
    transform_axis(plane.data() + r * width, width, 1, inverse, scratch);
  }
  for (std::size_t c = 0; c < width; ++c) {
    transform_axis(plane.data() + c, height, width, inverse, scratch);
  }
}

template void transform_plane<float>(std::span<std::complex<float>>, std::size_t,
                                     std::size_t, bool, bool);
template void transform_plane<double>(std::span<std::complex<double>>,
                                      std::size_t, std::size_t, bool, bool);

}  // namespace fft

namespace {

void require_spatial(const Shape& s, const char* what) {
  if (s.size() != 3 && s.size() != 4) {
    throw DimensionError(std::string(what) + ": expected rank 3 or 4, got " +
                         to_string(s));
  }
}

}  // namespace

template <typename T>
ComplexPlane<T> fft2d(const Tensor<T>& x) {
  require_spatial(x.shape(), "fft2d");
  const std::size_t h = x.shape()[x.rank() - 2];
  const std::size_t w = x.shape()[x.rank() - 1];
  const std::size_t planes = x.size() / (h * w);
  ComplexPlane<T> out{Tensor<T>(x.shape()), Tensor<T>(x.shape())};
  std::vector<std::complex<T>> buf(h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    for (std::size_t i = 0; i < h * w; ++i) buf[i] = {src[i], T(0)};
    fft::transform_plane<T>(buf, h, w, false, false);
    for (std::size_t i = 0; i < h * w; ++i) {
      out.real[p * h * w + i] = buf[i].real();
      out.imag[p * h * w + i] = buf[i].imag();
    }
  }
  return out;
}

template <typename T>
ComplexPlane<T> ifft2d_complex(const ComplexPlane<T>& spectrum) {
  require_spatial(spectrum.real.shape(), "ifft2d");
  if (spectrum.real.shape() != spectrum.imag.shape()) {
    throw DimensionError("ifft2d: real/imag shape mismatch");
  }
  const auto& shape = spectrum.real.shape();
  const std::size_t h = shape[shape.size() - 2];
  const std::size_t w = shape[shape.size() - 1];
  const std::size_t planes = spectrum.real.size() / (h * w);
  const T norm = T(1) / T(h * w);
  ComplexPlane<T> out{Tensor<T>(shape), Tensor<T>(shape)};
  std::vector<std::complex<T>> buf(h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < h * w; ++i) {
      buf[i] = {spectrum.real[p * h * w + i], spectrum.imag[p * h * w + i]};
    }
    fft::transform_plane<T>(buf, h, w, true, false);
    for (std::size_t i = 0; i < h * w; ++i) {
      out.real[p * h * w + i] = buf[i].real() * norm;
      out.imag[p * h * w + i] = buf[i].imag() * norm;
    }
  }
  return out;
}

template <typename T>
Tensor<T> ifft2d(const ComplexPlane<T>& spectrum) {
  return ifft2d_complex(spectrum).real;
}

template <typename T>
Tensor<T> fftshift(const Tensor<T>& x) {
  require_spatial(x.shape(), "fftshift");
  const std::size_t h = x.shape()[x.rank() - 2];
  const std::size_t w = x.shape()[x.rank() - 1];
  const std::size_t planes = x.size() / (h * w);
  Tensor<T> out(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        out[p * h * w + ((r + h / 2) % h) * w + (c + w / 2) % w] =
            x[p * h * w + r * w + c];
      }
    }
  }
  return out;
}

template ComplexPlane<float> fft2d(const Tensor<float>&);
template ComplexPlane<double> fft2d(const Tensor<double>&);
template ComplexPlane<float> ifft2d_complex(const ComplexPlane<float>&);
template ComplexPlane<double> ifft2d_complex(const ComplexPlane<double>&);
template Tensor<float> ifft2d(const ComplexPlane<float>&);
template Tensor<double> ifft2d(const ComplexPlane<double>&);
template Tensor<float> fftshift(const Tensor<float>&);
template Tensor<double> fftshift(const Tensor<double>&);

}  // namespace esf
