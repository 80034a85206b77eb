#include "esf/wavelet.hpp"

#include <string>

#include "esf/ops.hpp"

namespace esf {
namespace {

struct Dims {
  std::size_t n, c, h, w;
};

Dims spatial_dims(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw DimensionError(std::string(op) + ": expected rank 3 or 4, got " + to_string(s));
}

// Band index order inside the packed layout.
enum Band : std::size_t { kLL = 0, kLH = 1, kHL = 2, kHH = 3 };

template <typename T>
void forward_block(const T* src, std::size_t w, std::size_t h2, std::size_t w2,
                   T* ll, T* lh, T* hl, T* hh) {
  for (std::size_t y = 0; y < h2; ++y)
    for (std::size_t x = 0; x < w2; ++x) {
      const T a = src[(2 * y) * w + 2 * x];
      const T b = src[(2 * y) * w + 2 * x + 1];
      const T c = src[(2 * y + 1) * w + 2 * x];
      const T d = src[(2 * y + 1) * w + 2 * x + 1];
      const std::size_t o = y * w2 + x;
      ll[o] = (a + b + c + d) / T(2);
      hl[o] = (a - b + c - d) / T(2);
      lh[o] = (a + b - c - d) / T(2);
      hh[o] = (a - b - c + d) / T(2);
    }
}

template <typename T>
void inverse_block(const T* ll, const T* lh, const T* hl, const T* hh,
                   std::size_t h2, std::size_t w2, T* dst) {
  const std::size_t w = 2 * w2;
  for (std::size_t y = 0; y < h2; ++y)
    for (std::size_t x = 0; x < w2; ++x) {
      const std::size_t i = y * w2 + x;
      dst[(2 * y) * w + 2 * x] = (ll[i] + hl[i] + lh[i] + hh[i]) / T(2);
      dst[(2 * y) * w + 2 * x + 1] = (ll[i] - hl[i] + lh[i] - hh[i]) / T(2);
      dst[(2 * y + 1) * w + 2 * x] = (ll[i] + hl[i] - lh[i] - hh[i]) / T(2);
      dst[(2 * y + 1) * w + 2 * x + 1] = (ll[i] - hl[i] - lh[i] + hh[i]) / T(2);
    }
}

void require_even(const Dims& d, const char* op) {
  if (d.h % 2 != 0 || d.w % 2 != 0) {
    throw DimensionError(std::string(op) + ": spatial size " + std::to_string(d.h) + "x" +
                         std::to_string(d.w) + " must be even");
  }
}

}  // namespace

template <typename T>
Tensor<T> dwt2_packed(const Tensor<T>& x) {
  const Dims d = spatial_dims(x.shape(), "dwt2");
  require_even(d, "dwt2");
  const std::size_t h2 = d.h / 2, w2 = d.w / 2, plane = h2 * w2;
  Tensor<T> out({d.n, 4 * d.c, h2, w2});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      auto band = [&](std::size_t b) { return out.data() + ((n * 4 + b) * d.c + c) * plane; };
      forward_block(x.data() + (n * d.c + c) * d.h * d.w, d.w, h2, w2, band(kLL), band(kLH),
                    band(kHL), band(kHH));
    }
  return out;
}

template <typename T>
Tensor<T> idwt2_packed(const Tensor<T>& packed) {
  if (packed.rank() != 4 || packed.dim(1) % 4 != 0) {
    throw DimensionError("idwt2: expected [N,4C,h,w], got " + to_string(packed.shape()));
  }
  const std::size_t n_ = packed.dim(0), c_ = packed.dim(1) / 4, h2 = packed.dim(2),
                    w2 = packed.dim(3), plane = h2 * w2;
  Tensor<T> out({n_, c_, 2 * h2, 2 * w2});
  for (std::size_t n = 0; n < n_; ++n)
    for (std::size_t c = 0; c < c_; ++c) {
      auto band = [&](std::size_t b) { return packed.data() + ((n * 4 + b) * c_ + c) * plane; };
      inverse_block(band(kLL), band(kLH), band(kHL), band(kHH), h2, w2,
                    out.data() + (n * c_ + c) * 4 * plane);
    }
  return out;
}

template <typename T>
SubBands<T> dwt2(const Tensor<T>& x) {
  const Dims d = spatial_dims(x.shape(), "dwt2");
  require_even(d, "dwt2");
  const Tensor<T> packed = dwt2_packed(x);
  Shape band_shape = x.shape();
  band_shape[band_shape.size() - 2] = d.h / 2;
  band_shape[band_shape.size() - 1] = d.w / 2;
  const std::size_t block = d.c * (d.h / 2) * (d.w / 2);
  auto extract = [&](std::size_t b) {
    Tensor<T> t(band_shape);
    for (std::size_t n = 0; n < d.n; ++n)
      std::copy_n(packed.data() + (n * 4 + b) * block, block, t.data() + n * block);
    return t;
  };
  return {extract(kLL), extract(kLH), extract(kHL), extract(kHH)};
}

template <typename T>
Tensor<T> idwt2(const SubBands<T>& bands) {
  const Shape& s = bands.ll.shape();
  if (bands.lh.shape() != s || bands.hl.shape() != s || bands.hh.shape() != s) {
    throw DimensionError("idwt2: sub-band shapes differ (ll " + to_string(s) + ", lh " +
                         to_string(bands.lh.shape()) + ", hl " + to_string(bands.hl.shape()) +
                         ", hh " + to_string(bands.hh.shape()) + ")");
  }
  const Dims d = spatial_dims(s, "idwt2");
  const std::size_t block = d.c * d.h * d.w;
  Tensor<T> packed({d.n, 4 * d.c, d.h, d.w});
  const Tensor<T>* order[4] = {&bands.ll, &bands.lh, &bands.hl, &bands.hh};
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t b = 0; b < 4; ++b)
      std::copy_n(order[b]->data() + n * block, block, packed.data() + (n * 4 + b) * block);
  Tensor<T> out = idwt2_packed(packed);
  if (s.size() == 3) return out.reshaped({d.c, 2 * d.h, 2 * d.w});
  return out;
}

template <typename T>
Var<T> dwt2(const Var<T>& x) {
  if (x.value().rank() != 4) throw DimensionError("dwt2: expected [N,C,H,W]");
  Tape<T>* tape = x.tape();
  return tape->record("dwt2", dwt2_packed(x.value()), {x}, [tape, x](const Tensor<T>& g) {
    tape->accumulate(x, idwt2_packed(g));
  });
}

template <typename T>
Var<T> idwt2(const Var<T>& packed) {
  Tape<T>* tape = packed.tape();
  return tape->record("idwt2", idwt2_packed(packed.value()), {packed},
                      [tape, packed](const Tensor<T>& g) {
                        tape->accumulate(packed, dwt2_packed(g));
                      });
}

template <typename T>
Var<T> wtconv(const Var<T>& x, const WtConvWeights<T>& weights) {
  if (x.value().rank() != 4) throw DimensionError("wtconv: expected [N,C,H,W]");
  const std::size_t c = x.dim(1);
  if (weights.levels.empty()) throw ContractError("wtconv: at least one level required");
  if (weights.base.shape() != Shape{c, 1, 3, 3}) {
    throw DimensionError("wtconv: base kernel must be [C,1,3,3], got " +
                         to_string(weights.base.shape()));
  }
  const auto depthwise = ops::Conv2dOptions::same(3, 3, c);
  const auto band_conv = ops::Conv2dOptions::same(3, 3, 4 * c);

  // Decompose: each level transforms the previous level's (unfiltered) ll.
  std::vector<Var<T>> filtered;
  Var<T> current = x;
  for (const auto& kernel : weights.levels) {
    if (kernel.shape() != Shape{4 * c, 1, 3, 3}) {
      throw DimensionError("wtconv: level kernel must be [4C,1,3,3], got " +
                           to_string(kernel.shape()));
    }
    const Var<T> bands = dwt2(current);
    filtered.push_back(ops::conv2d(bands, kernel, std::nullopt, band_conv));
    current = ops::slice_channels(bands, 0, c);
  }

  // Reconstruct from the deepest level.
  std::optional<Var<T>> carry;
  for (std::size_t i = filtered.size(); i-- > 0;) {
    Var<T> level = filtered[i];
    if (carry) {
      const Var<T> ll = ops::add(ops::slice_channels(level, 0, c), *carry);
      level = ops::concat_channels<T>({ll, ops::slice_channels(level, c, 3 * c)});
    }
    carry = idwt2(level);
  }
  const Var<T> base = ops::conv2d(x, weights.base, std::optional<Var<T>>(weights.bias), depthwise);
  return ops::add(base, *carry);
}

template <typename T>
Tensor<T> wtconv(const Tensor<T>& x, const Tensor<T>& base, const Tensor<T>& bias,
                 const std::vector<Tensor<T>>& level_kernels) {
  const Dims d = spatial_dims(x.shape(), "wtconv");
  Tape<T> tape;
  WtConvWeights<T> w{tape.constant(base), tape.constant(bias), {}};
  for (const auto& k : level_kernels) w.levels.push_back(tape.constant(k));
  const Var<T> in = tape.constant(x.reshaped({d.n, d.c, d.h, d.w}));
  Tensor<T> y = wtconv(in, w).value();
  return y.reshaped(x.shape());
}

#define ESF_INSTANTIATE_WAVELET(T)                                              \
  template SubBands<T> dwt2(const Tensor<T>&);                                  \
  template Tensor<T> idwt2(const SubBands<T>&);                                 \
  template Tensor<T> dwt2_packed(const Tensor<T>&);                             \
  template Tensor<T> idwt2_packed(const Tensor<T>&);                            \
  template Var<T> dwt2(const Var<T>&);                                          \
  template Var<T> idwt2(const Var<T>&);                                         \
  template Var<T> wtconv(const Var<T>&, const WtConvWeights<T>&);               \
  template Tensor<T> wtconv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                            const std::vector<Tensor<T>>&);

ESF_INSTANTIATE_WAVELET(float)
ESF_INSTANTIATE_WAVELET(double)

}  // namespace esf
