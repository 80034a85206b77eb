#include "esf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>

#include "esf/fft.hpp"

namespace esf::ops {
namespace {

using Index = std::ptrdiff_t;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + to_string(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape " + to_string(a) +
                         " vs " + to_string(b));
  }
}

struct ConvGeometry {
  std::size_t n, c_in, h, w;
  std::size_t c_out, kh, kw;
  std::size_t stride, pad_h, pad_w, groups;
  std::size_t h_out, w_out;

  std::size_t cin_per_group() const { return c_in / groups; }
  std::size_t cout_per_group() const { return c_out / groups; }
  std::size_t patch() const { return cin_per_group() * kh * kw; }
  std::size_t out_plane() const { return h_out * w_out; }
};

// Gathers the receptive fields of one (sample, group) into a
// [cin_g*kh*kw, h_out*w_out] matrix, zero where the window leaves the input.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, std::size_t n, std::size_t grp, T* col) {
  const std::size_t cin_g = g.cin_per_group();
  const std::size_t plane = g.out_plane();
  for (std::size_t icl = 0; icl < cin_g; ++icl) {
    const T* xc = x + (n * g.c_in + grp * cin_g + icl) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((icl * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          T* out = row + oy * g.w_out;
          const Index iy = static_cast<Index>(oy * g.stride + ky) - static_cast<Index>(g.pad_h);
          if (iy < 0 || iy >= static_cast<Index>(g.h)) {
            std::fill_n(out, g.w_out, T(0));
            continue;
          }
          const T* xr = xc + iy * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const Index ix = static_cast<Index>(ox * g.stride + kx) - static_cast<Index>(g.pad_w);
            out[ox] = (ix < 0 || ix >= static_cast<Index>(g.w)) ? T(0) : xr[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters a column matrix back onto the input planes.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, std::size_t n, std::size_t grp, T* x) {
  const std::size_t cin_g = g.cin_per_group();
  const std::size_t plane = g.out_plane();
  for (std::size_t icl = 0; icl < cin_g; ++icl) {
    T* xc = x + (n * g.c_in + grp * cin_g + icl) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((icl * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const Index iy = static_cast<Index>(oy * g.stride + ky) - static_cast<Index>(g.pad_h);
          if (iy < 0 || iy >= static_cast<Index>(g.h)) continue;
          const T* in = row + oy * g.w_out;
          T* xr = xc + iy * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const Index ix = static_cast<Index>(ox * g.stride + kx) - static_cast<Index>(g.pad_w);
            if (ix >= 0 && ix < static_cast<Index>(g.w)) xr[ix] += in[ox];
          }
        }
      }
    }
  }
}

// [C,H,W] is laid out exactly like [1,C,H,W]; only the dims differ.
inline Shape nchw_dims(const Shape& s) {
  if (s.size() == 4) return s;
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw DimensionError("conv2d: expected rank 3 or 4 input, got " + to_string(s));
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight,
              const std::optional<std::type_identity_t<Var<T>>>& bias,
              const Conv2dOptions& opt) {
  const bool unbatched = input.value().rank() == 3;
  const Shape xs = nchw_dims(input.shape());
  const T* xd = input.value().data();
  const Tensor<T>& wt = weight.value();
  require_rank(wt.shape(), 4, "conv2d weight");
  if (opt.groups == 0 || opt.stride == 0) {
    throw ContractError("conv2d: groups and stride must be positive");
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], wt.dim(0), wt.dim(2),
                 wt.dim(3), opt.stride, opt.pad_h, opt.pad_w, opt.groups, 0, 0};
  if (g.c_in % g.groups != 0 || g.c_out % g.groups != 0) {
    throw DimensionError("conv2d: channels (in " + std::to_string(g.c_in) +
                         ", out " + std::to_string(g.c_out) +
                         ") not divisible by groups " + std::to_string(g.groups));
  }
  if (wt.dim(1) != g.cin_per_group()) {
    throw DimensionError("conv2d: weight axis 1 is " + std::to_string(wt.dim(1)) +
                         ", expected C_in/groups = " +
                         std::to_string(g.cin_per_group()));
  }
  if (g.h + 2 * g.pad_h < g.kh || g.w + 2 * g.pad_w < g.kw) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  g.h_out = (g.h + 2 * g.pad_h - g.kh) / g.stride + 1;
  g.w_out = (g.w + 2 * g.pad_w - g.kw) / g.stride + 1;
  if (bias) {
    if (bias->value().rank() != 1 || bias->value().dim(0) != g.c_out) {
      throw DimensionError("conv2d: bias shape " + to_string(bias->shape()) +
                           " for " + std::to_string(g.c_out) + " outputs");
    }
  }

  const std::size_t plane = g.out_plane();
  const std::size_t patch = g.patch();
  const std::size_t cout_g = g.cout_per_group();
  Tensor<T> y({g.n, g.c_out, g.h_out, g.w_out});
  {
    std::vector<T> col(patch * plane);
    const T* wd = wt.data();
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        im2col(g, xd, n, grp, col.data());
        for (std::size_t ocl = 0; ocl < cout_g; ++ocl) {
          const std::size_t oc = grp * cout_g + ocl;
          T* yr = y.data() + (n * g.c_out + oc) * plane;
          if (bias) std::fill_n(yr, plane, bias->value()[oc]);
          const T* wr = wd + oc * patch;
          for (std::size_t k = 0; k < patch; ++k) {
            const T wv = wr[k];
            const T* cr = col.data() + k * plane;
            for (std::size_t i = 0; i < plane; ++i) yr[i] += wv * cr[i];
          }
        }
      }
    }
  }
  if (unbatched) y = y.reshaped({g.c_out, g.h_out, g.w_out});

  Tape<T>* tape = input.tape();
  std::vector<Var<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return tape->record(
      "conv2d", std::move(y), inputs,
      [tape, input, weight, bias, g, unbatched](const Tensor<T>& gout) {
        const std::size_t plane = g.out_plane();
        const std::size_t patch = g.patch();
        const std::size_t cout_g = g.cout_per_group();
        const T* wd = weight.value().data();
        const T* gd = gout.data();
        const bool want_x = input.requires_grad();
        const bool want_w = weight.requires_grad();
        Tensor<T> gx = want_x ? Tensor<T>({g.n, g.c_in, g.h, g.w}) : Tensor<T>();
        Tensor<T> gw = want_w ? Tensor<T>(weight.shape()) : Tensor<T>();
        std::vector<T> col(want_w ? patch * plane : 0);
        std::vector<T> gcol(want_x ? patch * plane : 0);
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t grp = 0; grp < g.groups; ++grp) {
            if (want_w) im2col(g, input.value().data(), n, grp, col.data());
            if (want_x) std::fill(gcol.begin(), gcol.end(), T(0));
            for (std::size_t ocl = 0; ocl < cout_g; ++ocl) {
              const std::size_t oc = grp * cout_g + ocl;
              const T* gr = gd + (n * g.c_out + oc) * plane;
              for (std::size_t k = 0; k < patch; ++k) {
                if (want_w) {
                  const T* cr = col.data() + k * plane;
                  T acc = 0;
                  for (std::size_t i = 0; i < plane; ++i) acc += gr[i] * cr[i];
                  gw[oc * patch + k] += acc;
                }
                if (want_x) {
                  const T wv = wd[oc * patch + k];
                  T* cr = gcol.data() + k * plane;
                  for (std::size_t i = 0; i < plane; ++i) cr[i] += wv * gr[i];
                }
              }
            }
            if (want_x) col2im(g, gcol.data(), n, grp, gx.data());
          }
        }
        if (want_x) {
          if (unbatched) gx = gx.reshaped({g.c_in, g.h, g.w});
          tape->accumulate(input, std::move(gx));
        }
        if (want_w) tape->accumulate(weight, std::move(gw));
        if (bias && bias->requires_grad()) {
          Tensor<T> gb({g.c_out});
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t oc = 0; oc < g.c_out; ++oc) {
              const T* p = gd + (n * g.c_out + oc) * plane;
              T acc = 0;
              for (std::size_t i = 0; i < plane; ++i) acc += p[i];
              gb[oc] += acc;
            }
          tape->accumulate(*bias, std::move(gb));
        }
      });
}

template <typename T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormStats<T> stats, Mode mode) {
  const Tensor<T>& x = input.value();
  require_rank(x.shape(), 4, "batch_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Shape cshape{c};
  if (gamma.shape() != cshape || beta.shape() != cshape ||
      stats.running_mean.shape() != cshape || stats.running_var.shape() != cshape) {
    throw DimensionError("batch_norm: per-channel parameters must have shape " +
                         to_string(cshape));
  }
  const std::size_t count = n * plane;
  const T* xd = x.data();
  const T* gd = gamma.value().data();
  const T* bd = beta.value().data();
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  Tensor<T> inv_std({c});

  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (mode == Mode::train) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) s += xd[(i * c + ch) * plane + p];
      const double m = s / double(count);
      double ss = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = xd[(i * c + ch) * plane + p] - m;
          ss += d * d;
        }
      mu = T(m);
      var = T(ss / double(count));
      const T unbiased = count > 1 ? T(ss / double(count - 1)) : var;
      stats.running_mean[ch] =
          stats.momentum * stats.running_mean[ch] + (T(1) - stats.momentum) * mu;
      stats.running_var[ch] =
          stats.momentum * stats.running_var[ch] + (T(1) - stats.momentum) * unbiased;
    } else {
      mu = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    const T inv = T(1) / std::sqrt(var + stats.eps);
    inv_std[ch] = inv;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = (i * c + ch) * plane + p;
        xhat[k] = (xd[k] - mu) * inv;
        y[k] = gd[ch] * xhat[k] + bd[ch];
      }
  }

  Tape<T>* tape = input.tape();
  return tape->record(
      "batch_norm", std::move(y), {input, gamma, beta},
      [tape, input, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
       mode, n, c, plane](const Tensor<T>& gy) {
        const std::size_t count = n * plane;
        const T* gam = gamma.value().data();
        Tensor<T> gg({c}), gb({c});
        Tensor<T> gx(gy.shape());
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t k = (i * c + ch) * plane + p;
              sum_g += gy[k];
              sum_gx += gy[k] * xhat[k];
            }
          gg[ch] = sum_gx;
          gb[ch] = sum_g;
          if (!input.requires_grad()) continue;
          const T scale = gam[ch] * inv_std[ch];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t k = (i * c + ch) * plane + p;
              if (mode == Mode::train) {
                gx[k] = scale * (gy[k] - sum_g / T(count) - xhat[k] * sum_gx / T(count));
              } else {
                gx[k] = scale * gy[k];
              }
            }
        }
        if (input.requires_grad()) tape->accumulate(input, std::move(gx));
        tape->accumulate(gamma, std::move(gg));
        tape->accumulate(beta, std::move(gb));
      });
}

template <typename T>
Var<T> layer_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Tensor<T>& x = input.value();
  if (x.rank() < 2) throw DimensionError("layer_norm: rank must be >= 2");
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.size() / (n * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: affine parameters must have shape [" +
                         std::to_string(c) + "]");
  }
  const T* gd = gamma.value().data();
  const T* bd = beta.value().data();
  Tensor<T> y(x.shape()), xhat(x.shape());
  Tensor<T> inv_std({n * inner});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < inner; ++s) {
      T m = 0;
      for (std::size_t ch = 0; ch < c; ++ch) m += x[(i * c + ch) * inner + s];
      m /= T(c);
      T v = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T d = x[(i * c + ch) * inner + s] - m;
        v += d * d;
      }
      v /= T(c);
      const T inv = T(1) / std::sqrt(v + eps);
      inv_std[i * inner + s] = inv;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t k = (i * c + ch) * inner + s;
        xhat[k] = (x[k] - m) * inv;
        y[k] = gd[ch] * xhat[k] + bd[ch];
      }
    }
  Tape<T>* tape = input.tape();
  return tape->record(
      "layer_norm", std::move(y), {input, gamma, beta},
      [tape, input, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c,
       inner](const Tensor<T>& gy) {
        const T* gam = gamma.value().data();
        Tensor<T> gg({c}), gb({c}), gx(gy.shape());
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t s = 0; s < inner; ++s) {
            T sum_d = 0, sum_dx = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t k = (i * c + ch) * inner + s;
              gg[ch] += gy[k] * xhat[k];
              gb[ch] += gy[k];
              const T d = gy[k] * gam[ch];
              sum_d += d;
              sum_dx += d * xhat[k];
            }
            const T inv = inv_std[i * inner + s];
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t k = (i * c + ch) * inner + s;
              const T d = gy[k] * gam[ch];
              gx[k] = inv * (d - sum_d / T(c) - xhat[k] * sum_dx / T(c));
            }
          }
        tape->accumulate(input, std::move(gx));
        tape->accumulate(gamma, std::move(gg));
        tape->accumulate(beta, std::move(gb));
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  const Tensor<T>& v = x.value();
  Tensor<T> y(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] > T(0) ? v[i] : T(0);
  Tape<T>* tape = x.tape();
  return tape->record("relu", std::move(y), {x}, [tape, x](const Tensor<T>& g) {
    const Tensor<T>& v = x.value();
    Tensor<T> gx(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) gx[i] = v[i] > T(0) ? g[i] : T(0);
    tape->accumulate(x, std::move(gx));
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  const Tensor<T>& v = x.value();
  Tensor<T> y(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    // Split by sign so exp never overflows.
    if (v[i] >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-v[i]));
    } else {
      const T e = std::exp(v[i]);
      y[i] = e / (T(1) + e);
    }
  }
  Tape<T>* tape = x.tape();
  Tensor<T> saved = y;
  return tape->record("sigmoid", std::move(y), {x},
                      [tape, x, s = std::move(saved)](const Tensor<T>& g) {
                        Tensor<T> gx(s.shape());
                        for (std::size_t i = 0; i < s.size(); ++i)
                          gx[i] = g[i] * s[i] * (T(1) - s[i]);
                        tape->accumulate(x, std::move(gx));
                      });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x) {
  const Tensor<T>& v = x.value();
  require_rank(v.shape(), 4, "max_pool2d");
  const std::size_t n = v.dim(0), c = v.dim(1), h = v.dim(2), w = v.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("max_pool2d: spatial size " + std::to_string(h) + "x" +
                         std::to_string(w) + " must be even");
  }
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor<T> y({n, c, ho, wo});
  std::vector<std::uint32_t> arg(y.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* in = v.data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t base = 2 * oy * w + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (std::size_t k = 1; k < 4; ++k)
          if (in[cand[k]] > in[best]) best = cand[k];
        const std::size_t o = p * ho * wo + oy * wo + ox;
        y[o] = in[best];
        arg[o] = static_cast<std::uint32_t>(p * h * w + best);
      }
  }
  Tape<T>* tape = x.tape();
  return tape->record("max_pool2d", std::move(y), {x},
                      [tape, x, arg = std::move(arg)](const Tensor<T>& g) {
                        Tensor<T> gx(x.shape());
                        for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
                        tape->accumulate(x, std::move(gx));
                      });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Tensor<T>& v = x.value();
  require_rank(v.shape(), 4, "global_avg_pool");
  const std::size_t n = v.dim(0), c = v.dim(1), plane = v.dim(2) * v.dim(3);
  Tensor<T> y({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += v[p * plane + i];
    y[p] = acc / T(plane);
  }
  Tape<T>* tape = x.tape();
  return tape->record("global_avg_pool", std::move(y), {x},
                      [tape, x, n, c, plane](const Tensor<T>& g) {
                        Tensor<T> gx(x.shape());
                        for (std::size_t p = 0; p < n * c; ++p) {
                          const T share = g[p] / T(plane);
                          std::fill_n(gx.data() + p * plane, plane, share);
                        }
                        tape->accumulate(x, std::move(gx));
                      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<std::type_identity_t<Var<T>>>& bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  require_rank(xv.shape(), 2, "linear input");
  require_rank(wv.shape(), 2, "linear weight");
  const std::size_t n = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  if (wv.dim(1) != in) {
    throw DimensionError("linear: input features " + std::to_string(in) +
                         " vs weight " + to_string(wv.shape()));
  }
  if (bias && bias->shape() != Shape{out}) {
    throw DimensionError("linear: bias shape " + to_string(bias->shape()));
  }
  Tensor<T> y({n, out});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      T acc = bias ? bias->value()[o] : T(0);
      for (std::size_t k = 0; k < in; ++k) acc += wv[o * in + k] * xv[i * in + k];
      y[i * out + o] = acc;
    }
  Tape<T>* tape = x.tape();
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return tape->record("linear", std::move(y), inputs,
                      [tape, x, weight, bias, n, in, out](const Tensor<T>& g) {
                        const Tensor<T>& xv = x.value();
                        const Tensor<T>& wv = weight.value();
                        Tensor<T> gx(xv.shape()), gw(wv.shape()), gb({out});
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t o = 0; o < out; ++o) {
                            const T go = g[i * out + o];
                            gb[o] += go;
                            for (std::size_t k = 0; k < in; ++k) {
                              gx[i * in + k] += go * wv[o * in + k];
                              gw[o * in + k] += go * xv[i * in + k];
                            }
                          }
                        tape->accumulate(x, std::move(gx));
                        tape->accumulate(weight, std::move(gw));
                        if (bias) tape->accumulate(*bias, std::move(gb));
                      });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  Tape<T>* tape = a.tape();
  return tape->record("add", std::move(y), {a, b}, [tape, a, b](const Tensor<T>& g) {
    tape->accumulate(a, g);
    tape->accumulate(b, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  Tape<T>* tape = a.tape();
  return tape->record("sub", std::move(y), {a, b}, [tape, a, b](const Tensor<T>& g) {
    tape->accumulate(a, g);
    if (b.requires_grad()) {
      Tensor<T> neg(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
      tape->accumulate(b, std::move(neg));
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  Tape<T>* tape = a.tape();
  return tape->record("mul", std::move(y), {a, b}, [tape, a, b](const Tensor<T>& g) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Tensor<T> ga(g.shape()), gb(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * bv[i];
      gb[i] = g[i] * av[i];
    }
    tape->accumulate(a, std::move(ga));
    tape->accumulate(b, std::move(gb));
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> y = x.value();
  for (auto& v : y.values()) v *= factor;
  Tape<T>* tape = x.tape();
  return tape->record("scale", std::move(y), {x}, [tape, x, factor](const Tensor<T>& g) {
    Tensor<T> gx = g;
    for (auto& v : gx.values()) v *= factor;
    tape->accumulate(x, std::move(gx));
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  const Shape& first = parts.front().shape();
  require_rank(first, 4, "concat_channels");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require_rank(s, 4, "concat_channels");
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw DimensionError("concat_channels: " + to_string(s) + " vs " + to_string(first));
    }
    total += s[1];
  }
  const std::size_t n = first[0], plane = first[2] * first[3];
  Tensor<T> y({n, total, first[2], first[3]});
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    offsets.push_back(offset);
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(p.value().data() + i * c * plane, c * plane,
                  y.data() + (i * total + offset) * plane);
    offset += c;
  }
  Tape<T>* tape = parts.front().tape();
  return tape->record("concat_channels", std::move(y), parts,
                      [tape, parts, offsets, n, total, plane](const Tensor<T>& g) {
                        for (std::size_t k = 0; k < parts.size(); ++k) {
                          if (!parts[k].requires_grad()) continue;
                          const std::size_t c = parts[k].dim(1);
                          Tensor<T> gp(parts[k].shape());
                          for (std::size_t i = 0; i < n; ++i)
                            std::copy_n(g.data() + (i * total + offsets[k]) * plane, c * plane,
                                        gp.data() + i * c * plane);
                          tape->accumulate(parts[k], std::move(gp));
                        }
                      });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  require_rank(s, 4, "slice_channels");
  if (begin + count > s[1] || count == 0) {
    throw DimensionError("slice_channels: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " +
                         std::to_string(s[1]) + " channels");
  }
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor<T> y({n, count, s[2], s[3]});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.value().data() + (i * c + begin) * plane, count * plane,
                y.data() + i * count * plane);
  Tape<T>* tape = x.tape();
  return tape->record("slice_channels", std::move(y), {x},
                      [tape, x, begin, count, n, c, plane](const Tensor<T>& g) {
                        Tensor<T> gx(x.shape());
                        for (std::size_t i = 0; i < n; ++i)
                          std::copy_n(g.data() + i * count * plane, count * plane,
                                      gx.data() + (i * c + begin) * plane);
                        tape->accumulate(x, std::move(gx));
                      });
}

template <typename T>
Var<T> kernel_sum(const Var<T>& weight) {
  const Shape& s = weight.shape();
  require_rank(s, 4, "kernel_sum");
  const std::size_t taps = s[2] * s[3];
  Tensor<T> y({s[0], s[1], 1, 1});
  for (std::size_t k = 0; k < s[0] * s[1]; ++k) {
    T acc = 0;
    for (std::size_t t = 0; t < taps; ++t) acc += weight.value()[k * taps + t];
    y[k] = acc;
  }
  Tape<T>* tape = weight.tape();
  return tape->record("kernel_sum", std::move(y), {weight},
                      [tape, weight, taps](const Tensor<T>& g) {
                        Tensor<T> gw(weight.shape());
                        for (std::size_t k = 0; k < g.size(); ++k)
                          std::fill_n(gw.data() + k * taps, taps, g[k]);
                        tape->accumulate(weight, std::move(gw));
                      });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  Tape<T>* tape = x.tape();
  return tape->record("sum", Tensor<T>({1}, acc), {x}, [tape, x](const Tensor<T>& g) {
    tape->accumulate(x, Tensor<T>(x.shape(), g[0]));
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / T(x.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (numel(shape) != x.value().size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor<T> y = x.value().reshaped(std::move(shape));
  Tape<T>* tape = x.tape();
  return tape->record("reshape", std::move(y), {x}, [tape, x](const Tensor<T>& g) {
    tape->accumulate(x, g.reshaped(x.shape()));
  });
}

namespace {

// Applies an unnormalized 2D transform to each (re, im) channel pair of the
// stacked layout and writes the stacked result.
template <typename T>
Tensor<T> stacked_transform(const Tensor<T>& re_im, bool inverse, bool allow_any) {
  const std::size_t n = re_im.dim(0), c2 = re_im.dim(1), h = re_im.dim(2), w = re_im.dim(3);
  const std::size_t c = c2 / 2, plane = h * w;
  Tensor<T> out(re_im.shape());
  std::vector<std::complex<T>> buf(plane);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* re = re_im.data() + (i * c2 + ch) * plane;
      const T* im = re_im.data() + (i * c2 + c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) buf[p] = {re[p], im[p]};
      fft::transform_plane<T>(buf, h, w, inverse, allow_any);
      T* ore = out.data() + (i * c2 + ch) * plane;
      T* oim = out.data() + (i * c2 + c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        ore[p] = buf[p].real();
        oim[p] = buf[p].imag();
      }
    }
  return out;
}

template <typename T>
Tensor<T> stack_real(const Tensor<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, 2 * c, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.data() + i * c * plane, c * plane, out.data() + i * 2 * c * plane);
  return out;
}

template <typename T>
Tensor<T> real_half(const Tensor<T>& stacked) {
  const std::size_t n = stacked.dim(0), c = stacked.dim(1) / 2, plane = stacked.dim(2) * stacked.dim(3);
  Tensor<T> out({n, c, stacked.dim(2), stacked.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(stacked.data() + i * 2 * c * plane, c * plane, out.data() + i * c * plane);
  return out;
}

}  // namespace

template <typename T>
Var<T> fft2d_stacked(const Var<T>& x, bool allow_any_size) {
  require_rank(x.shape(), 4, "fft2d_stacked");
  Tensor<T> y = stacked_transform(stack_real(x.value()), false, allow_any_size);
  Tape<T>* tape = x.tape();
  return tape->record("fft2d", std::move(y), {x},
                      [tape, x, allow_any_size](const Tensor<T>& g) {
                        // d/dx of (Re X, Im X) contracted with (gRe, gIm) is
                        // Re of the unnormalized inverse transform of gRe + i gIm.
                        tape->accumulate(x, real_half(stacked_transform(g, true, allow_any_size)));
                      });
}

template <typename T>
Var<T> ifft2d_stacked_real(const Var<T>& stacked, bool allow_any_size) {
  require_rank(stacked.shape(), 4, "ifft2d_stacked_real");
  if (stacked.dim(1) % 2 != 0) {
    throw DimensionError("ifft2d_stacked_real: channel count must be even");
  }
  const T norm = T(1) / T(stacked.dim(2) * stacked.dim(3));
  Tensor<T> full = stacked_transform(stacked.value(), true, allow_any_size);
  Tensor<T> y = real_half(full);
  for (auto& v : y.values()) v *= norm;
  Tape<T>* tape = stacked.tape();
  return tape->record("ifft2d", std::move(y), {stacked},
                      [tape, stacked, allow_any_size, norm](const Tensor<T>& g) {
                        // Adjoint of Re(ifft): forward transform of g, scaled.
                        Tensor<T> gs = stacked_transform(stack_real(g), false, allow_any_size);
                        for (auto& v : gs.values()) v *= norm;
                        tape->accumulate(stacked, std::move(gs));
                      });
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, std::span<const T> labels) {
  const Tensor<T>& z = logits.value();
  if (z.size() != labels.size() || labels.empty()) {
    throw DimensionError("bce_with_logits: " + std::to_string(z.size()) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
  }
  for (T y : labels) {
    if (y != T(0) && y != T(1)) throw ContractError("bce_with_logits: label outside {0,1}");
  }
  const std::size_t n = z.size();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T v = z[i];
    loss += std::max(v, T(0)) - v * labels[i] + std::log1p(std::exp(-std::abs(v)));
  }
  loss /= T(n);
  std::vector<T> y(labels.begin(), labels.end());
  Tape<T>* tape = logits.tape();
  return tape->record("bce_with_logits", Tensor<T>({1}, loss), {logits},
                      [tape, logits, y = std::move(y)](const Tensor<T>& g) {
                        const Tensor<T>& z = logits.value();
                        Tensor<T> gz(z.shape());
                        const T n = T(z.size());
                        for (std::size_t i = 0; i < z.size(); ++i) {
                          const T s = z[i] >= T(0) ? T(1) / (T(1) + std::exp(-z[i]))
                                                   : std::exp(z[i]) / (T(1) + std::exp(z[i]));
                          gz[i] = g[0] * (s - y[i]) / n;
                        }
                        tape->accumulate(logits, std::move(gz));
                      });
}

#define ESF_INSTANTIATE_OPS(T)                                                          \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&,    \
                         const Conv2dOptions&);                                         \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&,               \
                             BatchNormStats<T>, Mode);                                  \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);           \
  template Var<T> relu(const Var<T>&);                                                  \
  template Var<T> sigmoid(const Var<T>&);                                               \
  template Var<T> max_pool2d(const Var<T>&);                                            \
  template Var<T> global_avg_pool(const Var<T>&);                                       \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                    \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                    \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale(const Var<T>&, T);                                              \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                          \
  template Var<T> slice_channels(const Var<T>&, std::size_t, std::size_t);              \
  template Var<T> kernel_sum(const Var<T>&);                                            \
  template Var<T> sum(const Var<T>&);                                                   \
  template Var<T> mean(const Var<T>&);                                                  \
  template Var<T> reshape(const Var<T>&, Shape);                                        \
  template Var<T> fft2d_stacked(const Var<T>&, bool);                                   \
  template Var<T> ifft2d_stacked_real(const Var<T>&, bool);                             \
  template Var<T> bce_with_logits(const Var<T>&, std::span<const T>);

ESF_INSTANTIATE_OPS(float)
ESF_INSTANTIATE_OPS(double)

}  // namespace esf::ops
