#pragma once

#include <cstddef>
#include <vector>

#include "esf/autodiff.hpp"
#include "esf/tensor.hpp"

namespace esf {

/// One level of the orthonormal 2D Haar transform. For each 2x2 block
/// [[a, b], [c, d]]:
///   ll = (a + b + c + d) / 2   approximation
///   hl = (a - b + c - d) / 2   column difference (vertical edges)
///   lh = (a + b - c - d) / 2   row difference (horizontal edges)
///   hh = (a - b - c + d) / 2   diagonal
template <typename T>
struct SubBands {
  Tensor<T> ll, lh, hl, hh;
};

/// x: [C,H,W] or [N,C,H,W] with even H and W. Bands keep the leading axes.
template <typename T>
SubBands<T> dwt2(const Tensor<T>& x);

template <typename T>
Tensor<T> idwt2(const SubBands<T>& bands);

/// Packed layout used inside the network: [N,C,H,W] -> [N,4C,H/2,W/2] with
/// band-major channel blocks in the order ll, lh, hl, hh.
template <typename T>
Tensor<T> dwt2_packed(const Tensor<T>& x);

template <typename T>
Tensor<T> idwt2_packed(const Tensor<T>& packed);

/// Differentiable versions of the packed transforms. The transform matrix is
/// orthogonal, so each one's adjoint is the other.
template <typename T>
Var<T> dwt2(const Var<T>& x);

template <typename T>
Var<T> idwt2(const Var<T>& packed);

/// Depthwise kernels of a wavelet convolution on C channels.
///   base:   [C,1,3,3] spatial kernel applied to the input directly
///   bias:   [C] added after the base kernel
///   levels: one [4C,1,3,3] kernel per decomposition level, applied to the
///           packed sub-bands of that level
template <typename T>
struct WtConvWeights {
  Var<T> base;
  Var<T> bias;
  std::vector<Var<T>> levels;
};

/// y = base(x) + reconstruction, where the input is decomposed recursively
/// (each level transforms the previous level's ll), every level's four bands
/// are filtered by their depthwise kernels, and the filtered bands are
/// recombined from the deepest level upward, adding each reconstruction into
/// the next-shallower filtered ll band. x: [N,C,H,W].
template <typename T>
Var<T> wtconv(const Var<T>& x, const WtConvWeights<T>& weights);

/// Plain-tensor convenience wrapper for wtconv on [C,H,W] or [N,C,H,W].
template <typename T>
Tensor<T> wtconv(const Tensor<T>& x, const Tensor<T>& base, const Tensor<T>& bias,
                 const std::vector<Tensor<T>>& level_kernels);

}  // namespace esf
