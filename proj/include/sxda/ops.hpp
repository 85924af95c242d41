#pragma once

// Differentiable primitives. Every function records one node on the tape
// owning its inputs; all inputs of one call must share a tape.
//
// Spatial tensors are channels-last: H x W x C.

#include <cstdint>
#include <vector>

#include "sxda/tape.hpp"

namespace sxda {

enum class PadMode { zero, reflect };

/// Maps a possibly out-of-range coordinate back into [0, n) by mirroring
/// about the outer pixel edge (-1 -> 0, -2 -> 1, n -> n-1). This is the
/// boundary rule behind every "reflect" in the library.
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  const std::int64_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

namespace ops {

/// [m x k] * [k x n] -> [m x n].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

/// Token-wise projection: [..., k] * [k x n] -> [..., n].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w);

/// Softmax over the last axis with max subtraction.
template <typename T>
Var<T> softmax_rows(Var<T> a);

/// "Same" convolution with kernel k x k x Cin x Cout (k odd). Output extents
/// are floor((H + 2*(k/2) - k)/stride) + 1.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::size_t stride = 1, PadMode pad = PadMode::reflect);

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t stride = 1,
              PadMode pad = PadMode::reflect);

/// Normalizes over the last axis, then applies gamma/beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

/// Exact x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> x);
template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> abs(Var<T> x);

template <typename T>
Var<T> reshape(Var<T> x, Shape dims);
template <typename T>
Var<T> permute_axes(Var<T> x, const std::vector<std::size_t>& perm);
/// Concatenates along the last axis; leading extents must agree.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);

/// x[..., C] + b[C].
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b);
/// x[..., C] * s[C] (s may also be 1 x C).
template <typename T>
Var<T> scale_channels(Var<T> x, Var<T> s);

template <typename T>
Var<T> pad_reflect(Var<T> x, std::size_t pad);
/// H x W x C -> 2H x 2W x C.
template <typename T>
Var<T> upsample_nearest(Var<T> x);

/// Treats x as rows of its last axis and picks rows by index:
/// out[r] = x[rows[r]]. Output shape is out_leading + [C]. Repeated indices
/// accumulate in backward.
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::uint32_t> rows, Shape out_leading);

/// out[p, c] = sum_n weights[p, n] * maps[n][p, c].
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& maps, Var<T> weights);

/// Mean over every axis but the last: [..., C] -> [1 x C].
template <typename T>
Var<T> global_avg_pool(Var<T> x);

template <typename T>
Var<T> sum_all(Var<T> x);
template <typename T>
Var<T> mean_all(Var<T> x);

/// Blocked scaled dot-product attention. q is [tq x nBlocks x C], k and v
/// are [tk x nBlocks x C]; token t of block j is row t*nBlocks + j. Channels
/// split into `heads` contiguous groups of C/heads. Per block and head:
/// softmax(Q K^T / sqrt(C/heads)) V. Output has q's shape.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads);

/// Attention probabilities of the kernel above, [nBlocks x heads x tq x tk].
/// Not recorded.
template <typename T>
Tensor<T> attention_probabilities(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads);

}  // namespace ops
}  // namespace sxda
