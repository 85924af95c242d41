#pragma once

// Blocked self/cross attention over H x W x C feature maps.
//
// Blocked layout: (b*b) x nBlocks x C where token t = u*b + v is the
// row-major position inside the block and block j = r*(W/b) + c is the
// row-major grid cell. Row t*nBlocks + j of the flattened tensor holds
// the C channels of that token.

#include <cstdint>
#include <vector>

#include "sxda/ops.hpp"

namespace sxda {

enum class BlockKind { standard, dilated };

template <typename T>
struct BlockedFeatures {
  Var<T> data;
  std::size_t block = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  BlockKind kind = BlockKind::standard;
  std::size_t dilation = 1;

  std::size_t tokens() const { return block * block; }
  std::size_t blocks() const { return (height / block) * (width / block); }
  std::size_t channels() const { return data.dim(2); }
};

struct PixelCoord {
  std::int64_t y = 0;
  std::int64_t x = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

/// Source pixel (row-major y*W + x) for every blocked row.
std::vector<std::uint32_t> block_rows(std::size_t height, std::size_t width, std::size_t b);

/// Blocked row for every pixel; inverse permutation of block_rows.
std::vector<std::uint32_t> unblock_rows(std::size_t height, std::size_t width, std::size_t b);

/// Sample coordinates of every dilated-block row before boundary reflection.
/// Block j's window is (d*b) x (d*b) with its top-left corner shifted up and
/// left by (d-1)*b/2 from the standard block's corner; samples are taken at
/// stride d starting at the window corner.
std::vector<PixelCoord> dilated_block_coords(std::size_t height, std::size_t width, std::size_t b,
                                             std::size_t d);

/// dilated_block_coords after reflection, as row-major pixel indices.
std::vector<std::uint32_t> dilated_block_rows(std::size_t height, std::size_t width, std::size_t b,
                                              std::size_t d);

template <typename T>
BlockedFeatures<T> block(Var<T> f, std::size_t b);

/// Inverse of block(). Dilated blockings are rejected.
template <typename T>
Var<T> unblock(const BlockedFeatures<T>& bf);

template <typename T>
BlockedFeatures<T> dilated_block(Var<T> f, std::size_t b, std::size_t d);

/// Projections of one attention site. Each of query/key/value is C x C and
/// holds the per-head C x C/heads matrices side by side (head h owns columns
/// [h*C/heads, (h+1)*C/heads)). The output projection mixes the concatenated
/// heads back to C channels.
template <typename T>
struct AttentionParams {
  Var<T> query;
  Var<T> key;
  Var<T> value;
  Var<T> output;
  std::size_t heads = 1;
};

template <typename T>
BlockedFeatures<T> mhsa(const BlockedFeatures<T>& bf, const AttentionParams<T>& p);

/// Queries from bf_q, keys and values from bf_kv (standard or dilated).
template <typename T>
BlockedFeatures<T> cross_attention(const BlockedFeatures<T>& bf_q, const BlockedFeatures<T>& bf_kv,
                                   const AttentionParams<T>& p);

template <typename T>
Var<T> dilated_cross_attention(Var<T> f_q, Var<T> f_nb, std::size_t b, std::size_t d,
                               const AttentionParams<T>& p);

/// Attention probabilities [nBlocks x heads x tq x tk] for inspection.
template <typename T>
Tensor<T> attention_weights(const BlockedFeatures<T>& bf_q, const BlockedFeatures<T>& bf_kv,
                            const AttentionParams<T>& p);

/// One 3x3 conv (C -> 1 logit, with bias) per fused map.
template <typename T>
struct FusionParams {
  std::vector<Var<T>> kernels;
  std::vector<Var<T>> biases;
};

/// Per-location convex weights H x W x N.
template <typename T>
Var<T> fusion_weights(const std::vector<Var<T>>& maps, const FusionParams<T>& fp);

/// sum_n w_n(x, y) * A_n(x, y, c); one weight per location shared by all channels.
template <typename T>
Var<T> fuse(const std::vector<Var<T>>& maps, const FusionParams<T>& fp);

/// Residual channel attention block.
template <typename T>
struct RcabParams {
  Var<T> conv1_w, conv1_b;
  Var<T> conv2_w, conv2_b;
  Var<T> reduce_w, reduce_b;  // C x C/r, C/r
  Var<T> expand_w, expand_b;  // C/r x C, C
};

template <typename T>
Var<T> rcab(Var<T> f, const RcabParams<T>& p);

}  // namespace sxda
