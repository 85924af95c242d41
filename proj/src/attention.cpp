#include "sxda/attention.hpp"

namespace sxda {
namespace {

void check_block_size(std::size_t h, std::size_t w, std::size_t b) {
  if (b == 0 || h % b != 0 || w % b != 0)
    throw DimensionError("block size " + std::to_string(b) + " must divide extents " +
                         std::to_string(h) + "x" + std::to_string(w));
}

template <typename T>
void require_map(const char* op, Var<T> f) {
  if (f.rank() != 3)
    throw DimensionError(std::string(op) + ": expected H x W x C feature map, got " +
                         shape_str(f.dims()));
}

template <typename T>
void check_params(const AttentionParams<T>& p, std::size_t c) {
  if (p.heads == 0 || c % p.heads != 0)
    throw ConfigError(std::to_string(p.heads) + " heads do not divide " + std::to_string(c) +
                      " channels");
  for (const Var<T>* w : {&p.query, &p.key, &p.value, &p.output})
    if (w->dims() != Shape{c, c})
      throw DimensionError("attention projection " + shape_str(w->dims()) + " for " +
                           std::to_string(c) + " channels");
}

template <typename T>
BlockedFeatures<T> attend(const BlockedFeatures<T>& bf_q, const BlockedFeatures<T>& bf_kv,
                          const AttentionParams<T>& p) {
  if (bf_q.block != bf_kv.block || bf_q.blocks() != bf_kv.blocks() ||
      bf_q.channels() != bf_kv.channels())
    throw DimensionError("cross_attention: block geometry mismatch " +
                         shape_str(bf_q.data.dims()) + " vs " + shape_str(bf_kv.data.dims()));
  check_params(p, bf_q.channels());
  Var<T> q = ops::linear(bf_q.data, p.query);
  Var<T> k = ops::linear(bf_kv.data, p.key);
  Var<T> v = ops::linear(bf_kv.data, p.value);
  Var<T> o = ops::linear(ops::attention(q, k, v, p.heads), p.output);
  BlockedFeatures<T> out = bf_q;
  out.data = o;
  out.kind = BlockKind::standard;
  out.dilation = 1;
  return out;
}

}  // namespace

std::vector<std::uint32_t> block_rows(std::size_t height, std::size_t width, std::size_t b) {
  check_block_size(height, width, b);
  const std::size_t gw = width / b, nb = (height / b) * gw;
  std::vector<std::uint32_t> rows(height * width);
  for (std::size_t j = 0; j < nb; ++j) {
    const std::size_t r = j / gw, c = j % gw;
    for (std::size_t t = 0; t < b * b; ++t) {
      const std::size_t y = r * b + t / b, x = c * b + t % b;
      rows[t * nb + j] = static_cast<std::uint32_t>(y * width + x);
    }
  }
  return rows;
}

std::vector<std::uint32_t> unblock_rows(std::size_t height, std::size_t width, std::size_t b) {
  const auto fwd = block_rows(height, width, b);
  std::vector<std::uint32_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = static_cast<std::uint32_t>(i);
  return inv;
}

std::vector<PixelCoord> dilated_block_coords(std::size_t height, std::size_t width, std::size_t b,
                                             std::size_t d) {
  check_block_size(height, width, b);
  if (d == 0) throw ConfigError("dilation must be at least 1");
  if (d % 2 == 0 && b % 2 != 0)
    throw ConfigError("even dilation " + std::to_string(d) + " needs an even block size, got " +
                      std::to_string(b));
  const std::size_t gw = width / b, nb = (height / b) * gw;
  const auto shift = static_cast<std::int64_t>((d - 1) * b / 2);
  const auto sd = static_cast<std::int64_t>(d);
  std::vector<PixelCoord> coords(height * width);
  for (std::size_t j = 0; j < nb; ++j) {
    const auto top = static_cast<std::int64_t>((j / gw) * b) - shift;
    const auto left = static_cast<std::int64_t>((j % gw) * b) - shift;
    for (std::size_t t = 0; t < b * b; ++t) {
      const auto u = static_cast<std::int64_t>(t / b), v = static_cast<std::int64_t>(t % b);
      coords[t * nb + j] = PixelCoord{top + sd * u, left + sd * v};
    }
  }
  return coords;
}

std::vector<std::uint32_t> dilated_block_rows(std::size_t height, std::size_t width, std::size_t b,
                                              std::size_t d) {
  const auto coords = dilated_block_coords(height, width, b, d);
  const auto h = static_cast<std::int64_t>(height), w = static_cast<std::int64_t>(width);
  std::vector<std::uint32_t> rows(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i)
    rows[i] = static_cast<std::uint32_t>(reflect_index(coords[i].y, h) * w +
                                         reflect_index(coords[i].x, w));
  return rows;
}

template <typename T>
BlockedFeatures<T> block(Var<T> f, std::size_t b) {
  require_map("block", f);
  const std::size_t h = f.dim(0), w = f.dim(1);
  BlockedFeatures<T> out;
  out.data = ops::gather_rows(f, block_rows(h, w, b), Shape{b * b, (h / b) * (w / b)});
  out.block = b;
  out.height = h;
  out.width = w;
  return out;
}

template <typename T>
Var<T> unblock(const BlockedFeatures<T>& bf) {
  if (bf.kind != BlockKind::standard)
    throw ContractError("unblock: dilated blockings are not invertible");
  return ops::gather_rows(bf.data, unblock_rows(bf.height, bf.width, bf.block),
                          Shape{bf.height, bf.width});
}

template <typename T>
BlockedFeatures<T> dilated_block(Var<T> f, std::size_t b, std::size_t d) {
  require_map("dilated_block", f);
  const std::size_t h = f.dim(0), w = f.dim(1);
  BlockedFeatures<T> out;
  out.data = ops::gather_rows(f, dilated_block_rows(h, w, b, d), Shape{b * b, (h / b) * (w / b)});
  out.block = b;
  out.height = h;
  out.width = w;
  out.kind = d == 1 ? BlockKind::standard : BlockKind::dilated;
  out.dilation = d;
  return out;
}

template <typename T>
BlockedFeatures<T> mhsa(const BlockedFeatures<T>& bf, const AttentionParams<T>& p) {
  if (bf.kind != BlockKind::standard) throw ContractError("mhsa: needs standard blocking");
  return attend(bf, bf, p);
}

template <typename T>
BlockedFeatures<T> cross_attention(const BlockedFeatures<T>& bf_q, const BlockedFeatures<T>& bf_kv,
                                   const AttentionParams<T>& p) {
  if (bf_q.kind != BlockKind::standard)
    throw ContractError("cross_attention: queries need standard blocking");
  return attend(bf_q, bf_kv, p);
}

template <typename T>
Var<T> dilated_cross_attention(Var<T> f_q, Var<T> f_nb, std::size_t b, std::size_t d,
                               const AttentionParams<T>& p) {
  require_map("dilated_cross_attention", f_q);
  if (f_q.dims() != f_nb.dims())
    throw DimensionError("dilated_cross_attention: map shapes differ " + shape_str(f_q.dims()) +
                         " vs " + shape_str(f_nb.dims()));
  return unblock(cross_attention(block(f_q, b), dilated_block(f_nb, b, d), p));
}

template <typename T>
Tensor<T> attention_weights(const BlockedFeatures<T>& bf_q, const BlockedFeatures<T>& bf_kv,
                            const AttentionParams<T>& p) {
  check_params(p, bf_q.channels());
  Var<T> q = ops::linear(bf_q.data, p.query);
  Var<T> k = ops::linear(bf_kv.data, p.key);
  return ops::attention_probabilities(q.value(), k.value(), p.heads);
}

template <typename T>
Var<T> fusion_weights(const std::vector<Var<T>>& maps, const FusionParams<T>& fp) {
  if (maps.empty() || maps.size() != fp.kernels.size() || maps.size() != fp.biases.size())
    throw ConfigError("fuse: " + std::to_string(maps.size()) + " maps for " +
                      std::to_string(fp.kernels.size()) + " fusion kernels");
  std::vector<Var<T>> logits;
  logits.reserve(maps.size());
  for (std::size_t n = 0; n < maps.size(); ++n) {
    if (maps[n].dims() != maps[0].dims())
      throw ConfigError("fuse: map shapes differ " + shape_str(maps[0].dims()) + " vs " +
                        shape_str(maps[n].dims()));
    if (fp.kernels[n].rank() != 4 || fp.kernels[n].dim(3) != 1)
      throw ConfigError("fuse: kernels must produce one logit channel, got " +
                        shape_str(fp.kernels[n].dims()));
    logits.push_back(ops::conv2d(maps[n], fp.kernels[n], fp.biases[n]));
  }
  Var<T> all = logits.size() == 1 ? logits[0] : ops::concat_channels(logits);
  return ops::softmax_rows(all);
}

template <typename T>
Var<T> fuse(const std::vector<Var<T>>& maps, const FusionParams<T>& fp) {
  return ops::weighted_sum(maps, fusion_weights(maps, fp));
}

template <typename T>
Var<T> rcab(Var<T> f, const RcabParams<T>& p) {
  require_map("rcab", f);
  Var<T> r = ops::conv2d(ops::relu(ops::conv2d(f, p.conv1_w, p.conv1_b)), p.conv2_w, p.conv2_b);
  Var<T> pooled = ops::global_avg_pool(r);
  Var<T> squeezed = ops::relu(ops::add_bias(ops::linear(pooled, p.reduce_w), p.reduce_b));
  Var<T> gate = ops::sigmoid(ops::add_bias(ops::linear(squeezed, p.expand_w), p.expand_b));
  return ops::add(f, ops::scale_channels(r, gate));
}

#define SXDA_INSTANTIATE_ATTENTION(T)                                                          \
  template BlockedFeatures<T> block<T>(Var<T>, std::size_t);                                   \
  template Var<T> unblock<T>(const BlockedFeatures<T>&);                                       \
  template BlockedFeatures<T> dilated_block<T>(Var<T>, std::size_t, std::size_t);              \
  template BlockedFeatures<T> mhsa<T>(const BlockedFeatures<T>&, const AttentionParams<T>&);   \
  template BlockedFeatures<T> cross_attention<T>(const BlockedFeatures<T>&,                    \
                                                 const BlockedFeatures<T>&,                    \
                                                 const AttentionParams<T>&);                   \
  template Var<T> dilated_cross_attention<T>(Var<T>, Var<T>, std::size_t, std::size_t,         \
                                             const AttentionParams<T>&);                       \
  template Tensor<T> attention_weights<T>(const BlockedFeatures<T>&, const BlockedFeatures<T>&, \
                                          const AttentionParams<T>&);                          \
  template Var<T> fusion_weights<T>(const std::vector<Var<T>>&, const FusionParams<T>&);       \
  template Var<T> fuse<T>(const std::vector<Var<T>>&, const FusionParams<T>&);                 \
  template Var<T> rcab<T>(Var<T>, const RcabParams<T>&);

SXDA_INSTANTIATE_ATTENTION(float)
SXDA_INSTANTIATE_ATTENTION(double)

}  // namespace sxda
