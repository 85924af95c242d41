#pragma once

// Multi-scale encoder / bottleneck / decoder built from the attention ops.
//
// Stage i (0-based) runs at 1/2^i of the input resolution with
// base_channels * 2^i channels. Stages 0..M-2 are encoders, stage M-1 is the
// bottleneck, and decoder i mirrors encoder i.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sxda/attention.hpp"

namespace sxda {

enum class Variant { base, no_dilation, full };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

struct ModelConfig {
  std::size_t stages = 3;
  std::size_t base_channels = 16;
  std::size_t block = 8;
  std::size_t dilation = 2;
  std::vector<std::size_t> heads = {2, 2, 2};  // one entry per stage
  Variant variant = Variant::full;
  std::size_t image_channels = 3;

  std::size_t channels(std::size_t stage) const { return base_channels << stage; }
  /// Frame extents must be multiples of this.
  std::size_t divisor() const { return block << (stages - 1); }
  /// Maps fused for the current frame (0 for the base variant).
  std::size_t current_maps() const;

  void validate() const;
  void check_extents(std::size_t height, std::size_t width) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Init { zeros, ones, conv, xavier, scaled_conv };

struct ParamSpec {
  std::string name;
  Shape dims;
  Init init = Init::zeros;
};

struct ConvSlot {
  std::size_t w = 0, b = 0;
};
struct AttnSlot {
  std::size_t q = 0, k = 0, v = 0, o = 0;
  std::size_t heads = 1;
};
struct FusionSlot {
  std::vector<ConvSlot> kernels;
};
struct RcabSlot {
  ConvSlot conv1, conv2;
  std::size_t reduce_w = 0, reduce_b = 0, expand_w = 0, expand_b = 0;
};
struct EncoderSlot {
  ConvSlot conv_in, conv_mid;
  std::size_t ln_gamma = 0, ln_beta = 0;
  AttnSlot attn;
  FusionSlot fuse_current;   // empty for the base variant
  FusionSlot fuse_neighbor;  // shared by the past and future streams
  RcabSlot rcab;
  std::optional<ConvSlot> down;  // absent in the bottleneck
};
struct DecoderSlot {
  ConvSlot up, merge, conv_in, conv_mid;
  std::size_t ln_gamma = 0, ln_beta = 0;
  AttnSlot attn;
  RcabSlot rcab;
};

/// Names, shapes and structural positions of every learnable tensor. A pure
/// function of the configuration.
struct ModelLayout {
  std::vector<ParamSpec> specs;
  std::vector<EncoderSlot> encoders;
  EncoderSlot bottleneck;
  std::vector<DecoderSlot> decoders;
  ConvSlot out;

  static ModelLayout build(const ModelConfig& cfg);
  std::size_t parameter_count() const;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  ModelLayout layout;
  std::vector<Tensor<T>> tensors;  // parallel to layout.specs

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  /// Zero-filled tensors with the layout's shapes.
  static ModelParams zeros(const ModelConfig& cfg);

  std::size_t parameter_count() const;
  const std::string& name(std::size_t i) const { return layout.specs[i].name; }
  std::optional<std::size_t> find(std::string_view name) const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out{config, layout, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  bool all_finite() const;
};

/// Parameters recorded as leaves of one tape.
template <typename T>
struct BoundModel {
  const ModelConfig* config = nullptr;
  const ModelLayout* layout = nullptr;
  std::vector<Var<T>> vars;

  Var<T> operator[](std::size_t i) const { return vars[i]; }
  AttentionParams<T> attention(const AttnSlot& s) const;
  FusionParams<T> fusion(const FusionSlot& s) const;
  RcabParams<T> rcab(const RcabSlot& s) const;
};

template <typename T>
BoundModel<T> bind(Tape<T>& tape, const ModelParams<T>& params, bool requires_grad = true);

template <typename T>
struct Triplet {
  Var<T> prev, cur, next;
};

template <typename T>
struct StageOutput {
  Triplet<T> features;  // fused and RCAB-refined, before downsampling
  Triplet<T> next;      // downsampled input for the next stage
};

/// One encoder stage over three frame streams with shared weights. The
/// base variant only processes the current stream; its prev/next outputs
/// alias the current one.
template <typename T>
StageOutput<T> encoder_stage(const BoundModel<T>& m, const EncoderSlot& slot, std::size_t stage,
                             const Triplet<T>& in);

template <typename T>
Triplet<T> bottleneck_stage(const BoundModel<T>& m, const Triplet<T>& in);

/// Upsample, merge with the skip features, then blocked self-attention.
template <typename T>
Var<T> decoder_stage(const BoundModel<T>& m, const DecoderSlot& slot, std::size_t stage, Var<T> f,
                     Var<T> skip);

enum class Mode { train, inference };

/// Enhances the current frame of a triplet of H x W x 3 frames. Inference
/// mode clamps the result to [0, 1] (the clamp is not differentiable).
template <typename T>
Var<T> forward(const BoundModel<T>& m, const Triplet<T>& frames, Mode mode = Mode::train);

/// Single-frame model (no cross streams).
template <typename T>
Var<T> forward_base(const BoundModel<T>& m, Var<T> frame, Mode mode = Mode::train);

/// Inference on plain tensors.
template <typename T>
Tensor<T> enhance(const ModelParams<T>& params, const Tensor<T>& prev, const Tensor<T>& cur,
                  const Tensor<T>& next);

// Checkpoint file: little-endian.
//   "SXDA" | u32 version | config block | u32 record count |
//   records { u32 name length | name bytes | u32 rank | u64 dims[rank] | f32 values }
// Config block: u32 stages, base_channels, block, dilation, variant,
// image_channels, head count, heads[head count].
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path);
ModelParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace sxda
