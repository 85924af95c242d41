#include "sxda/network.hpp"
#include "sxda/random.hpp"

#include <algorithm>
#include <cmath>

namespace sxda {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::base: return "base";
    case Variant::no_dilation: return "no-dilation";
    case Variant::full: return "full";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "base") return Variant::base;
  if (s == "no-dilation" || s == "no_dilation") return Variant::no_dilation;
  if (s == "full") return Variant::full;
  throw ConfigError("unknown model variant '" + std::string(s) +
                    "' (expected base, no-dilation or full)");
}

std::size_t ModelConfig::current_maps() const {
  switch (variant) {
    case Variant::base: return 0;
    case Variant::no_dilation: return 3;
    case Variant::full: return 5;
  }
  return 0;
}

void ModelConfig::validate() const {
  if (stages == 0 || stages > 8) throw ConfigError("stages must be in [1, 8]");
  if (base_channels == 0) throw ConfigError("base channel count must be positive");
  if (block == 0) throw ConfigError("block size must be positive");
  if (dilation == 0) throw ConfigError("dilation must be at least 1");
  if (dilation % 2 == 0 && block % 2 != 0)
    throw ConfigError("even dilation " + std::to_string(dilation) +
                      " needs an even block size, got " + std::to_string(block));
  if (image_channels == 0) throw ConfigError("image channel count must be positive");
  if (heads.size() != stages)
    throw ConfigError("need one head count per stage: " + std::to_string(stages) +
                      " stages, " + std::to_string(heads.size()) + " head counts");
  for (std::size_t i = 0; i < stages; ++i)
    if (heads[i] == 0 || channels(i) % heads[i] != 0)
      throw ConfigError("stage " + std::to_string(i) + ": " + std::to_string(heads[i]) +
                        " heads do not divide " + std::to_string(channels(i)) + " channels");
}

void ModelConfig::check_extents(std::size_t height, std::size_t width) const {
  const std::size_t div = divisor();
  if (height == 0 || width == 0 || height % div != 0 || width % div != 0)
    throw ConfigError("frame extents " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be multiples of " + std::to_string(div) + " (block " +
                      std::to_string(block) + " x 2^" + std::to_string(stages - 1) + ")");
}

namespace {

class LayoutBuilder {
 public:
  explicit LayoutBuilder(ModelLayout& l) : l_(l) {}

  std::size_t add(std::string name, Shape dims, Init init) {
    l_.specs.push_back(ParamSpec{std::move(name), std::move(dims), init});
    return l_.specs.size() - 1;
  }

  ConvSlot conv(const std::string& name, std::size_t k, std::size_t cin, std::size_t cout,
                Init init = Init::conv) {
    ConvSlot s;
    s.w = add(name + ".w", {k, k, cin, cout}, init);
    s.b = add(name + ".b", {cout}, Init::zeros);
    return s;
  }

  AttnSlot attn(const std::string& name, std::size_t c, std::size_t heads) {
    AttnSlot s;
    s.q = add(name + ".query", {c, c}, Init::xavier);
    s.k = add(name + ".key", {c, c}, Init::xavier);
    s.v = add(name + ".value", {c, c}, Init::xavier);
    s.o = add(name + ".output", {c, c}, Init::xavier);
    s.heads = heads;
    return s;
  }

  FusionSlot fusion(const std::string& name, std::size_t c, std::size_t maps) {
    FusionSlot s;
    for (std::size_t n = 0; n < maps; ++n)
      s.kernels.push_back(conv(name + "." + std::to_string(n), 3, c, 1, Init::scaled_conv));
    return s;
  }

  RcabSlot rcab(const std::string& name, std::size_t c) {
    const std::size_t r = std::max<std::size_t>(1, c / 4);
    RcabSlot s;
    s.conv1 = conv(name + ".conv1", 3, c, c);
    s.conv2 = conv(name + ".conv2", 3, c, c, Init::scaled_conv);
    s.reduce_w = add(name + ".reduce.w", {c, r}, Init::xavier);
    s.reduce_b = add(name + ".reduce.b", {r}, Init::zeros);
    s.expand_w = add(name + ".expand.w", {r, c}, Init::xavier);
    s.expand_b = add(name + ".expand.b", {c}, Init::zeros);
    return s;
  }

  EncoderSlot encoder(const std::string& name, const ModelConfig& cfg, std::size_t stage,
                      std::size_t cin, bool downsample) {
    const std::size_t c = cfg.channels(stage);
    EncoderSlot s;
    s.conv_in = conv(name + ".conv_in", 3, cin, c);
    s.ln_gamma = add(name + ".ln.gamma", {c}, Init::ones);
    s.ln_beta = add(name + ".ln.beta", {c}, Init::zeros);
    s.conv_mid = conv(name + ".conv_mid", 3, c, c);
    s.attn = attn(name + ".attn", c, cfg.heads[stage]);
    if (cfg.variant != Variant::base) {
      s.fuse_current = fusion(name + ".fuse_current", c, cfg.current_maps());
      s.fuse_neighbor = fusion(name + ".fuse_neighbor", c, 2);
    }
    s.rcab = rcab(name + ".rcab", c);
    if (downsample) s.down = conv(name + ".down", 3, c, 2 * c);
    return s;
  }

  DecoderSlot decoder(const std::string& name, const ModelConfig& cfg, std::size_t stage) {
    const std::size_t c = cfg.channels(stage);
    DecoderSlot s;
    s.up = conv(name + ".up", 3, 2 * c, c);
    s.merge = conv(name + ".merge", 3, 2 * c, c);
    s.conv_in = conv(name + ".conv_in", 3, c, c);
    s.ln_gamma = add(name + ".ln.gamma", {c}, Init::ones);
    s.ln_beta = add(name + ".ln.beta", {c}, Init::zeros);
    s.conv_mid = conv(name + ".conv_mid", 3, c, c);
    s.attn = attn(name + ".attn", c, cfg.heads[stage]);
    s.rcab = rcab(name + ".rcab", c);
    return s;
  }

 private:
  ModelLayout& l_;
};

template <typename T>
Tensor<T> init_tensor(const ParamSpec& spec, Rng& rng) {
  Tensor<T> t(spec.dims);
  const Shape& d = spec.dims;
  double bound = 0;
  switch (spec.init) {
    case Init::zeros: return t;
    case Init::ones: t.fill(T(1)); return t;
    case Init::conv: bound = std::sqrt(3.0 / static_cast<double>(d[0] * d[1] * d[2])); break;
    case Init::scaled_conv:
      bound = 0.1 * std::sqrt(3.0 / static_cast<double>(d[0] * d[1] * d[2]));
      break;
    case Init::xavier: bound = std::sqrt(6.0 / static_cast<double>(d[0] + d[1])); break;
  }
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

ModelLayout ModelLayout::build(const ModelConfig& cfg) {
  cfg.validate();
  ModelLayout l;
  LayoutBuilder b(l);
  const std::size_t m = cfg.stages;
  for (std::size_t i = 0; i + 1 < m; ++i)
    l.encoders.push_back(b.encoder("enc" + std::to_string(i), cfg, i,
                                   i == 0 ? cfg.image_channels : cfg.channels(i), true));
  l.bottleneck = b.encoder("bottleneck", cfg, m - 1,
                           m == 1 ? cfg.image_channels : cfg.channels(m - 1), false);
  l.decoders.resize(m - 1);
  for (std::size_t i = m - 1; i-- > 0;) l.decoders[i] = b.decoder("dec" + std::to_string(i), cfg, i);
  l.out = b.conv("out", 3, cfg.base_channels, cfg.image_channels);
  return l;
}

std::size_t ModelLayout::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : specs) n += shape_size(s.dims);
  return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p{cfg, ModelLayout::build(cfg), {}};
  Rng rng(derive_seed(seed, "model-init"));
  for (const auto& spec : p.layout.specs) p.tensors.push_back(init_tensor<T>(spec, rng));
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& cfg) {
  ModelParams p{cfg, ModelLayout::build(cfg), {}};
  for (const auto& spec : p.layout.specs) p.tensors.emplace_back(spec.dims);
  return p;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

template <typename T>
std::optional<std::size_t> ModelParams<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < layout.specs.size(); ++i)
    if (layout.specs[i].name == name) return i;
  return std::nullopt;
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const Tensor<T>& t) { return t.all_finite(); });
}

template <typename T>
AttentionParams<T> BoundModel<T>::attention(const AttnSlot& s) const {
  return AttentionParams<T>{vars[s.q], vars[s.k], vars[s.v], vars[s.o], s.heads};
}

template <typename T>
FusionParams<T> BoundModel<T>::fusion(const FusionSlot& s) const {
  FusionParams<T> f;
  for (const auto& k : s.kernels) {
    f.kernels.push_back(vars[k.w]);
    f.biases.push_back(vars[k.b]);
  }
  return f;
}

template <typename T>
RcabParams<T> BoundModel<T>::rcab(const RcabSlot& s) const {
  return RcabParams<T>{vars[s.conv1.w], vars[s.conv1.b], vars[s.conv2.w], vars[s.conv2.b],
                       vars[s.reduce_w], vars[s.reduce_b], vars[s.expand_w], vars[s.expand_b]};
}

template <typename T>
BoundModel<T> bind(Tape<T>& tape, const ModelParams<T>& params, bool requires_grad) {
  BoundModel<T> m{&params.config, &params.layout, {}};
  m.vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) m.vars.push_back(tape.leaf(t, requires_grad));
  return m;
}

namespace {

template <typename T>
Var<T> conv(const BoundModel<T>& m, const ConvSlot& s, Var<T> x, std::size_t stride = 1) {
  return ops::conv2d(x, m[s.w], m[s.b], stride);
}

// conv -> LayerNorm -> GeLU -> conv
template <typename T>
Var<T> initial_block(const BoundModel<T>& m, const ConvSlot& in, std::size_t gamma,
                     std::size_t beta, const ConvSlot& mid, Var<T> x) {
  Var<T> h = ops::layer_norm(conv(m, in, x), m[gamma], m[beta]);
  return conv(m, mid, ops::gelu(h));
}

// Blocked attention on pre-projected maps. q/k/v are H x W x C token maps;
// kv_rows selects the key/value tokens (standard or dilated blocking).
template <typename T>
struct Projected {
  Var<T> q, k, v;            // standard blocking
  Var<T> k_dilated, v_dilated;
};

template <typename T>
Projected<T> project(const BoundModel<T>& m, const AttnSlot& s, Var<T> g, std::size_t b,
                     std::size_t d, bool need_q, bool need_dilated) {
  const std::size_t h = g.dim(0), w = g.dim(1), nb = (h / b) * (w / b);
  const auto rows = block_rows(h, w, b);
  Projected<T> p;
  const Shape lead{b * b, nb};
  if (need_q) p.q = ops::gather_rows(ops::linear(g, m[s.q]), rows, lead);
  Var<T> kmap = ops::linear(g, m[s.k]);
  Var<T> vmap = ops::linear(g, m[s.v]);
  p.k = ops::gather_rows(kmap, rows, lead);
  p.v = ops::gather_rows(vmap, rows, lead);
  if (need_dilated) {
    const auto drows = dilated_block_rows(h, w, b, d);
    p.k_dilated = ops::gather_rows(kmap, drows, lead);
    p.v_dilated = ops::gather_rows(vmap, drows, lead);
  }
  return p;
}

template <typename T>
Var<T> attend_map(const BoundModel<T>& m, const AttnSlot& s, Var<T> q, Var<T> k, Var<T> v,
                  std::size_t h, std::size_t w, std::size_t b) {
  Var<T> o = ops::linear(ops::attention(q, k, v, s.heads), m[s.o]);
  return ops::gather_rows(o, unblock_rows(h, w, b), Shape{h, w});
}

template <typename T>
void check_triplet(const Triplet<T>& in) {
  if (in.prev.dims() != in.cur.dims() || in.next.dims() != in.cur.dims())
    throw DimensionError("frame streams differ in shape: " + shape_str(in.prev.dims()) + ", " +
                         shape_str(in.cur.dims()) + ", " + shape_str(in.next.dims()));
}

// Shared body of encoder and bottleneck stages.
template <typename T>
StageOutput<T> run_stage(const BoundModel<T>& m, const EncoderSlot& slot, bool single,
                         const Triplet<T>& in) {
  const ModelConfig& cfg = *m.config;
  const std::size_t b = cfg.block;
  auto pre = [&](Var<T> f) {
    return initial_block(m, slot.conv_in, slot.ln_gamma, slot.ln_beta, slot.conv_mid, f);
  };
  StageOutput<T> out;
  if (single) {
    Var<T> g = pre(in.cur);
    const std::size_t h = g.dim(0), w = g.dim(1);
    Projected<T> p = project(m, slot.attn, g, b, 1, true, false);
    Var<T> f = attend_map(m, slot.attn, p.q, p.k, p.v, h, w, b);
    Var<T> r = rcab(f, m.rcab(slot.rcab));
    out.features = Triplet<T>{r, r, r};
  } else {
    check_triplet(in);
    const bool dilated = cfg.variant == Variant::full;
    Var<T> gp = pre(in.prev), gc = pre(in.cur), gn = pre(in.next);
    const std::size_t h = gc.dim(0), w = gc.dim(1);
    Projected<T> pp = project(m, slot.attn, gp, b, cfg.dilation, true, dilated);
    Projected<T> pc = project(m, slot.attn, gc, b, cfg.dilation, true, false);
    Projected<T> pn = project(m, slot.attn, gn, b, cfg.dilation, true, dilated);
    auto att = [&](Var<T> q, Var<T> k, Var<T> v) {
      return attend_map(m, slot.attn, q, k, v, h, w, b);
    };
    std::vector<Var<T>> current{att(pc.q, pc.k, pc.v), att(pc.q, pp.k, pp.v)};
    if (dilated) current.push_back(att(pc.q, pp.k_dilated, pp.v_dilated));
    current.push_back(att(pc.q, pn.k, pn.v));
    if (dilated) current.push_back(att(pc.q, pn.k_dilated, pn.v_dilated));
    std::vector<Var<T>> past{att(pp.q, pp.k, pp.v), att(pp.q, pc.k, pc.v)};
    std::vector<Var<T>> future{att(pn.q, pn.k, pn.v), att(pn.q, pc.k, pc.v)};
    const FusionParams<T> fc = m.fusion(slot.fuse_current);
    const FusionParams<T> fn = m.fusion(slot.fuse_neighbor);
    const RcabParams<T> rp = m.rcab(slot.rcab);
    out.features.prev = rcab(fuse(past, fn), rp);
    out.features.cur = rcab(fuse(current, fc), rp);
    out.features.next = rcab(fuse(future, fn), rp);
  }
  if (slot.down) {
    if (single) {
      Var<T> d = conv(m, *slot.down, out.features.cur, 2);
      out.next = Triplet<T>{d, d, d};
    } else {
      out.next = Triplet<T>{conv(m, *slot.down, out.features.prev, 2),
                            conv(m, *slot.down, out.features.cur, 2),
                            conv(m, *slot.down, out.features.next, 2)};
    }
  } else {
    out.next = out.features;
  }
  return out;
}

template <typename T>
Var<T> clamp_output(Var<T> y) {
  Tensor<T> v = y.value();
  for (auto& x : v.values()) x = std::clamp(x, T(0), T(1));
  return y.tape()->constant(std::move(v));
}

template <typename T>
Var<T> run_model(const BoundModel<T>& m, const Triplet<T>& frames, bool single, Mode mode) {
  const ModelConfig& cfg = *m.config;
  const ModelLayout& l = *m.layout;
  const Var<T>& f = frames.cur;
  if (f.rank() != 3 || f.dim(2) != cfg.image_channels)
    throw DimensionError("expected H x W x " + std::to_string(cfg.image_channels) +
                         " frame, got " + shape_str(f.dims()));
  cfg.check_extents(f.dim(0), f.dim(1));
  if (!single) check_triplet(frames);
  Triplet<T> x = frames;
  std::vector<Var<T>> skips;
  for (std::size_t i = 0; i < l.encoders.size(); ++i) {
    StageOutput<T> s = run_stage(m, l.encoders[i], single, x);
    skips.push_back(s.features.cur);
    x = s.next;
  }
  Var<T> y = run_stage(m, l.bottleneck, single, x).features.cur;
  for (std::size_t i = l.decoders.size(); i-- > 0;)
    y = decoder_stage(m, l.decoders[i], i, y, skips[i]);
  y = conv(m, l.out, y);
  return mode == Mode::inference ? clamp_output(y) : y;
}

}  // namespace

template <typename T>
StageOutput<T> encoder_stage(const BoundModel<T>& m, const EncoderSlot& slot, std::size_t,
                             const Triplet<T>& in) {
  return run_stage(m, slot, m.config->variant == Variant::base, in);
}

template <typename T>
Triplet<T> bottleneck_stage(const BoundModel<T>& m, const Triplet<T>& in) {
  return run_stage(m, m.layout->bottleneck, m.config->variant == Variant::base, in).features;
}

template <typename T>
Var<T> decoder_stage(const BoundModel<T>& m, const DecoderSlot& slot, std::size_t stage, Var<T> f,
                     Var<T> skip) {
  const ModelConfig& cfg = *m.config;
  const std::size_t c = cfg.channels(stage);
  if (f.rank() != 3 || skip.rank() != 3 || f.dim(2) != 2 * c || skip.dim(2) != c ||
      skip.dim(0) != 2 * f.dim(0) || skip.dim(1) != 2 * f.dim(1))
    throw DimensionError("decoder stage " + std::to_string(stage) + ": input " +
                         shape_str(f.dims()) + " does not match skip " + shape_str(skip.dims()));
  Var<T> u = conv(m, slot.up, ops::upsample_nearest(f));
  Var<T> merged = conv(m, slot.merge, ops::concat_channels<T>({u, skip}));
  Var<T> g = initial_block(m, slot.conv_in, slot.ln_gamma, slot.ln_beta, slot.conv_mid, merged);
  Var<T> a = unblock(mhsa(block(g, cfg.block), m.attention(slot.attn)));
  return rcab(a, m.rcab(slot.rcab));
}

template <typename T>
Var<T> forward(const BoundModel<T>& m, const Triplet<T>& frames, Mode mode) {
  return run_model(m, frames, m.config->variant == Variant::base, mode);
}

template <typename T>
Var<T> forward_base(const BoundModel<T>& m, Var<T> frame, Mode mode) {
  return run_model(m, Triplet<T>{frame, frame, frame}, true, mode);
}

template <typename T>
Tensor<T> enhance(const ModelParams<T>& params, const Tensor<T>& prev, const Tensor<T>& cur,
                  const Tensor<T>& next) {
  Tape<T> tape;
  BoundModel<T> m = bind(tape, params, false);
  Triplet<T> tr{tape.constant(prev), tape.constant(cur), tape.constant(next)};
  return forward(m, tr, Mode::inference).value();
}

#define SXDA_INSTANTIATE_NETWORK(T)                                                            \
  template struct ModelParams<T>;                                                              \
  template struct BoundModel<T>;                                                               \
  template BoundModel<T> bind<T>(Tape<T>&, const ModelParams<T>&, bool);                       \
  template StageOutput<T> encoder_stage<T>(const BoundModel<T>&, const EncoderSlot&,           \
                                           std::size_t, const Triplet<T>&);                    \
  template Triplet<T> bottleneck_stage<T>(const BoundModel<T>&, const Triplet<T>&);            \
  template Var<T> decoder_stage<T>(const BoundModel<T>&, const DecoderSlot&, std::size_t,      \
                                   Var<T>, Var<T>);                                            \
  template Var<T> forward<T>(const BoundModel<T>&, const Triplet<T>&, Mode);                   \
  template Var<T> forward_base<T>(const BoundModel<T>&, Var<T>, Mode);                         \
  template Tensor<T> enhance<T>(const ModelParams<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                const Tensor<T>&);

SXDA_INSTANTIATE_NETWORK(float)
SXDA_INSTANTIATE_NETWORK(double)

}  // namespace sxda
