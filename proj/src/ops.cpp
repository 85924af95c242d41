#include "sxda/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>

namespace sxda::ops {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
}

template <typename T>
void same_shape(const char* op, Var<T> a, Var<T> b) {
  same_tape(a, b);
  if (a.dims() != b.dims())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.dims()) + " vs " +
                         shape_str(b.dims()));
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

template <typename T>
Tensor<T> make(Shape dims, Buffer<T> v) {
  return Tensor<T>::unchecked(std::move(dims), std::move(v));
}

template <typename T>
void require_rank3(const char* op, Var<T> x) {
  if (x.rank() != 3)
    throw DimensionError(std::string(op) + ": expected H x W x C, got " + shape_str(x.dims()));
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Var<T> unary(const char* name, Var<T> x, F f, D df) {
  const auto& xv = x.value();
  Buffer<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  Tape<T>& tape = *x.tape();
  const Var<T> y = tape.upcoming();
  return tape.record(name, make(xv.dims(), std::move(out)), {x}, [x, y, df](Tape<T>& t, const Buffer<T>& g) {
    T* gx = t.grad_target(x);
    if (!gx) return;
    const auto& xv = t.value(x);
    const auto& yv = t.value(y);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  same_tape(a, b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.dims()) + " and " +
                         shape_str(b.dims()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(m * n);
  MapR<T>(out.data(), m, n).noalias() =
      CMapR<T>(a.value().data(), m, k) * CMapR<T>(b.value().data(), k, n);
  return a.tape()->record("matmul", make<T>({m, n}, std::move(out)), {a, b},
                          [a, b, m, k, n](Tape<T>& t, const Buffer<T>& g) {
                            CMapR<T> G(g.data(), m, n);
                            if (T* ga = t.grad_target(a))
                              MapR<T>(ga, m, k).noalias() +=
                                  G * CMapR<T>(t.value(b).data(), k, n).transpose();
                            if (T* gb = t.grad_target(b))
                              MapR<T>(gb, k, n).noalias() +=
                                  CMapR<T>(t.value(a).data(), m, k).transpose() * G;
                          });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  same_tape(x, w);
  if (w.rank() != 2 || x.rank() < 1 || last_dim(x.dims()) != w.dim(0))
    throw DimensionError("linear: incompatible shapes " + shape_str(x.dims()) + " and " +
                         shape_str(w.dims()));
  const std::size_t k = w.dim(0), n = w.dim(1), m = x.size() / k;
  Shape dims = x.dims();
  dims.back() = n;
  Buffer<T> out(m * n);
  MapR<T>(out.data(), m, n).noalias() =
      CMapR<T>(x.value().data(), m, k) * CMapR<T>(w.value().data(), k, n);
  return x.tape()->record("linear", make(std::move(dims), std::move(out)), {x, w},
                          [x, w, m, k, n](Tape<T>& t, const Buffer<T>& g) {
                            CMapR<T> G(g.data(), m, n);
                            if (T* gx = t.grad_target(x))
                              MapR<T>(gx, m, k).noalias() +=
                                  G * CMapR<T>(t.value(w).data(), k, n).transpose();
                            if (T* gw = t.grad_target(w))
                              MapR<T>(gw, k, n).noalias() +=
                                  CMapR<T>(t.value(x).data(), m, k).transpose() * G;
                          });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const std::size_t n = last_dim(a.dims()), m = a.size() / n;
  Buffer<T> out(a.size());
  MapR<T> Y(out.data(), m, n);
  Y = CMapR<T>(a.value().data(), m, n);
  Y.colwise() -= Y.rowwise().maxCoeff();
  Y = Y.array().exp().matrix();
  Y.array().colwise() /= Y.rowwise().sum().array();
  Tape<T>& tape = *a.tape();
  const Var<T> y = tape.upcoming();
  return tape.record("softmax", make(a.dims(), std::move(out)), {a},
                     [a, y, m, n](Tape<T>& t, const Buffer<T>& g) {
                       T* ga = t.grad_target(a);
                       if (!ga) return;
                       CMapR<T> Y(t.value(y).data(), m, n);
                       CMapR<T> G(g.data(), m, n);
                       auto dot = (G.array() * Y.array()).rowwise().sum().eval();
                       MapR<T>(ga, m, n).array() +=
                           Y.array() * (G.array().colwise() - dot);
                     });
}

namespace {

struct ConvGeom {
  std::size_t h, w, cin, k, cout, stride, pad, ho, wo;
  PadMode mode;
};

// Source pixel of every (output pixel, tap) pair in patch-matrix order, or
// -1 where the tap falls on zero padding.
std::vector<std::int32_t> patch_index(const ConvGeom& g) {
  const auto H = static_cast<std::int64_t>(g.h), W = static_cast<std::int64_t>(g.w);
  const auto pad = static_cast<std::int64_t>(g.pad);
  std::vector<std::int32_t> idx(g.ho * g.wo * g.k * g.k);
  std::size_t n = 0;
  for (std::size_t oy = 0; oy < g.ho; ++oy)
    for (std::size_t ox = 0; ox < g.wo; ++ox)
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        std::int64_t iy = static_cast<std::int64_t>(oy * g.stride + ky) - pad;
        const bool yin = iy >= 0 && iy < H;
        if (!yin && g.mode == PadMode::reflect) iy = reflect_index(iy, H);
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          std::int64_t ix = static_cast<std::int64_t>(ox * g.stride + kx) - pad;
          const bool xin = ix >= 0 && ix < W;
          if (!xin && g.mode == PadMode::reflect) ix = reflect_index(ix, W);
          const bool zero = g.mode == PadMode::zero && !(yin && xin);
          idx[n++] = zero ? -1 : static_cast<std::int32_t>(iy * W + ix);
        }
      }
  return idx;
}

// Builds the (ho*wo) x (k*k*cin) patch matrix.
template <typename T>
void im2col(const ConvGeom& g, const std::vector<std::int32_t>& idx, const T* x, T* cols) {
  const std::size_t c = g.cin;
  for (std::size_t r = 0; r < idx.size(); ++r, cols += c) {
    if (idx[r] < 0) {
      std::fill(cols, cols + c, T{0});
    } else {
      const T* src = x + static_cast<std::size_t>(idx[r]) * c;
      for (std::size_t i = 0; i < c; ++i) cols[i] = src[i];
    }
  }
}

template <typename T>
void col2im_add(const ConvGeom& g, const std::vector<std::int32_t>& idx, const T* cols, T* gx) {
  const std::size_t c = g.cin;
  for (std::size_t r = 0; r < idx.size(); ++r, cols += c) {
    if (idx[r] < 0) continue;
    T* dst = gx + static_cast<std::size_t>(idx[r]) * c;
    for (std::size_t i = 0; i < c; ++i) dst[i] += cols[i];
  }
}

template <typename T>
ConvGeom conv_geom(Var<T> x, Var<T> kernel, std::size_t stride, PadMode pad) {
  require_rank3("conv2d", x);
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1) || kernel.dim(0) % 2 == 0)
    throw DimensionError("conv2d: kernel must be k x k x Cin x Cout with odd k, got " +
                         shape_str(kernel.dims()));
  if (kernel.dim(2) != x.dim(2))
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(2)) +
                         " do not match kernel " + shape_str(kernel.dims()));
  if (stride != 1 && stride != 2) throw ConfigError("conv2d: stride must be 1 or 2");
  ConvGeom g{};
  g.h = x.dim(0);
  g.w = x.dim(1);
  g.cin = x.dim(2);
  g.k = kernel.dim(0);
  g.cout = kernel.dim(3);
  g.stride = stride;
  g.pad = g.k / 2;
  g.mode = pad;
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k)
    throw DimensionError("conv2d: input smaller than kernel");
  g.ho = (g.h + 2 * g.pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / stride + 1;
  return g;
}

template <typename T>
Var<T> conv_impl(Var<T> x, Var<T> kernel, const Var<T>* bias, std::size_t stride, PadMode pad) {
  same_tape(x, kernel);
  const ConvGeom g = conv_geom(x, kernel, stride, pad);
  if (bias) {
    same_tape(x, *bias);
    if (bias->size() != g.cout)
      throw DimensionError("conv2d: bias of shape " + shape_str(bias->dims()) + " for " +
                           std::to_string(g.cout) + " output channels");
  }
  const std::size_t rows = g.ho * g.wo, row_len = g.k * g.k * g.cin;
  auto idx = std::make_shared<const std::vector<std::int32_t>>(patch_index(g));
  Buffer<T> cols(rows * row_len);
  im2col(g, *idx, x.value().data(), cols.data());
  Buffer<T> out(rows * g.cout);
  MapR<T> Y(out.data(), rows, g.cout);
  Y.noalias() = CMapR<T>(cols.data(), rows, row_len) *
                CMapR<T>(kernel.value().data(), row_len, g.cout);
  if (bias) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value().data(), g.cout);
  std::vector<Var<T>> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  Var<T> b = has_bias ? *bias : Var<T>{};
  // Patches are rebuilt in backward rather than kept alive on the tape.
  return x.tape()->record(
      "conv2d", make<T>({g.ho, g.wo, g.cout}, std::move(out)), inputs,
      [x, kernel, b, has_bias, g, rows, row_len, idx](Tape<T>& t, const Buffer<T>& grad) {
        CMapR<T> G(grad.data(), rows, g.cout);
        T* gk = t.grad_target(kernel);
        T* gx = t.grad_target(x);
        if (gk) {
          Buffer<T> cols(rows * row_len);
          im2col(g, *idx, t.value(x).data(), cols.data());
          MapR<T>(gk, row_len, g.cout).noalias() +=
              CMapR<T>(cols.data(), rows, row_len).transpose() * G;
        }
        if (gx) {
          Buffer<T> dcols(rows * row_len);
          MapR<T>(dcols.data(), rows, row_len).noalias() =
              G * CMapR<T>(t.value(kernel).data(), row_len, g.cout).transpose();
          col2im_add(g, *idx, dcols.data(), gx);
        }
        if (has_bias) {
          if (T* gb = t.grad_target(b))
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, g.cout) += G.colwise().sum();
        }
      });
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::size_t stride, PadMode pad) {
  return conv_impl<T>(x, kernel, nullptr, stride, pad);
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t stride, PadMode pad) {
  return conv_impl<T>(x, kernel, &bias, stride, pad);
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const std::size_t c = last_dim(x.dims()), m = x.size() / c;
  if (gamma.size() != c || beta.size() != c)
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.dims()) + "/" +
                         shape_str(beta.dims()) + " for " + std::to_string(c) + " channels");
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  Buffer<T> out(x.size());
  auto xhat = std::make_shared<Buffer<T>>(x.size());
  auto rstd = std::make_shared<Buffer<T>>(m);
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = xv + r * c;
    T mean = 0;
    for (std::size_t i = 0; i < c; ++i) mean += row[i];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<T>(c);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < c; ++i) {
      const T xh = (row[i] - mean) * rs;
      (*xhat)[r * c + i] = xh;
      out[r * c + i] = gv[i] * xh + bv[i];
    }
  }
  return x.tape()->record(
      "layer_norm", make(x.dims(), std::move(out)), {x, gamma, beta},
      [x, gamma, beta, xhat, rstd, m, c](Tape<T>& t, const Buffer<T>& g) {
        T* gx = t.grad_target(x);
        T* gg = t.grad_target(gamma);
        T* gb = t.grad_target(beta);
        const T* gv = t.value(gamma).data();
        const auto& xh = *xhat;
        for (std::size_t r = 0; r < m; ++r) {
          const T* gr = g.data() + r * c;
          const T* xr = xh.data() + r * c;
          if (gg)
            for (std::size_t i = 0; i < c; ++i) gg[i] += gr[i] * xr[i];
          if (gb)
            for (std::size_t i = 0; i < c; ++i) gb[i] += gr[i];
          if (gx) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t i = 0; i < c; ++i) {
              const T d = gr[i] * gv[i];
              mean_d += d;
              mean_dx += d * xr[i];
            }
            mean_d /= static_cast<T>(c);
            mean_dx /= static_cast<T>(c);
            T* out = gx + r * c;
            for (std::size_t i = 0; i < c; ++i)
              out[i] += (*rstd)[r] * (gr[i] * gv[i] - mean_d - xr[i] * mean_dx);
          }
        }
      });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary<T>(
      "gelu", x, [](T v) { return v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary<T>(
      "relu", x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> abs(Var<T> x) {
  return unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape dims) {
  Tensor<T> v = x.value().reshaped(std::move(dims));
  return x.tape()->record("reshape", std::move(v), {x}, [x](Tape<T>& t, const Buffer<T>& g) {
    if (T* gx = t.grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> permute_axes(Var<T> x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.dims();
  const std::size_t r = in.size();
  if (perm.size() != r) throw DimensionError("permute_axes: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute_axes: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_dims(r);
  for (std::size_t i = 0; i < r; ++i) out_dims[i] = in[perm[i]];
  // src[o] is the input offset of output element o.
  auto src = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < x.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    (*src)[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_dims[i]) break;
      idx[i] = 0;
    }
  }
  Buffer<T> out(x.size());
  const T* xv = x.value().data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*src)[o]];
  return x.tape()->record("permute", make(std::move(out_dims), std::move(out)), {x},
                          [x, src](Tape<T>& t, const Buffer<T>& g) {
                            if (T* gx = t.grad_target(x))
                              for (std::size_t o = 0; o < g.size(); ++o) gx[(*src)[o]] += g[o];
                          });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  Shape lead = xs[0].dims();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    same_tape(xs[0], x);
    Shape l = x.dims();
    l.pop_back();
    if (l != lead)
      throw DimensionError("concat_channels: leading extents differ: " + shape_str(xs[0].dims()) +
                           " vs " + shape_str(x.dims()));
    widths.push_back(last_dim(x.dims()));
    total += widths.back();
  }
  const std::size_t rows = xs[0].size() / widths[0];
  Buffer<T> out(rows * total);
  std::size_t off = 0;
  for (std::size_t n = 0; n < xs.size(); ++n) {
    const T* src = xs[n].value().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(src + r * widths[n], src + (r + 1) * widths[n], out.data() + r * total + off);
    off += widths[n];
  }
  Shape dims = lead;
  dims.push_back(total);
  return xs[0].tape()->record(
      "concat", make(std::move(dims), std::move(out)), xs,
      [xs, widths, rows, total](Tape<T>& t, const Buffer<T>& g) {
        std::size_t off = 0;
        for (std::size_t n = 0; n < xs.size(); ++n) {
          if (T* gx = t.grad_target(xs[n]))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[n]; ++c)
                gx[r * widths[n] + c] += g[r * total + off + c];
          off += widths[n];
        }
      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  same_shape("add", a, b);
  Buffer<T> out(a.size());
  const T* av = a.value().data();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape()->record("add", make(a.dims(), std::move(out)), {a, b},
                          [a, b](Tape<T>& t, const Buffer<T>& g) {
                            if (T* ga = t.grad_target(a))
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                            if (T* gb = t.grad_target(b))
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                          });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  same_shape("sub", a, b);
  Buffer<T> out(a.size());
  const T* av = a.value().data();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape()->record("sub", make(a.dims(), std::move(out)), {a, b},
                          [a, b](Tape<T>& t, const Buffer<T>& g) {
                            if (T* ga = t.grad_target(a))
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                            if (T* gb = t.grad_target(b))
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  same_shape("mul", a, b);
  Buffer<T> out(a.size());
  const T* av = a.value().data();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape()->record("mul", make(a.dims(), std::move(out)), {a, b},
                          [a, b](Tape<T>& t, const Buffer<T>& g) {
                            const T* av = t.value(a).data();
                            const T* bv = t.value(b).data();
                            if (T* ga = t.grad_target(a))
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                            if (T* gb = t.grad_target(b))
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                          });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Buffer<T> out(a.size());
  const T* av = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.tape()->record("scale", make(a.dims(), std::move(out)), {a},
                          [a, s](Tape<T>& t, const Buffer<T>& g) {
                            if (T* ga = t.grad_target(a))
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                          });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  same_tape(x, b);
  const std::size_t c = last_dim(x.dims()), m = x.size() / c;
  if (b.size() != c)
    throw DimensionError("add_bias: bias " + shape_str(b.dims()) + " for input " +
                         shape_str(x.dims()));
  Buffer<T> out(x.size());
  const T* xv = x.value().data();
  const T* bv = b.value().data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = xv[r * c + i] + bv[i];
  return x.tape()->record("add_bias", make(x.dims(), std::move(out)), {x, b},
                          [x, b, m, c](Tape<T>& t, const Buffer<T>& g) {
                            if (T* gx = t.grad_target(x))
                              for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                            if (T* gb = t.grad_target(b))
                              for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t i = 0; i < c; ++i) gb[i] += g[r * c + i];
                          });
}

template <typename T>
Var<T> scale_channels(Var<T> x, Var<T> s) {
  same_tape(x, s);
  const std::size_t c = last_dim(x.dims()), m = x.size() / c;
  if (s.size() != c)
    throw DimensionError("scale_channels: scale " + shape_str(s.dims()) + " for input " +
                         shape_str(x.dims()));
  Buffer<T> out(x.size());
  const T* xv = x.value().data();
  const T* sv = s.value().data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = xv[r * c + i] * sv[i];
  return x.tape()->record("scale_channels", make(x.dims(), std::move(out)), {x, s},
                          [x, s, m, c](Tape<T>& t, const Buffer<T>& g) {
                            const T* xv = t.value(x).data();
                            const T* sv = t.value(s).data();
                            if (T* gx = t.grad_target(x))
                              for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t i = 0; i < c; ++i)
                                  gx[r * c + i] += g[r * c + i] * sv[i];
                            if (T* gs = t.grad_target(s))
                              for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t i = 0; i < c; ++i)
                                  gs[i] += g[r * c + i] * xv[r * c + i];
                          });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::uint32_t> rows, Shape out_leading) {
  const std::size_t c = last_dim(x.dims()), nrows = x.size() / c;
  std::size_t lead = 1;
  for (std::size_t d : out_leading) lead *= d;
  if (lead != rows.size())
    throw DimensionError("gather_rows: " + std::to_string(rows.size()) +
                         " indices for output rows " + shape_str(out_leading));
  for (std::uint32_t r : rows)
    if (r >= nrows) throw DimensionError("gather_rows: row index out of range");
  Buffer<T> out(rows.size() * c);
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(xv + rows[r] * c, xv + (rows[r] + 1) * c, out.data() + r * c);
  Shape dims = std::move(out_leading);
  dims.push_back(c);
  auto idx = std::make_shared<const std::vector<std::uint32_t>>(std::move(rows));
  return x.tape()->record("gather_rows", make(std::move(dims), std::move(out)), {x},
                          [x, idx, c](Tape<T>& t, const Buffer<T>& g) {
                            T* gx = t.grad_target(x);
                            if (!gx) return;
                            const auto& rs = *idx;
                            for (std::size_t r = 0; r < rs.size(); ++r) {
                              T* dst = gx + rs[r] * c;
                              const T* src = g.data() + r * c;
                              for (std::size_t i = 0; i < c; ++i) dst[i] += src[i];
                            }
                          });
}

template <typename T>
Var<T> pad_reflect(Var<T> x, std::size_t pad) {
  require_rank3("pad_reflect", x);
  const std::size_t h = x.dim(0), w = x.dim(1);
  if (pad > h || pad > w)
    throw DimensionError("pad_reflect: pad " + std::to_string(pad) + " too large for " +
                         shape_str(x.dims()));
  const std::size_t ho = h + 2 * pad, wo = w + 2 * pad;
  std::vector<std::uint32_t> rows(ho * wo);
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t xx = 0; xx < wo; ++xx) {
      auto sy = reflect_index(static_cast<std::int64_t>(y) - static_cast<std::int64_t>(pad), static_cast<std::int64_t>(h));
      auto sx = reflect_index(static_cast<std::int64_t>(xx) - static_cast<std::int64_t>(pad), static_cast<std::int64_t>(w));
      rows[y * wo + xx] = static_cast<std::uint32_t>(sy * static_cast<std::int64_t>(w) + sx);
    }
  return gather_rows(x, std::move(rows), Shape{ho, wo});
}

template <typename T>
Var<T> upsample_nearest(Var<T> x) {
  require_rank3("upsample_nearest", x);
  const std::size_t h = x.dim(0), w = x.dim(1);
  std::vector<std::uint32_t> rows(4 * h * w);
  for (std::size_t y = 0; y < 2 * h; ++y)
    for (std::size_t xx = 0; xx < 2 * w; ++xx)
      rows[y * 2 * w + xx] = static_cast<std::uint32_t>((y / 2) * w + xx / 2);
  return gather_rows(x, std::move(rows), Shape{2 * h, 2 * w});
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& maps, Var<T> weights) {
  if (maps.empty()) throw ContractError("weighted_sum: no maps");
  const std::size_t n = maps.size();
  const std::size_t c = last_dim(maps[0].dims()), p = maps[0].size() / c;
  for (const auto& m : maps) {
    same_tape(m, weights);
    if (m.dims() != maps[0].dims())
      throw DimensionError("weighted_sum: map shapes differ: " + shape_str(maps[0].dims()) +
                           " vs " + shape_str(m.dims()));
  }
  if (last_dim(weights.dims()) != n || weights.size() != p * n)
    throw DimensionError("weighted_sum: weights " + shape_str(weights.dims()) + " for " +
                         std::to_string(n) + " maps of " + shape_str(maps[0].dims()));
  Buffer<T> out(p * c, T{0});
  const T* wv = weights.value().data();
  for (std::size_t k = 0; k < n; ++k) {
    const T* a = maps[k].value().data();
    for (std::size_t r = 0; r < p; ++r) {
      const T wk = wv[r * n + k];
      for (std::size_t i = 0; i < c; ++i) out[r * c + i] += wk * a[r * c + i];
    }
  }
  std::vector<Var<T>> inputs = maps;
  inputs.push_back(weights);
  return weights.tape()->record(
      "weighted_sum", make(maps[0].dims(), std::move(out)), inputs,
      [maps, weights, n, p, c](Tape<T>& t, const Buffer<T>& g) {
        const T* wv = t.value(weights).data();
        T* gw = t.grad_target(weights);
        for (std::size_t k = 0; k < n; ++k) {
          const T* a = t.value(maps[k]).data();
          T* ga = t.grad_target(maps[k]);
          for (std::size_t r = 0; r < p; ++r) {
            const T* gr = g.data() + r * c;
            if (ga) {
              const T wk = wv[r * n + k];
              for (std::size_t i = 0; i < c; ++i) ga[r * c + i] += wk * gr[i];
            }
            if (gw) {
              T s = 0;
              for (std::size_t i = 0; i < c; ++i) s += gr[i] * a[r * c + i];
              gw[r * n + k] += s;
            }
          }
        }
      });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const std::size_t c = last_dim(x.dims()), m = x.size() / c;
  Buffer<T> out(c, T{0});
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < c; ++i) out[i] += xv[r * c + i];
  for (auto& v : out) v /= static_cast<T>(m);
  return x.tape()->record("global_avg_pool", make<T>({1, c}, std::move(out)), {x},
                          [x, m, c](Tape<T>& t, const Buffer<T>& g) {
                            if (T* gx = t.grad_target(x))
                              for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t i = 0; i < c; ++i)
                                  gx[r * c + i] += g[i] / static_cast<T>(m);
                          });
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  const T s = std::accumulate(x.value().storage().begin(), x.value().storage().end(), T{0});
  return x.tape()->record("sum", make<T>({1}, {s}), {x}, [x](Tape<T>& t, const Buffer<T>& g) {
    if (T* gx = t.grad_target(x))
      for (std::size_t i = 0; i < t.value(x).size(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

namespace {

struct AttnGeom {
  std::size_t tq, tk, blocks, channels, heads, head_dim;
};

template <typename T>
AttnGeom attn_geom(const Shape& q, const Shape& k, const Shape& v, std::size_t heads) {
  if (q.size() != 3 || k.size() != 3 || v.size() != 3 || k != v || q[1] != k[1] || q[2] != k[2])
    throw DimensionError("attention: incompatible blocked shapes q" + shape_str(q) + " k" +
                         shape_str(k) + " v" + shape_str(v));
  if (heads == 0 || q[2] % heads != 0)
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide " +
                      std::to_string(q[2]) + " channels");
  return AttnGeom{q[0], k[0], q[1], q[2], heads, q[2] / heads};
}

// Head h of block j as a strided tokens x head_dim view (row t is blocked
// row t*blocks + j).
template <typename T>
using HeadMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CHeadMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
HeadMap<T> head(T* base, std::size_t tokens, const AttnGeom& g, std::size_t j, std::size_t h) {
  return HeadMap<T>(base + j * g.channels + h * g.head_dim, static_cast<Eigen::Index>(tokens),
                    static_cast<Eigen::Index>(g.head_dim),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(g.blocks * g.channels)));
}

template <typename T>
CHeadMap<T> head(const T* base, std::size_t tokens, const AttnGeom& g, std::size_t j,
                 std::size_t h) {
  return CHeadMap<T>(base + j * g.channels + h * g.head_dim, static_cast<Eigen::Index>(tokens),
                     static_cast<Eigen::Index>(g.head_dim),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(g.blocks * g.channels)));
}

template <typename T>
void probs_into(const CHeadMap<T>& Q, const CHeadMap<T>& K, T scale, T* out) {
  MapR<T> P(out, Q.rows(), K.rows());
  P.noalias() = (Q * K.transpose()) * scale;
  P.colwise() -= P.rowwise().maxCoeff();
  P = P.array().exp().matrix();
  P.array().colwise() /= P.rowwise().sum().array();
}

}  // namespace

template <typename T>
Tensor<T> attention_probabilities(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
  const AttnGeom g = attn_geom<T>(q.dims(), k.dims(), k.dims(), heads);
  const T sc = T(1) / std::sqrt(static_cast<T>(g.head_dim));
  Buffer<T> out(g.blocks * g.heads * g.tq * g.tk);
  for (std::size_t j = 0; j < g.blocks; ++j)
    for (std::size_t h = 0; h < g.heads; ++h)
      probs_into(head(q.data(), g.tq, g, j, h), head(k.data(), g.tk, g, j, h), sc,
                 out.data() + (j * g.heads + h) * g.tq * g.tk);
  return Tensor<T>::unchecked({g.blocks, g.heads, g.tq, g.tk}, std::move(out));
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
  same_tape(q, k);
  same_tape(q, v);
  const AttnGeom g = attn_geom<T>(q.dims(), k.dims(), v.dims(), heads);
  const T sc = T(1) / std::sqrt(static_cast<T>(g.head_dim));
  const std::size_t pp = g.tq * g.tk;
  auto probs = std::make_shared<Buffer<T>>(g.blocks * g.heads * pp);
  Buffer<T> out(q.size(), T{0});
  const T* qd = q.value().data();
  const T* kd = k.value().data();
  const T* vd = v.value().data();
  for (std::size_t j = 0; j < g.blocks; ++j)
    for (std::size_t h = 0; h < g.heads; ++h) {
      T* P = probs->data() + (j * g.heads + h) * pp;
      probs_into(head(qd, g.tq, g, j, h), head(kd, g.tk, g, j, h), sc, P);
      head(out.data(), g.tq, g, j, h).noalias() =
          CMapR<T>(P, g.tq, g.tk) * head(vd, g.tk, g, j, h);
    }
  return q.tape()->record(
      "attention", make(q.dims(), std::move(out)), {q, k, v},
      [q, k, v, g, sc, probs, pp](Tape<T>& t, const Buffer<T>& grad) {
        T* gq = t.grad_target(q);
        T* gk = t.grad_target(k);
        T* gv = t.grad_target(v);
        const T* qd = t.value(q).data();
        const T* kd = t.value(k).data();
        const T* vd = t.value(v).data();
        MatR<T> dP, dS;
        for (std::size_t j = 0; j < g.blocks; ++j)
          for (std::size_t h = 0; h < g.heads; ++h) {
            CMapR<T> P(probs->data() + (j * g.heads + h) * pp, g.tq, g.tk);
            const CHeadMap<T> dO = head(grad.data(), g.tq, g, j, h);
            if (gv) head(gv, g.tk, g, j, h).noalias() += P.transpose() * dO;
            if (!gq && !gk) continue;
            dP.noalias() = dO * head(vd, g.tk, g, j, h).transpose();
            auto rowdot = (dP.array() * P.array()).rowwise().sum().eval();
            dS = (P.array() * (dP.array().colwise() - rowdot)).matrix() * sc;
            if (gq) head(gq, g.tq, g, j, h).noalias() += dS * head(kd, g.tk, g, j, h);
            if (gk) head(gk, g.tk, g, j, h).noalias() += dS.transpose() * head(qd, g.tq, g, j, h);
          }
      });
}

#define SXDA_INSTANTIATE_OPS(T)                                                           \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                              \
  template Var<T> linear<T>(Var<T>, Var<T>);                                              \
  template Var<T> softmax_rows<T>(Var<T>);                                                \
  template Var<T> conv2d<T>(Var<T>, Var<T>, std::size_t, PadMode);                        \
  template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, std::size_t, PadMode);                \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                               \
  template Var<T> gelu<T>(Var<T>);                                                        \
  template Var<T> relu<T>(Var<T>);                                                        \
  template Var<T> sigmoid<T>(Var<T>);                                                     \
  template Var<T> abs<T>(Var<T>);                                                         \
  template Var<T> reshape<T>(Var<T>, Shape);                                              \
  template Var<T> permute_axes<T>(Var<T>, const std::vector<std::size_t>&);               \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                         \
  template Var<T> add<T>(Var<T>, Var<T>);                                                 \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                 \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                 \
  template Var<T> scale<T>(Var<T>, T);                                                    \
  template Var<T> add_bias<T>(Var<T>, Var<T>);                                            \
  template Var<T> scale_channels<T>(Var<T>, Var<T>);                                      \
  template Var<T> pad_reflect<T>(Var<T>, std::size_t);                                    \
  template Var<T> upsample_nearest<T>(Var<T>);                                            \
  template Var<T> gather_rows<T>(Var<T>, std::vector<std::uint32_t>, Shape);              \
  template Var<T> weighted_sum<T>(const std::vector<Var<T>>&, Var<T>);                    \
  template Var<T> global_avg_pool<T>(Var<T>);                                             \
  template Var<T> sum_all<T>(Var<T>);                                                     \
  template Var<T> mean_all<T>(Var<T>);                                                    \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, std::size_t);                      \
  template Tensor<T> attention_probabilities<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);

SXDA_INSTANTIATE_OPS(float)
SXDA_INSTANTIATE_OPS(double)

}  // namespace sxda::ops
