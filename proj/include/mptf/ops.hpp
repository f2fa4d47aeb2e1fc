#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "mptf/tape.hpp"

namespace mptf::ad {

namespace detail {

inline Tape& tape_of(Tensor t) {
  if (!t.defined()) throw Error("op applied to an undefined tensor");
  return *t.tape();
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) throw Error(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

inline void require_feature(const Shape& s, const char* op) {
  if (s.n != 1) throw Error(std::string(op) + ": expected a (1,C,H,W) feature map, got " + s.str());
}

/// Sum whose result does not depend on the order of `terms`.
inline double order_free_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(Tensor a, Tensor b) {
  Tape& tape = detail::tape_of(a);
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<double> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record("add", a.shape(), std::move(out), {a, b}, [a, b](Tape& t, std::span<const double> g) {
    if (t.requires_grad(a)) {
      auto ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Tensor sub(Tensor a, Tensor b) {
  Tape& tape = detail::tape_of(a);
  detail::require_same(a.shape(), b.shape(), "sub");
  std::vector<double> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record("sub", a.shape(), std::move(out), {a, b}, [a, b](Tape& t, std::span<const double> g) {
    if (t.requires_grad(a)) {
      auto ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Tensor mul(Tensor a, Tensor b) {
  Tape& tape = detail::tape_of(a);
  detail::require_same(a.shape(), b.shape(), "mul");
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return tape.record("mul", a.shape(), std::move(out), {a, b}, [a, b](Tape& t, std::span<const double> g) {
    auto av = t.value(a);
    auto bv = t.value(b);
    if (t.requires_grad(a)) {
      auto ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Tensor add_scalar(Tensor x, double c) {
  std::vector<double> out(x.value().begin(), x.value().end());
  for (double& v : out) v += c;
  return detail::tape_of(x).record("add_scalar", x.shape(), std::move(out), {x},
                                   [x](Tape& t, std::span<const double> g) {
                                     auto gx = t.grad_mut(x);
                                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                   });
}

inline Tensor scale(Tensor x, double s) {
  std::vector<double> out(x.value().begin(), x.value().end());
  for (double& v : out) v *= s;
  return detail::tape_of(x).record("scale", x.shape(), std::move(out), {x},
                                   [x, s](Tape& t, std::span<const double> g) {
                                     auto gx = t.grad_mut(x);
                                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
                                   });
}

inline Tensor relu(Tensor x) {
  std::vector<double> out(x.value().begin(), x.value().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return detail::tape_of(x).record("relu", x.shape(), std::move(out), {x},
                                   [x](Tape& t, std::span<const double> g) {
                                     auto xv = t.value(x);
                                     auto gx = t.grad_mut(x);
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                       if (xv[i] > 0.0) gx[i] += g[i];
                                   });
}

inline Tensor sigmoid(Tensor x) {
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  std::vector<double> y = out;
  return detail::tape_of(x).record("sigmoid", x.shape(), std::move(out), {x},
                                   [x, y = std::move(y)](Tape& t, std::span<const double> g) {
                                     auto gx = t.grad_mut(x);
                                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
                                   });
}

inline Tensor sum(Tensor x) {
  auto xv = x.value();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  return detail::tape_of(x).record("sum", Shape::flat(1), {s}, {x}, [x](Tape& t, std::span<const double> g) {
    auto gx = t.grad_mut(x);
    for (double& v : gx) v += g[0];
  });
}

/// Same values under a new shape of equal size.
inline Tensor reshape(Tensor x, Shape shape) {
  if (shape.size() != x.shape().size()) throw Error("reshape: size mismatch " + x.shape().str() + " -> " + shape.str());
  std::vector<double> out(x.value().begin(), x.value().end());
  return detail::tape_of(x).record("reshape", shape, std::move(out), {x}, [x](Tape& t, std::span<const double> g) {
    auto gx = t.grad_mut(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Tensor flatten(Tensor x) { return reshape(x, Shape::flat(static_cast<int>(x.shape().size()))); }

// ---------------------------------------------------------------------------
// Row-wise and vector ops
// ---------------------------------------------------------------------------

/// Softmax along the last dimension, with max subtraction.
inline Tensor softmax_rows(Tensor x) {
  const int len = x.shape().w;
  if (len < 1) throw Error("softmax_rows: empty rows");
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < xv.size(); r += static_cast<std::size_t>(len)) {
    double mx = xv[r];
    for (int j = 1; j < len; ++j) mx = std::max(mx, xv[r + j]);
    double z = 0.0;
    for (int j = 0; j < len; ++j) z += (out[r + j] = std::exp(xv[r + j] - mx));
    for (int j = 0; j < len; ++j) out[r + j] /= z;
  }
  std::vector<double> y = out;
  return detail::tape_of(x).record(
      "softmax_rows", x.shape(), std::move(out), {x}, [x, len, y = std::move(y)](Tape& t, std::span<const double> g) {
        auto gx = t.grad_mut(x);
        for (std::size_t r = 0; r < g.size(); r += static_cast<std::size_t>(len)) {
          double dot = 0.0;
          for (int j = 0; j < len; ++j) dot += g[r + j] * y[r + j];
          for (int j = 0; j < len; ++j) gx[r + j] += y[r + j] * (g[r + j] - dot);
        }
      });
}

/// y = W x + b for flat x; weight shaped (1,1,D_out,D_in), bias flat D_out.
inline Tensor linear(Tensor x, Tensor weight, Tensor bias) {
  const int din = static_cast<int>(x.shape().size());
  const Shape ws = weight.shape();
  const int dout = ws.h;
  if (ws.n != 1 || ws.c != 1 || ws.w != din) throw Error("linear: weight " + ws.str() + " incompatible with input");
  if (static_cast<int>(bias.shape().size()) != dout) throw Error("linear: bias size mismatch");
  auto xv = x.value();
  auto wv = weight.value();
  auto bv = bias.value();
  std::vector<double> out(static_cast<std::size_t>(dout));
  for (int o = 0; o < dout; ++o) {
    double s = bv[o];
    const double* row = wv.data() + static_cast<std::size_t>(o) * din;
    for (int i = 0; i < din; ++i) s += row[i] * xv[i];
    out[o] = s;
  }
  return detail::tape_of(x).record(
      "linear", Shape::flat(dout), std::move(out), {x, weight, bias},
      [x, weight, bias, din, dout](Tape& t, std::span<const double> g) {
        auto xv = t.value(x);
        auto wv = t.value(weight);
        if (t.requires_grad(x)) {
          auto gx = t.grad_mut(x);
          for (int o = 0; o < dout; ++o) {
            const double* row = wv.data() + static_cast<std::size_t>(o) * din;
            for (int i = 0; i < din; ++i) gx[i] += row[i] * g[o];
          }
        }
        if (t.requires_grad(weight)) {
          auto gw = t.grad_mut(weight);
          for (int o = 0; o < dout; ++o)
            for (int i = 0; i < din; ++i) gw[static_cast<std::size_t>(o) * din + i] += g[o] * xv[i];
        }
        if (t.requires_grad(bias)) {
          auto gb = t.grad_mut(bias);
          for (int o = 0; o < dout; ++o) gb[o] += g[o];
        }
      });
}

namespace detail {

inline void normalize_rows_forward(std::span<const double> x, int len, std::vector<double>& out,
                                   std::vector<double>& norms) {
  const std::size_t rows = x.size() / static_cast<std::size_t>(len);
  out.assign(x.size(), 0.0);
  norms.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t off = r * static_cast<std::size_t>(len);
    double ss = 0.0;
    for (int j = 0; j < len; ++j) ss += x[off + j] * x[off + j];
    const double n = std::sqrt(ss);
    norms[r] = n;
    if (n > 0.0)
      for (int j = 0; j < len; ++j) out[off + j] = x[off + j] / n;
  }
}

inline Tensor normalize_rows(Tensor x, int len, const char* op, bool* degenerate) {
  std::vector<double> out, norms;
  normalize_rows_forward(x.value(), len, out, norms);
  if (degenerate) *degenerate = std::any_of(norms.begin(), norms.end(), [](double n) { return !(n > 0.0); });
  std::vector<double> y = out;
  return tape_of(x).record(op, x.shape(), std::move(out), {x},
                           [x, len, y = std::move(y), norms = std::move(norms)](Tape& t, std::span<const double> g) {
                             auto gx = t.grad_mut(x);
                             for (std::size_t r = 0; r < norms.size(); ++r) {
                               if (!(norms[r] > 0.0)) continue;
                               const std::size_t off = r * static_cast<std::size_t>(len);
                               double dot = 0.0;
                               for (int j = 0; j < len; ++j) dot += y[off + j] * g[off + j];
                               for (int j = 0; j < len; ++j) gx[off + j] += (g[off + j] - y[off + j] * dot) / norms[r];
                             }
                           });
}

}  // namespace detail

/// x / ||x||. A zero input yields a zero output and sets `*degenerate`.
inline Tensor l2_normalize(Tensor x, bool* degenerate = nullptr) {
  return detail::normalize_rows(x, static_cast<int>(x.shape().size()), "l2_normalize", degenerate);
}

/// Unit-normalizes every row along the last dimension (NetVLAD intra-norm).
inline Tensor l2_normalize_rows(Tensor x, bool* degenerate = nullptr) {
  return detail::normalize_rows(x, x.shape().w, "l2_normalize_rows", degenerate);
}

/// Euclidean distance between equally sized tensors; gradient 0 at a == b.
inline Tensor euclidean_distance(Tensor a, Tensor b) {
  if (a.shape().size() != b.shape().size()) throw Error("euclidean_distance: dimension mismatch");
  auto av = a.value();
  auto bv = b.value();
  double ss = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) ss += (av[i] - bv[i]) * (av[i] - bv[i]);
  const double d = std::sqrt(ss);
  return detail::tape_of(a).record("euclidean_distance", Shape::flat(1), {d}, {a, b},
                                   [a, b, d](Tape& t, std::span<const double> g) {
                                     if (!(d > 0.0)) return;
                                     auto av = t.value(a);
                                     auto bv = t.value(b);
                                     const double s = g[0] / d;
                                     if (t.requires_grad(a)) {
                                       auto ga = t.grad_mut(a);
                                       for (std::size_t i = 0; i < av.size(); ++i) ga[i] += s * (av[i] - bv[i]);
                                     }
                                     if (t.requires_grad(b)) {
                                       auto gb = t.grad_mut(b);
                                       for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= s * (av[i] - bv[i]);
                                     }
                                   });
}

// ---------------------------------------------------------------------------
// Spatial ops on (1, C, H, W) maps; W is the cyclic azimuth axis.
// ---------------------------------------------------------------------------

namespace detail {

/// sum_j a[j] * b[j * stride] with four interleaved partial sums.
inline double strided_dot(const double* a, const double* b, int n, int stride) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  int j = 0;
  if (stride == 1) {
    for (; j + 4 <= n; j += 4)
      for (int l = 0; l < 4; ++l) acc[l] += a[j + l] * b[j + l];
  } else {
    for (; j + 4 <= n; j += 4)
      for (int l = 0; l < 4; ++l) acc[l] += a[j + l] * b[(j + l) * stride];
  }
  for (; j < n; ++j) acc[0] += a[j] * b[j * stride];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace detail

inline int conv_output_height(int h, int stride_h) { return (h + stride_h - 1) / stride_h; }

/// Cross-correlation with circular padding along W and zero padding along H,
/// both sized for "same" output before striding. Kernel (C_out, C_in, k_h,
/// k_w) with odd sides; optional bias of C_out entries.
inline Tensor conv2d_circular(Tensor x, Tensor kernel, Tensor bias, int stride_h, int stride_w) {
  const Shape xs = x.shape();
  const Shape ks = kernel.shape();
  detail::require_feature(xs, "conv2d_circular");
  const int cin = xs.c, h = xs.h, w = xs.w;
  const int cout = ks.n, kh = ks.h, kw = ks.w;
  if (ks.c != cin) throw Error("conv2d_circular: kernel " + ks.str() + " does not match input " + xs.str());
  if (kh % 2 == 0 || kw % 2 == 0) throw Error("conv2d_circular: kernel sides must be odd");
  if (stride_h < 1 || stride_w < 1 || w % stride_w != 0) {
    throw Error("conv2d_circular: width " + std::to_string(w) + " not divisible by stride " + std::to_string(stride_w));
  }
  if (bias.defined() && static_cast<int>(bias.shape().size()) != cout) throw Error("conv2d_circular: bias size mismatch");
  const int ho = conv_output_height(h, stride_h);
  const int wo = w / stride_w;
  const int ph = kh / 2, pw = kw / 2;
  const int wp = w + 2 * pw;

  // Input rows with pw wrapped columns on each side; output column j at
  // kernel column b reads padded column j * stride_w + b.
  auto xv = x.value();
  std::vector<double> xp(static_cast<std::size_t>(cin) * h * wp);
  for (int r = 0; r < cin * h; ++r) {
    const double* src = xv.data() + static_cast<std::size_t>(r) * w;
    double* dst = xp.data() + static_cast<std::size_t>(r) * wp;
    for (int q = 0; q < wp; ++q) dst[q] = src[((q - pw) % w + w) % w];
  }

  auto kv = kernel.value();
  std::vector<double> out(static_cast<std::size_t>(cout) * ho * wo, 0.0);
  if (bias.defined()) {
    auto bv = bias.value();
    for (int o = 0; o < cout; ++o)
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(o) * ho * wo, ho * wo, bv[o]);
  }
  for (int o = 0; o < cout; ++o) {
    for (int c = 0; c < cin; ++c) {
      for (int a = 0; a < kh; ++a) {
        for (int i = 0; i < ho; ++i) {
          const int row = i * stride_h + a - ph;
          if (row < 0 || row >= h) continue;
          const double* xrow = xp.data() + (static_cast<std::size_t>(c) * h + row) * wp;
          double* orow = out.data() + (static_cast<std::size_t>(o) * ho + i) * wo;
          for (int b = 0; b < kw; ++b) {
            const double k = kv[((static_cast<std::size_t>(o) * cin + c) * kh + a) * kw + b];
            const double* src = xrow + b;
            if (stride_w == 1) {
              for (int j = 0; j < wo; ++j) orow[j] += k * src[j];
            } else {
              for (int j = 0; j < wo; ++j) orow[j] += k * src[j * stride_w];
            }
          }
        }
      }
    }
  }

  std::vector<Tensor> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::tape_of(x).record(
      "conv2d_circular", Shape::chw(cout, ho, wo), std::move(out), inputs,
      [x, kernel, bias, cin, h, w, cout, kh, kw, ho, wo, ph, pw, wp, stride_h, stride_w, xp = std::move(xp)](
          Tape& t, std::span<const double> g) {
        auto kv = t.value(kernel);
        const bool gx_on = t.requires_grad(x);
        const bool gk_on = t.requires_grad(kernel);
        std::vector<double> gxp(gx_on ? xp.size() : 0, 0.0);
        std::span<double> gk = gk_on ? t.grad_mut(kernel) : std::span<double>();
        for (int o = 0; o < cout; ++o) {
          for (int c = 0; c < cin; ++c) {
            for (int a = 0; a < kh; ++a) {
              for (int i = 0; i < ho; ++i) {
                const int row = i * stride_h + a - ph;
                if (row < 0 || row >= h) continue;
                const std::size_t xoff = (static_cast<std::size_t>(c) * h + row) * wp;
                const double* grow = g.data() + (static_cast<std::size_t>(o) * ho + i) * wo;
                for (int b = 0; b < kw; ++b) {
                  const std::size_t kidx = ((static_cast<std::size_t>(o) * cin + c) * kh + a) * kw + b;
                  if (gx_on) {
                    const double k = kv[kidx];
                    double* dst = gxp.data() + xoff + b;
                    if (stride_w == 1) {
                      for (int j = 0; j < wo; ++j) dst[j] += k * grow[j];
                    } else {
                      for (int j = 0; j < wo; ++j) dst[j * stride_w] += k * grow[j];
                    }
                  }
                  if (gk_on) {
                    const double* src = xp.data() + xoff + b;
                    gk[kidx] += detail::strided_dot(grow, src, wo, stride_w);
                  }
                }
              }
            }
          }
        }
        if (gx_on) {
          auto gx = t.grad_mut(x);
          for (int r = 0; r < cin * h; ++r) {
            const double* src = gxp.data() + static_cast<std::size_t>(r) * wp;
            double* dst = gx.data() + static_cast<std::size_t>(r) * w;
            for (int q = 0; q < wp; ++q) dst[((q - pw) % w + w) % w] += src[q];
          }
        }
        if (bias.defined() && t.requires_grad(bias)) {
          auto gb = t.grad_mut(bias);
          for (int o = 0; o < cout; ++o) {
            const double* go = g.data() + static_cast<std::size_t>(o) * ho * wo;
            for (int p = 0; p < ho * wo; ++p) gb[o] += go[p];
          }
        }
      });
}

inline Tensor conv2d_circular(Tensor x, Tensor kernel, int stride_h = 1, int stride_w = 1) {
  return conv2d_circular(x, kernel, Tensor(), stride_h, stride_w);
}

inline constexpr double kInstanceNormEps = 1e-5;

/// Per-channel spatial normalization followed by a learnable scale and bias
/// (C entries each). The spatial mean and variance are accumulated per column
/// and the column totals summed order-free, so a cyclic shift of the columns
/// reproduces the statistics bit for bit.
inline Tensor instance_norm_affine(Tensor x, Tensor gamma, Tensor beta) {
  const Shape xs = x.shape();
  detail::require_feature(xs, "instance_norm_affine");
  const int c = xs.c, h = xs.h, w = xs.w;
  const int n = h * w;
  if (n < 2) throw Error("instance_norm_affine: needs at least 2 spatial positions");
  if (static_cast<int>(gamma.shape().size()) != c || static_cast<int>(beta.shape().size()) != c) {
    throw Error("instance_norm_affine: affine parameter size mismatch");
  }
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  std::vector<double> xhat(xv.size()), out(xv.size()), inv_std(static_cast<std::size_t>(c));
  std::vector<double> col(static_cast<std::size_t>(w));
  const double eps2 = kInstanceNormEps * kInstanceNormEps;
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = xv.data() + static_cast<std::size_t>(ch) * n;
    for (int j = 0; j < w; ++j) {
      double s = 0.0;
      for (int i = 0; i < h; ++i) s += xc[i * w + j];
      col[j] = s;
    }
    const double mean = detail::order_free_sum(col) / n;
    for (int j = 0; j < w; ++j) {
      double s = 0.0;
      for (int i = 0; i < h; ++i) s += (xc[i * w + j] - mean) * (xc[i * w + j] - mean);
      col[j] = s;
    }
    const double var = detail::order_free_sum(col) / n;
    const double inv = 1.0 / std::sqrt(var + eps2);
    inv_std[ch] = inv;
    for (int p = 0; p < n; ++p) {
      const std::size_t idx = static_cast<std::size_t>(ch) * n + p;
      xhat[idx] = (xc[p] - mean) * inv;
      out[idx] = gv[ch] * xhat[idx] + bv[ch];
    }
  }
  return detail::tape_of(x).record(
      "instance_norm_affine", xs, std::move(out), {x, gamma, beta},
      [x, gamma, beta, c, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                   std::span<const double> g) {
        auto gv = t.value(gamma);
        const bool gx_on = t.requires_grad(x);
        std::span<double> gx = gx_on ? t.grad_mut(x) : std::span<double>();
        std::span<double> gg = t.requires_grad(gamma) ? t.grad_mut(gamma) : std::span<double>();
        std::span<double> gb = t.requires_grad(beta) ? t.grad_mut(beta) : std::span<double>();
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = static_cast<std::size_t>(ch) * n;
          double sum_g = 0.0, sum_gx = 0.0;
          for (int p = 0; p < n; ++p) {
            sum_g += g[off + p];
            sum_gx += g[off + p] * xhat[off + p];
          }
          if (!gg.empty()) gg[ch] += sum_gx;
          if (!gb.empty()) gb[ch] += sum_g;
          if (gx_on) {
            const double mg = gv[ch] * sum_g / n;
            const double mgx = gv[ch] * sum_gx / n;
            for (int p = 0; p < n; ++p) {
              gx[off + p] += inv_std[ch] * (gv[ch] * g[off + p] - mg - xhat[off + p] * mgx);
            }
          }
        }
      });
}

/// Column-local scaled dot-product attention. For each azimuth column w and
/// head, rows of Q(w) attend over rows of K(w) and mix rows of V(w); channels
/// are split evenly across heads and logits are scaled by sqrt(C / heads).
inline Tensor azimuth_attention(Tensor q, Tensor k, Tensor v, int heads = 1) {
  const Shape qs = q.shape(), ks = k.shape(), vs = v.shape();
  detail::require_feature(qs, "azimuth_attention");
  detail::require_feature(ks, "azimuth_attention");
  detail::require_same(ks, vs, "azimuth_attention (K vs V)");
  if (qs.c != ks.c || qs.w != ks.w) throw Error("azimuth_attention: Q " + qs.str() + " incompatible with K " + ks.str());
  if (heads < 1 || qs.c % heads != 0) throw Error("azimuth_attention: channels not divisible by heads");
  const int c = qs.c, hq = qs.h, hk = ks.h, w = qs.w;
  const int dh = c / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qv = q.value();
  auto kv = k.value();
  auto vv = v.value();
  auto qi = [&](int ch, int row, int col) { return (static_cast<std::size_t>(ch) * hq + row) * w + col; };
  auto ki = [&](int ch, int row, int col) { return (static_cast<std::size_t>(ch) * hk + row) * w + col; };

  // probs[((head * w + col) * hq + i) * hk + j]
  std::vector<double> probs(static_cast<std::size_t>(heads) * w * hq * hk);
  std::vector<double> out(qv.size(), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(hk));
  for (int hd = 0; hd < heads; ++hd) {
    const int c0 = hd * dh;
    for (int col = 0; col < w; ++col) {
      for (int i = 0; i < hq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < hk; ++j) {
          double s = 0.0;
          for (int ch = c0; ch < c0 + dh; ++ch) s += qv[qi(ch, i, col)] * kv[ki(ch, j, col)];
          logits[j] = s * inv_sqrt;
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (int j = 0; j < hk; ++j) z += (logits[j] = std::exp(logits[j] - mx));
        double* p = probs.data() + ((static_cast<std::size_t>(hd) * w + col) * hq + i) * hk;
        for (int j = 0; j < hk; ++j) p[j] = logits[j] / z;
        for (int ch = c0; ch < c0 + dh; ++ch) {
          double s = 0.0;
          for (int j = 0; j < hk; ++j) s += p[j] * vv[ki(ch, j, col)];
          out[qi(ch, i, col)] = s;
        }
      }
    }
  }
  return detail::tape_of(q).record(
      "azimuth_attention", qs, std::move(out), {q, k, v},
      [q, k, v, hq, hk, w, heads, dh, inv_sqrt, probs = std::move(probs)](Tape& t, std::span<const double> g) {
        auto qv = t.value(q);
        auto kv = t.value(k);
        auto vv = t.value(v);
        std::span<double> gq = t.requires_grad(q) ? t.grad_mut(q) : std::span<double>();
        std::span<double> gk = t.requires_grad(k) ? t.grad_mut(k) : std::span<double>();
        std::span<double> gv = t.requires_grad(v) ? t.grad_mut(v) : std::span<double>();
        auto qi = [&](int ch, int row, int col) { return (static_cast<std::size_t>(ch) * hq + row) * w + col; };
        auto ki = [&](int ch, int row, int col) { return (static_cast<std::size_t>(ch) * hk + row) * w + col; };
        std::vector<double> dp(static_cast<std::size_t>(hk));
        for (int hd = 0; hd < heads; ++hd) {
          const int c0 = hd * dh;
          for (int col = 0; col < w; ++col) {
            for (int i = 0; i < hq; ++i) {
              const double* p = probs.data() + ((static_cast<std::size_t>(hd) * w + col) * hq + i) * hk;
              double dot = 0.0;
              for (int j = 0; j < hk; ++j) {
                double s = 0.0;
                for (int ch = c0; ch < c0 + dh; ++ch) s += g[qi(ch, i, col)] * vv[ki(ch, j, col)];
                dp[j] = s;
                dot += s * p[j];
              }
              for (int j = 0; j < hk; ++j) {
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                for (int ch = c0; ch < c0 + dh; ++ch) {
                  if (!gq.empty()) gq[qi(ch, i, col)] += ds * kv[ki(ch, j, col)];
                  if (!gk.empty()) gk[ki(ch, j, col)] += ds * qv[qi(ch, i, col)];
                  if (!gv.empty()) gv[ki(ch, j, col)] += p[j] * g[qi(ch, i, col)];
                }
              }
            }
          }
        }
      });
}

/// Averages every column over H: (1,C,H,W) -> (1,C,1,W).
inline Tensor mean_pool_height(Tensor x) {
  const Shape xs = x.shape();
  detail::require_feature(xs, "mean_pool_height");
  const int c = xs.c, h = xs.h, w = xs.w;
  auto xv = x.value();
  std::vector<double> out(static_cast<std::size_t>(c) * w, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int j = 0; j < w; ++j) {
      double s = 0.0;
      for (int i = 0; i < h; ++i) s += xv[(static_cast<std::size_t>(ch) * h + i) * w + j];
      out[static_cast<std::size_t>(ch) * w + j] = s / h;
    }
  return detail::tape_of(x).record("mean_pool_height", Shape::chw(c, 1, w), std::move(out), {x},
                                   [x, c, h, w](Tape& t, std::span<const double> g) {
                                     auto gx = t.grad_mut(x);
                                     for (int ch = 0; ch < c; ++ch)
                                       for (int i = 0; i < h; ++i)
                                         for (int j = 0; j < w; ++j)
                                           gx[(static_cast<std::size_t>(ch) * h + i) * w + j] +=
                                               g[static_cast<std::size_t>(ch) * w + j] / h;
                                   });
}

/// Concatenates feature maps with equal C and H along W.
inline Tensor concat_width(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error("concat_width: no inputs");
  const int c = parts[0].shape().c, h = parts[0].shape().h;
  int total = 0;
  for (const Tensor& p : parts) {
    detail::require_feature(p.shape(), "concat_width");
    if (p.shape().c != c || p.shape().h != h) throw Error("concat_width: C/H mismatch");
    total += p.shape().w;
  }
  std::vector<double> out(static_cast<std::size_t>(c) * h * total);
  int off = 0;
  std::vector<int> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const int pw = p.shape().w;
    auto pv = p.value();
    for (int r = 0; r < c * h; ++r)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r) * pw, pw,
                  out.begin() + static_cast<std::ptrdiff_t>(r) * total + off);
    off += pw;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return detail::tape_of(parts[0]).record(
      "concat_width", Shape::chw(c, h, total), std::move(out), inputs,
      [inputs, offsets, c, h, total](Tape& t, std::span<const double> g) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (!t.requires_grad(inputs[k])) continue;
          const int pw = t.shape(inputs[k]).w;
          auto gp = t.grad_mut(inputs[k]);
          for (int r = 0; r < c * h; ++r)
            for (int j = 0; j < pw; ++j)
              gp[static_cast<std::size_t>(r) * pw + j] += g[static_cast<std::size_t>(r) * total + offsets[k] + j];
        }
      });
}

/// NetVLAD aggregation over the columns of x (1,S,1,N): soft assignment
/// a_k = softmax_k(w_k . x + b_k), residual sums V_k = sum_x a_k(x)(x - c_k).
/// assign_w and centers are (1,1,K,S), assign_b flat K; output (1,1,K,S).
/// Columns are summed in a canonical (lexicographic) order, so permuting the
/// input columns leaves the output unchanged bit for bit.
inline Tensor netvlad_aggregate(Tensor x, Tensor assign_w, Tensor assign_b, Tensor centers) {
  const Shape xs = x.shape();
  detail::require_feature(xs, "netvlad_aggregate");
  if (xs.h != 1) throw Error("netvlad_aggregate: expected pooled columns (1,S,1,N)");
  const int s = xs.c, n = xs.w;
  const int k = assign_w.shape().h;
  if (assign_w.shape() != Shape::matrix(k, s) || centers.shape() != Shape::matrix(k, s) ||
      static_cast<int>(assign_b.shape().size()) != k) {
    throw Error("netvlad_aggregate: parameter shapes incompatible with " + xs.str());
  }
  auto xv = x.value();
  auto wv = assign_w.value();
  auto bv = assign_b.value();
  auto cv = centers.value();
  auto xat = [&](int d, int col) { return xv[static_cast<std::size_t>(d) * n + col]; };

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    for (int d = 0; d < s; ++d) {
      if (xat(d, a) != xat(d, b)) return xat(d, a) < xat(d, b);
    }
    return false;
  });

  // assign[kk * n + col]
  std::vector<double> assign(static_cast<std::size_t>(k) * n);
  std::vector<double> z(static_cast<std::size_t>(k));
  for (int col = 0; col < n; ++col) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int kk = 0; kk < k; ++kk) {
      double acc = bv[kk];
      for (int d = 0; d < s; ++d) acc += wv[static_cast<std::size_t>(kk) * s + d] * xat(d, col);
      z[kk] = acc;
      mx = std::max(mx, acc);
    }
    double tot = 0.0;
    for (int kk = 0; kk < k; ++kk) tot += (z[kk] = std::exp(z[kk] - mx));
    for (int kk = 0; kk < k; ++kk) assign[static_cast<std::size_t>(kk) * n + col] = z[kk] / tot;
  }
  std::vector<double> out(static_cast<std::size_t>(k) * s, 0.0);
  for (int kk = 0; kk < k; ++kk)
    for (int d = 0; d < s; ++d) {
      const double center = cv[static_cast<std::size_t>(kk) * s + d];
      double acc = 0.0;
      for (int col : order) acc += assign[static_cast<std::size_t>(kk) * n + col] * (xat(d, col) - center);
      out[static_cast<std::size_t>(kk) * s + d] = acc;
    }

  return detail::tape_of(x).record(
      "netvlad_aggregate", Shape::matrix(k, s), std::move(out), {x, assign_w, assign_b, centers},
      [x, assign_w, assign_b, centers, s, n, k, assign = std::move(assign)](Tape& t, std::span<const double> g) {
        auto xv = t.value(x);
        auto wv = t.value(assign_w);
        auto cv = t.value(centers);
        auto xat = [&](int d, int col) { return xv[static_cast<std::size_t>(d) * n + col]; };
        std::span<double> gx = t.requires_grad(x) ? t.grad_mut(x) : std::span<double>();
        std::span<double> gw = t.requires_grad(assign_w) ? t.grad_mut(assign_w) : std::span<double>();
        std::span<double> gb = t.requires_grad(assign_b) ? t.grad_mut(assign_b) : std::span<double>();
        if (t.requires_grad(centers)) {
          auto gc = t.grad_mut(centers);
          for (int kk = 0; kk < k; ++kk) {
            double mass = 0.0;
            for (int col = 0; col < n; ++col) mass += assign[static_cast<std::size_t>(kk) * n + col];
            for (int d = 0; d < s; ++d) gc[static_cast<std::size_t>(kk) * s + d] -= mass * g[static_cast<std::size_t>(kk) * s + d];
          }
        }
        std::vector<double> da(static_cast<std::size_t>(k));
        for (int col = 0; col < n; ++col) {
          double mix = 0.0;
          for (int kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            for (int d = 0; d < s; ++d)
              acc += g[static_cast<std::size_t>(kk) * s + d] * (xat(d, col) - cv[static_cast<std::size_t>(kk) * s + d]);
            da[kk] = acc;
            mix += assign[static_cast<std::size_t>(kk) * n + col] * acc;
          }
          for (int kk = 0; kk < k; ++kk) {
            const double a = assign[static_cast<std::size_t>(kk) * n + col];
            const double dz = a * (da[kk] - mix);
            if (!gb.empty()) gb[kk] += dz;
            for (int d = 0; d < s; ++d) {
              const std::size_t kd = static_cast<std::size_t>(kk) * s + d;
              if (!gw.empty()) gw[kd] += dz * xat(d, col);
              if (!gx.empty()) gx[static_cast<std::size_t>(d) * n + col] += a * g[kd] + dz * wv[kd];
            }
          }
        }
      });
}

/// Cyclic shift of a (.., .., .., W) value buffer along W: out[.., u] = in[.., u - k].
inline std::vector<double> shift_width(std::span<const double> values, const Shape& shape, long k) {
  const long w = shape.w;
  const long s = ((k % w) + w) % w;
  std::vector<double> out(values.size());
  for (std::size_t r = 0; r < values.size(); r += static_cast<std::size_t>(w))
    for (long u = 0; u < w; ++u) out[r + static_cast<std::size_t>(u)] = values[r + static_cast<std::size_t>((u - s + w) % w)];
  return out;
}

}  // namespace mptf::ad
