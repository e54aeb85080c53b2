#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Graph is an append-only tape: every op records the forward value and a
// backward closure. Node inputs always reference earlier nodes, so the tape
// is topologically ordered by construction and backward() is a single
// reverse sweep that visits each node exactly once. Tensors handed to the
// graph are copied; nothing reachable from a graph is mutated afterwards.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "gvs/parallel.hpp"
#include "gvs/tensor.hpp"

namespace gvs::ad {

using ValueId = std::int32_t;

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// ---- matmul kernels -------------------------------------------------------

inline void matmul_acc(const double* __restrict a, const double* __restrict b,
                       double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
  // c[m,n] += a[m,k] * b[k,n]
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void matmul_at_b_acc(const double* __restrict a, const double* __restrict b,
                            double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
  // c[k,n] += a^T[k,m] * b[m,n], a stored [m,k]
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void matmul_a_bt_acc(const double* __restrict a, const double* __restrict b,
                            double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
  // c[m,k] += a[m,n] * b^T[n,k], b stored [k,n]
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// ---- convolution kernels --------------------------------------------------
//
// Zero padding of k/2 per side ("same" at stride 1), odd kernels only.
// Output extent per axis: (in + 2*(k/2) - k) / stride + 1.

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride) {
  return (in + 2 * (k / 2) - k) / stride + 1;
}

struct Conv3dDims {
  std::size_t cin, X, Y, Z;
  std::size_t cout, kx, ky, kz;
  std::size_t stride;
  std::size_t Xo, Yo, Zo;
};

inline Conv3dDims conv3d_dims(const Tensor& x, const Tensor& w, std::size_t stride) {
  if (x.rank() != 4 || w.rank() != 5)
    throw std::invalid_argument("conv3d: expected input [C,X,Y,Z] and weight [Co,Ci,kx,ky,kz], got " +
                                x.shape_str() + " and " + w.shape_str());
  Conv3dDims d;
  d.cin = x.dim(0); d.X = x.dim(1); d.Y = x.dim(2); d.Z = x.dim(3);
  d.cout = w.dim(0); d.kx = w.dim(2); d.ky = w.dim(3); d.kz = w.dim(4);
  d.stride = stride;
  if (w.dim(1) != d.cin)
    throw std::invalid_argument("conv3d: weight " + w.shape_str() + " does not match input channels " +
                                x.shape_str());
  if (d.kx % 2 == 0 || d.ky % 2 == 0 || d.kz % 2 == 0)
    throw std::invalid_argument("conv3d: even-sized kernel " + w.shape_str());
  d.Xo = conv_out_dim(d.X, d.kx, stride);
  d.Yo = conv_out_dim(d.Y, d.ky, stride);
  d.Zo = conv_out_dim(d.Z, d.kz, stride);
  return d;
}

// Valid output range [lo, hi) of an axis: in-index = out*stride + k_off - pad
// must land inside [0, extent).
inline void conv_axis_range(std::size_t out_extent, std::size_t in_extent, std::size_t k_off,
                            std::size_t pad, std::size_t stride, std::size_t& lo,
                            std::size_t& hi) {
  long base = static_cast<long>(k_off) - static_cast<long>(pad);
  long lo_l = base < 0 ? ((-base + static_cast<long>(stride) - 1) / static_cast<long>(stride)) : 0;
  long hi_l = (static_cast<long>(in_extent) - base + static_cast<long>(stride) - 1) /
              static_cast<long>(stride);
  lo = static_cast<std::size_t>(std::max<long>(lo_l, 0));
  hi = static_cast<std::size_t>(std::clamp<long>(hi_l, lo_l, static_cast<long>(out_extent)));
  if (hi < lo) hi = lo;
}

#if defined(__AVX512F__)
#define GVS_HAVE_AVX512 1
#endif

#ifdef GVS_HAVE_AVX512
// lane z = cur[z-1], lane 0 = prev[7]
inline __m512d shift_right1(__m512d prev, __m512d cur) {
  return _mm512_castsi512_pd(
      _mm512_alignr_epi64(_mm512_castpd_si512(cur), _mm512_castpd_si512(prev), 7));
}
// lane z = cur[z+1], lane 7 = next[0]
inline __m512d shift_left1(__m512d cur, __m512d next) {
  return _mm512_castsi512_pd(
      _mm512_alignr_epi64(_mm512_castpd_si512(next), _mm512_castpd_si512(cur), 1));
}
#endif

// Fast 3x3x3 stride-1 path with compile-time z extent: one pass per output
// row accumulates the full Cin reduction and all 27 taps in registers.
template <int Z>
struct Conv3dFast {
  // acc[Z] += 3-tap z-stencil of row with weights w[3]; row may be null
  // (x/y padding), acc edges drop the out-of-range taps.
  static inline void stencil(double* __restrict acc, const double* __restrict row,
                             const double* __restrict w3) {
    if (!row) return;
    const double w0 = w3[0], w1 = w3[1], w2 = w3[2];
    acc[0] += w1 * row[0] + w2 * row[1];
    for (int z = 1; z < Z - 1; ++z)
      acc[z] += w0 * row[z - 1] + w1 * row[z] + w2 * row[z + 1];
    acc[Z - 1] += w0 * row[Z - 2] + w1 * row[Z - 1];
  }

  static void forward(const Conv3dDims& d, const double* x, const double* w, const double* b,
                      double* y) {
    const std::size_t plane = d.Y * static_cast<std::size_t>(Z);
    const std::size_t chan = d.X * plane;
    parallel_for(d.cout, [&](std::size_t co) {
      for (std::size_t xo = 0; xo < d.Xo; ++xo) {
        for (std::size_t yo = 0; yo < d.Yo; ++yo) {
          double acc[Z];
          for (int z = 0; z < Z; ++z) acc[z] = b[co];
          for (std::size_t ci = 0; ci < d.cin; ++ci) {
            const double* xc = x + ci * chan;
            const double* wc = w + (co * d.cin + ci) * 27;
            for (int dx = 0; dx < 3; ++dx) {
              long xi = static_cast<long>(xo) + dx - 1;
              if (xi < 0 || xi >= static_cast<long>(d.X)) continue;
              for (int dy = 0; dy < 3; ++dy) {
                long yi = static_cast<long>(yo) + dy - 1;
                if (yi < 0 || yi >= static_cast<long>(d.Y)) continue;
                stencil(acc, xc + static_cast<std::size_t>(xi) * plane +
                                 static_cast<std::size_t>(yi) * Z,
                        wc + (dx * 3 + dy) * 3);
              }
            }
          }
          double* yrow = y + ((co * d.Xo + xo) * d.Yo + yo) * Z;
          for (int z = 0; z < Z; ++z) yrow[z] = acc[z];
        }
      }
    });
  }

  // dX[zi] += w0*gy[zi+1] + w1*gy[zi] + w2*gy[zi-1]: same stencil with the
  // z-kernel flipped; x and y offsets flip too.
  static void backward_input(const Conv3dDims& d, const double* w, const double* gy,
                             double* gx) {
    const std::size_t plane = d.Y * static_cast<std::size_t>(Z);
    const std::size_t chan = d.X * plane;
    parallel_for(d.cin, [&](std::size_t ci) {
      for (std::size_t xi = 0; xi < d.X; ++xi) {
        for (std::size_t yi = 0; yi < d.Y; ++yi) {
          double acc[Z] = {};
          for (std::size_t co = 0; co < d.cout; ++co) {
            const double* gyc = gy + co * chan;
            const double* wc = w + (co * d.cin + ci) * 27;
            for (int dx = 0; dx < 3; ++dx) {
              long xo = static_cast<long>(xi) - dx + 1;
              if (xo < 0 || xo >= static_cast<long>(d.Xo)) continue;
              for (int dy = 0; dy < 3; ++dy) {
                long yo = static_cast<long>(yi) - dy + 1;
                if (yo < 0 || yo >= static_cast<long>(d.Yo)) continue;
                const double* wrow = wc + (dx * 3 + dy) * 3;
                double wf[3] = {wrow[2], wrow[1], wrow[0]};
                stencil(acc, gyc + static_cast<std::size_t>(xo) * plane +
                                 static_cast<std::size_t>(yo) * Z,
                        wf);
              }
            }
          }
          double* gxrow = gx + (ci * d.X + xi) * plane + yi * Z;
          for (int z = 0; z < Z; ++z) gxrow[z] += acc[z];
        }
      }
    });
  }

  static void backward_weight(const Conv3dDims& d, const double* x, const double* gy,
                              double* gw) {
    const std::size_t plane = d.Y * static_cast<std::size_t>(Z);
    const std::size_t chan = d.X * plane;
    parallel_for(d.cout, [&](std::size_t co) {
      const double* gyc = gy + co * chan;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const double* xc = x + ci * chan;
        double* gwc = gw + (co * d.cin + ci) * 27;
        for (int dx = 0; dx < 3; ++dx) {
          long xi_off = dx - 1;
          for (int dy = 0; dy < 3; ++dy) {
            long yi_off = dy - 1;
            // vector accumulators over z, reduced once at the end
            double a0[Z] = {}, a1[Z] = {}, a2[Z] = {};
            for (std::size_t xo = 0; xo < d.Xo; ++xo) {
              long xi = static_cast<long>(xo) + xi_off;
              if (xi < 0 || xi >= static_cast<long>(d.X)) continue;
              for (std::size_t yo = 0; yo < d.Yo; ++yo) {
                long yi = static_cast<long>(yo) + yi_off;
                if (yi < 0 || yi >= static_cast<long>(d.Y)) continue;
                const double* __restrict g = gyc + (xo * d.Yo + yo) * Z;
                const double* __restrict r = xc + (static_cast<std::size_t>(xi) * d.Y +
                                                   static_cast<std::size_t>(yi)) * Z;
                for (int z = 1; z < Z; ++z) a0[z] += g[z] * r[z - 1];
                for (int z = 0; z < Z; ++z) a1[z] += g[z] * r[z];
                for (int z = 0; z < Z - 1; ++z) a2[z] += g[z] * r[z + 1];
              }
            }
            double s0 = 0, s1 = 0, s2 = 0;
            for (int z = 0; z < Z; ++z) {
              s0 += a0[z];
              s1 += a1[z];
              s2 += a2[z];
            }
            gwc[(dx * 3 + dy) * 3 + 0] += s0;
            gwc[(dx * 3 + dy) * 3 + 1] += s1;
            gwc[(dx * 3 + dy) * 3 + 2] += s2;
          }
        }
      }
    });
  }
};

#ifdef GVS_HAVE_AVX512
// Z == 8 lives in a single zmm register; the whole Cin x 27-tap reduction of
// one output row stays in registers.
template <>
struct Conv3dFast<8> {
  static void forward(const Conv3dDims& d, const double* x, const double* w, const double* b,
                      double* y) {
    const std::size_t plane = d.Y * 8;
    const std::size_t chan = d.X * plane;
    const __m512d zero = _mm512_setzero_pd();
    const std::size_t co_groups = (d.cout + 1) / 2;
    parallel_for(co_groups, [&](std::size_t grp) {
      const std::size_t co = grp * 2;
      std::size_t tap_off[9], tap_w[9];
      for (std::size_t xo = 0; xo < d.Xo; ++xo) {
        for (std::size_t yo = 0; yo < d.Yo; ++yo) {
          int ntap = 0;
          for (int dx = 0; dx < 3; ++dx) {
            long xi = static_cast<long>(xo) + dx - 1;
            if (xi < 0 || xi >= static_cast<long>(d.X)) continue;
            for (int dy = 0; dy < 3; ++dy) {
              long yi = static_cast<long>(yo) + dy - 1;
              if (yi < 0 || yi >= static_cast<long>(d.Y)) continue;
              tap_off[ntap] = static_cast<std::size_t>(xi) * plane + static_cast<std::size_t>(yi) * 8;
              tap_w[ntap] = static_cast<std::size_t>(dx * 3 + dy) * 3;
              ++ntap;
            }
          }
          const bool pair = co + 1 < d.cout && (co % 2) == 0;
          __m512d acc = _mm512_set1_pd(b[co]);
          __m512d acc2 = pair ? _mm512_set1_pd(b[co + 1]) : _mm512_setzero_pd();
          const double* xc = x;
          const double* wc = w + co * d.cin * 27;
          const std::size_t wnext = d.cin * 27;
          for (std::size_t ci = 0; ci < d.cin; ++ci, xc += chan, wc += 27) {
            for (int t = 0; t < ntap; ++t) {
              const double* wr = wc + tap_w[t];
              __m512d r = _mm512_loadu_pd(xc + tap_off[t]);
              __m512d rr = shift_right1(zero, r);
              __m512d rl = shift_left1(r, zero);
              acc = _mm512_fmadd_pd(_mm512_set1_pd(wr[0]), rr, acc);
              acc = _mm512_fmadd_pd(_mm512_set1_pd(wr[1]), r, acc);
              acc = _mm512_fmadd_pd(_mm512_set1_pd(wr[2]), rl, acc);
              if (pair) {
                const double* wr2 = wr + wnext;
                acc2 = _mm512_fmadd_pd(_mm512_set1_pd(wr2[0]), rr, acc2);
                acc2 = _mm512_fmadd_pd(_mm512_set1_pd(wr2[1]), r, acc2);
                acc2 = _mm512_fmadd_pd(_mm512_set1_pd(wr2[2]), rl, acc2);
              }
            }
          }
          _mm512_storeu_pd(y + ((co * d.Xo + xo) * d.Yo + yo) * 8, acc);
          if (pair) _mm512_storeu_pd(y + (((co + 1) * d.Xo + xo) * d.Yo + yo) * 8, acc2);
        }
      }
    });
  }

  static void backward_input(const Conv3dDims& d, const double* w, const double* gy,
                             double* gx) {
    const std::size_t plane = d.Y * 8;
    const std::size_t chan = d.X * plane;
    const __m512d zero = _mm512_setzero_pd();
    const std::size_t ci_groups = (d.cin + 1) / 2;
    parallel_for(ci_groups, [&](std::size_t grp) {
      const std::size_t ci = grp * 2;
      const bool pair = ci + 1 < d.cin;
      std::size_t tap_off[9], tap_w[9];
      for (std::size_t xi = 0; xi < d.X; ++xi) {
        for (std::size_t yi = 0; yi < d.Y; ++yi) {
          int ntap = 0;
          for (int dx = 0; dx < 3; ++dx) {
            long xo = static_cast<long>(xi) - dx + 1;
            if (xo < 0 || xo >= static_cast<long>(d.Xo)) continue;
            for (int dy = 0; dy < 3; ++dy) {
              long yo = static_cast<long>(yi) - dy + 1;
              if (yo < 0 || yo >= static_cast<long>(d.Yo)) continue;
              tap_off[ntap] = static_cast<std::size_t>(xo) * plane + static_cast<std::size_t>(yo) * 8;
              tap_w[ntap] = static_cast<std::size_t>(dx * 3 + dy) * 3;
              ++ntap;
            }
          }
          double* gxrow = gx + (ci * d.X + xi) * plane + yi * 8;
          double* gxrow2 = gxrow + chan;
          __m512d acc = _mm512_loadu_pd(gxrow);
          __m512d acc2 = pair ? _mm512_loadu_pd(gxrow2) : zero;
          const double* gyc = gy;
          const double* wc = w + ci * 27;
          for (std::size_t co = 0; co < d.cout; ++co, gyc += chan, wc += d.cin * 27) {
            for (int t = 0; t < ntap; ++t) {
              const double* wr = wc + tap_w[t];
              __m512d r = _mm512_loadu_pd(gyc + tap_off[t]);
              __m512d rr = shift_right1(zero, r);
              __m512d rl = shift_left1(r, zero);
              // flipped kernel
              acc = _mm512_fmadd_pd(_mm512_set1_pd(wr[2]), rr, acc);
              acc = _mm512_fmadd_pd(_mm512_set1_pd(wr[1]), r, acc);
              acc = _mm512_fmadd_pd(_mm512_set1_pd(wr[0]), rl, acc);
              if (pair) {
                const double* wr2 = wr + 27;
                acc2 = _mm512_fmadd_pd(_mm512_set1_pd(wr2[2]), rr, acc2);
                acc2 = _mm512_fmadd_pd(_mm512_set1_pd(wr2[1]), r, acc2);
                acc2 = _mm512_fmadd_pd(_mm512_set1_pd(wr2[0]), rl, acc2);
              }
            }
          }
          _mm512_storeu_pd(gxrow, acc);
          if (pair) _mm512_storeu_pd(gxrow2, acc2);
        }
      }
    });
  }

  static void backward_weight(const Conv3dDims& d, const double* x, const double* gy,
                              double* gw) {
    const std::size_t plane = d.Y * 8;
    const std::size_t chan = d.X * plane;
    const __m512d zero = _mm512_setzero_pd();
    parallel_for(d.cout, [&](std::size_t co) {
      const double* gyc = gy + co * chan;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const double* xc = x + ci * chan;
        double* gwc = gw + (co * d.cin + ci) * 27;
        for (int dx = 0; dx < 3; ++dx) {
          for (int dy = 0; dy < 3; ++dy) {
            __m512d a0 = zero, a1 = zero, a2 = zero;
            for (std::size_t xo = 0; xo < d.Xo; ++xo) {
              long xi = static_cast<long>(xo) + dx - 1;
              if (xi < 0 || xi >= static_cast<long>(d.X)) continue;
              for (std::size_t yo = 0; yo < d.Yo; ++yo) {
                long yi = static_cast<long>(yo) + dy - 1;
                if (yi < 0 || yi >= static_cast<long>(d.Y)) continue;
                __m512d g = _mm512_loadu_pd(gyc + (xo * d.Yo + yo) * 8);
                __m512d r = _mm512_loadu_pd(xc + (static_cast<std::size_t>(xi) * d.Y +
                                                  static_cast<std::size_t>(yi)) * 8);
                a0 = _mm512_fmadd_pd(g, shift_right1(zero, r), a0);
                a1 = _mm512_fmadd_pd(g, r, a1);
                a2 = _mm512_fmadd_pd(g, shift_left1(r, zero), a2);
              }
            }
            gwc[(dx * 3 + dy) * 3 + 0] += _mm512_reduce_add_pd(a0);
            gwc[(dx * 3 + dy) * 3 + 1] += _mm512_reduce_add_pd(a1);
            gwc[(dx * 3 + dy) * 3 + 2] += _mm512_reduce_add_pd(a2);
          }
        }
      }
    });
  }
};
#endif  // GVS_HAVE_AVX512

inline bool conv3d_fast_eligible(const Conv3dDims& d, std::size_t stride) {
  return stride == 1 && d.kx == 3 && d.ky == 3 && d.kz == 3 &&
         (d.Z == 8 || d.Z == 4 || d.Z == 16) && d.Zo == d.Z;
}

inline Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                             std::size_t stride) {
  Conv3dDims d = conv3d_dims(x, w, stride);
  if (b.rank() != 1 || b.dim(0) != d.cout)
    throw std::invalid_argument("conv3d: bias " + b.shape_str() + " does not match Cout");
  Tensor y({d.cout, d.Xo, d.Yo, d.Zo});
  if (conv3d_fast_eligible(d, stride)) {
    if (d.Z == 8)
      Conv3dFast<8>::forward(d, x.data(), w.data(), b.data(), y.data());
    else if (d.Z == 4)
      Conv3dFast<4>::forward(d, x.data(), w.data(), b.data(), y.data());
    else
      Conv3dFast<16>::forward(d, x.data(), w.data(), b.data(), y.data());
    return y;
  }
  const std::size_t px = d.kx / 2, py = d.ky / 2, pz = d.kz / 2;
  const bool fast = stride == 1 && d.kz == 3 && d.Z >= 2;  // fused z-stencil
  parallel_for(d.cout, [&](std::size_t co) {
    double* yc = y.data() + co * d.Xo * d.Yo * d.Zo;
    std::fill(yc, yc + d.Xo * d.Yo * d.Zo, b[co]);
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      const double* xc = x.data() + ci * d.X * d.Y * d.Z;
      const double* wc = w.data() + (co * d.cin + ci) * d.kx * d.ky * d.kz;
      for (std::size_t dx = 0; dx < d.kx; ++dx) {
        std::size_t xlo, xhi;
        conv_axis_range(d.Xo, d.X, dx, px, stride, xlo, xhi);
        for (std::size_t dy = 0; dy < d.ky; ++dy) {
          std::size_t ylo, yhi;
          conv_axis_range(d.Yo, d.Y, dy, py, stride, ylo, yhi);
          const double* wrow = wc + (dx * d.ky + dy) * d.kz;
          for (std::size_t xo = xlo; xo < xhi; ++xo) {
            std::size_t xi = xo * stride + dx - px;
            for (std::size_t yo = ylo; yo < yhi; ++yo) {
              std::size_t yi = yo * stride + dy - py;
              double* __restrict yrow = yc + (xo * d.Yo + yo) * d.Zo;
              const double* __restrict xrow = xc + (xi * d.Y + yi) * d.Z;
              if (fast) {
                const double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                yrow[0] += w1 * xrow[0] + w2 * xrow[1];
                for (std::size_t zo = 1; zo + 1 < d.Zo; ++zo)
                  yrow[zo] += w0 * xrow[zo - 1] + w1 * xrow[zo] + w2 * xrow[zo + 1];
                if (d.Zo >= 2)
                  yrow[d.Zo - 1] += w0 * xrow[d.Zo - 2] + w1 * xrow[d.Zo - 1] +
                                    (d.Zo < d.Z ? w2 * xrow[d.Zo] : 0.0);
              } else {
                for (std::size_t dz = 0; dz < d.kz; ++dz) {
                  const double wv = wrow[dz];
                  std::size_t zlo, zhi;
                  conv_axis_range(d.Zo, d.Z, dz, pz, stride, zlo, zhi);
                  for (std::size_t zo = zlo; zo < zhi; ++zo)
                    yrow[zo] += wv * xrow[zo * stride + dz - pz];
                }
              }
            }
          }
        }
      }
    }
  });
  return y;
}

inline void conv3d_backward(const Tensor& x, const Tensor& w, std::size_t stride,
                            const Tensor& gy, Tensor* gx, Tensor* gw, Tensor* gb) {
  Conv3dDims d = conv3d_dims(x, w, stride);
  const std::size_t px = d.kx / 2, py = d.ky / 2, pz = d.kz / 2;
  const bool fast = stride == 1 && d.kz == 3 && d.Z >= 2;
  if (gb) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      const double* gyc = gy.data() + co * d.Xo * d.Yo * d.Zo;
      double acc = 0.0;
      for (std::size_t i = 0; i < d.Xo * d.Yo * d.Zo; ++i) acc += gyc[i];
      (*gb)[co] += acc;
    }
  }
  if (conv3d_fast_eligible(d, stride)) {
    auto run = [&](auto tag) {
      using F = Conv3dFast<decltype(tag)::value>;
      if (gw) F::backward_weight(d, x.data(), gy.data(), gw->data());
      if (gx) F::backward_input(d, w.data(), gy.data(), gx->data());
    };
    if (d.Z == 8)
      run(std::integral_constant<int, 8>{});
    else if (d.Z == 4)
      run(std::integral_constant<int, 4>{});
    else
      run(std::integral_constant<int, 16>{});
    return;
  }
  if (gw) {
    parallel_for(d.cout, [&](std::size_t co) {
      const double* gyc = gy.data() + co * d.Xo * d.Yo * d.Zo;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const double* xc = x.data() + ci * d.X * d.Y * d.Z;
        double* gwc = gw->data() + (co * d.cin + ci) * d.kx * d.ky * d.kz;
        for (std::size_t dx = 0; dx < d.kx; ++dx) {
          std::size_t xlo, xhi;
          conv_axis_range(d.Xo, d.X, dx, px, stride, xlo, xhi);
          for (std::size_t dy = 0; dy < d.ky; ++dy) {
            std::size_t ylo, yhi;
            conv_axis_range(d.Yo, d.Y, dy, py, stride, ylo, yhi);
            double* gwrow = gwc + (dx * d.ky + dy) * d.kz;
            if (fast) {
              double a0 = 0.0, a1 = 0.0, a2 = 0.0;
              for (std::size_t xo = xlo; xo < xhi; ++xo) {
                std::size_t xi = xo + dx - px;
                for (std::size_t yo = ylo; yo < yhi; ++yo) {
                  std::size_t yi = yo + dy - py;
                  const double* __restrict gyrow = gyc + (xo * d.Yo + yo) * d.Zo;
                  const double* __restrict xrow = xc + (xi * d.Y + yi) * d.Z;
                  for (std::size_t zo = 1; zo < d.Zo; ++zo) a0 += gyrow[zo] * xrow[zo - 1];
                  for (std::size_t zo = 0; zo < d.Zo; ++zo) a1 += gyrow[zo] * xrow[zo];
                  for (std::size_t zo = 0; zo + 1 < d.Zo; ++zo) a2 += gyrow[zo] * xrow[zo + 1];
                }
              }
              gwrow[0] += a0;
              gwrow[1] += a1;
              gwrow[2] += a2;
            } else {
              for (std::size_t dz = 0; dz < d.kz; ++dz) {
                std::size_t zlo, zhi;
                conv_axis_range(d.Zo, d.Z, dz, pz, stride, zlo, zhi);
                double acc = 0.0;
                for (std::size_t xo = xlo; xo < xhi; ++xo) {
                  std::size_t xi = xo * stride + dx - px;
                  for (std::size_t yo = ylo; yo < yhi; ++yo) {
                    std::size_t yi = yo * stride + dy - py;
                    const double* __restrict gyrow = gyc + (xo * d.Yo + yo) * d.Zo;
                    const double* __restrict xrow = xc + (xi * d.Y + yi) * d.Z;
                    for (std::size_t zo = zlo; zo < zhi; ++zo)
                      acc += gyrow[zo] * xrow[zo * stride + dz - pz];
                  }
                }
                gwrow[dz] += acc;
              }
            }
          }
        }
      }
    });
  }
  if (gx) {
    parallel_for(d.cin, [&](std::size_t ci) {
      double* gxc = gx->data() + ci * d.X * d.Y * d.Z;
      for (std::size_t co = 0; co < d.cout; ++co) {
        const double* gyc = gy.data() + co * d.Xo * d.Yo * d.Zo;
        const double* wc = w.data() + (co * d.cin + ci) * d.kx * d.ky * d.kz;
        for (std::size_t dx = 0; dx < d.kx; ++dx) {
          std::size_t xlo, xhi;
          conv_axis_range(d.Xo, d.X, dx, px, stride, xlo, xhi);
          for (std::size_t dy = 0; dy < d.ky; ++dy) {
            std::size_t ylo, yhi;
            conv_axis_range(d.Yo, d.Y, dy, py, stride, ylo, yhi);
            const double* wrow = wc + (dx * d.ky + dy) * d.kz;
            for (std::size_t xo = xlo; xo < xhi; ++xo) {
              std::size_t xi = xo * stride + dx - px;
              for (std::size_t yo = ylo; yo < yhi; ++yo) {
                std::size_t yi = yo * stride + dy - py;
                const double* __restrict gyrow = gyc + (xo * d.Yo + yo) * d.Zo;
                double* __restrict gxrow = gxc + (xi * d.Y + yi) * d.Z;
                if (fast) {
                  // dX[zi] += w0*gy[zi+1] + w1*gy[zi] + w2*gy[zi-1]
                  const double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                  gxrow[0] += w1 * gyrow[0] + w0 * gyrow[1];
                  for (std::size_t zi = 1; zi + 1 < d.Z; ++zi)
                    gxrow[zi] += w0 * gyrow[zi + 1] + w1 * gyrow[zi] + w2 * gyrow[zi - 1];
                  if (d.Z >= 2)
                    gxrow[d.Z - 1] += w1 * gyrow[d.Z - 1] + w2 * gyrow[d.Z - 2];
                } else {
                  for (std::size_t dz = 0; dz < d.kz; ++dz) {
                    const double wv = wrow[dz];
                    if (wv == 0.0) continue;
                    std::size_t zlo, zhi;
                    conv_axis_range(d.Zo, d.Z, dz, pz, stride, zlo, zhi);
                    for (std::size_t zo = zlo; zo < zhi; ++zo)
                      gxrow[zo * stride + dz - pz] += wv * gyrow[zo];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
}

struct Conv2dDims {
  std::size_t cin, H, W;
  std::size_t cout, kh, kw;
  std::size_t stride;
  std::size_t Ho, Wo;
};

inline Conv2dDims conv2d_dims(const Tensor& x, const Tensor& w, std::size_t stride) {
  if (x.rank() != 3 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expected input [C,H,W] and weight [Co,Ci,kh,kw], got " +
                                x.shape_str() + " and " + w.shape_str());
  Conv2dDims d;
  d.cin = x.dim(0); d.H = x.dim(1); d.W = x.dim(2);
  d.cout = w.dim(0); d.kh = w.dim(2); d.kw = w.dim(3);
  d.stride = stride;
  if (w.dim(1) != d.cin)
    throw std::invalid_argument("conv2d: weight " + w.shape_str() + " does not match input channels " +
                                x.shape_str());
  if (d.kh % 2 == 0 || d.kw % 2 == 0)
    throw std::invalid_argument("conv2d: even-sized kernel " + w.shape_str());
  d.Ho = conv_out_dim(d.H, d.kh, stride);
  d.Wo = conv_out_dim(d.W, d.kw, stride);
  return d;
}

#ifdef GVS_HAVE_AVX512
// 3x3 stride-1 conv2d over rows of NB 8-lane blocks, whole-row register
// accumulators across the Cin reduction.
template <int NB>
struct Conv2dFast {
  static void forward(const Conv2dDims& d, const double* x, const double* w, const double* b,
                      double* y) {
    const std::size_t chan = d.H * d.W;
    const __m512d zero = _mm512_setzero_pd();
    parallel_for(d.cout, [&](std::size_t co) {
      for (std::size_t ho = 0; ho < d.Ho; ++ho) {
        __m512d acc[NB];
        for (int bl = 0; bl < NB; ++bl) acc[bl] = _mm512_set1_pd(b[co]);
        const double* xc = x;
        const double* wc = w + co * d.cin * 9;
        for (std::size_t ci = 0; ci < d.cin; ++ci, xc += chan, wc += 9) {
          for (int dh = 0; dh < 3; ++dh) {
            long hi = static_cast<long>(ho) + dh - 1;
            if (hi < 0 || hi >= static_cast<long>(d.H)) continue;
            const double* row = xc + static_cast<std::size_t>(hi) * d.W;
            const double* wr = wc + dh * 3;
            __m512d cur[NB];
            for (int bl = 0; bl < NB; ++bl) cur[bl] = _mm512_loadu_pd(row + 8 * bl);
            __m512d w0 = _mm512_set1_pd(wr[0]), w1 = _mm512_set1_pd(wr[1]),
                    w2 = _mm512_set1_pd(wr[2]);
            for (int bl = 0; bl < NB; ++bl) {
              __m512d prev = bl > 0 ? cur[bl - 1] : zero;
              __m512d next = bl + 1 < NB ? cur[bl + 1] : zero;
              acc[bl] = _mm512_fmadd_pd(w0, shift_right1(prev, cur[bl]), acc[bl]);
              acc[bl] = _mm512_fmadd_pd(w1, cur[bl], acc[bl]);
              acc[bl] = _mm512_fmadd_pd(w2, shift_left1(cur[bl], next), acc[bl]);
            }
          }
        }
        double* yrow = y + (co * d.Ho + ho) * d.Wo;
        for (int bl = 0; bl < NB; ++bl) _mm512_storeu_pd(yrow + 8 * bl, acc[bl]);
      }
    });
  }

  static void backward_input(const Conv2dDims& d, const double* w, const double* gy,
                             double* gx) {
    const std::size_t chan = d.H * d.W;
    const __m512d zero = _mm512_setzero_pd();
    parallel_for(d.cin, [&](std::size_t ci) {
      for (std::size_t hi = 0; hi < d.H; ++hi) {
        __m512d acc[NB];
        double* gxrow = gx + ci * chan + hi * d.W;
        for (int bl = 0; bl < NB; ++bl) acc[bl] = _mm512_loadu_pd(gxrow + 8 * bl);
        const double* gyc = gy;
        const double* wc = w + ci * 9;
        for (std::size_t co = 0; co < d.cout; ++co, gyc += chan, wc += d.cin * 9) {
          for (int dh = 0; dh < 3; ++dh) {
            long ho = static_cast<long>(hi) - dh + 1;
            if (ho < 0 || ho >= static_cast<long>(d.Ho)) continue;
            const double* row = gyc + static_cast<std::size_t>(ho) * d.Wo;
            const double* wr = wc + dh * 3;
            __m512d cur[NB];
            for (int bl = 0; bl < NB; ++bl) cur[bl] = _mm512_loadu_pd(row + 8 * bl);
            __m512d w0 = _mm512_set1_pd(wr[0]), w1 = _mm512_set1_pd(wr[1]),
                    w2 = _mm512_set1_pd(wr[2]);
            for (int bl = 0; bl < NB; ++bl) {
              __m512d prev = bl > 0 ? cur[bl - 1] : zero;
              __m512d next = bl + 1 < NB ? cur[bl + 1] : zero;
              acc[bl] = _mm512_fmadd_pd(w2, shift_right1(prev, cur[bl]), acc[bl]);
              acc[bl] = _mm512_fmadd_pd(w1, cur[bl], acc[bl]);
              acc[bl] = _mm512_fmadd_pd(w0, shift_left1(cur[bl], next), acc[bl]);
            }
          }
        }
        for (int bl = 0; bl < NB; ++bl) _mm512_storeu_pd(gxrow + 8 * bl, acc[bl]);
      }
    });
  }

  static void backward_weight(const Conv2dDims& d, const double* x, const double* gy,
                              double* gw) {
    const std::size_t chan = d.H * d.W;
    const __m512d zero = _mm512_setzero_pd();
    parallel_for(d.cout, [&](std::size_t co) {
      const double* gyc = gy + co * chan;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const double* xc = x + ci * chan;
        double* gwc = gw + (co * d.cin + ci) * 9;
        for (int dh = 0; dh < 3; ++dh) {
          __m512d a0 = zero, a1 = zero, a2 = zero;
          for (std::size_t ho = 0; ho < d.Ho; ++ho) {
            long hi = static_cast<long>(ho) + dh - 1;
            if (hi < 0 || hi >= static_cast<long>(d.H)) continue;
            const double* g = gyc + ho * d.Wo;
            const double* r = xc + static_cast<std::size_t>(hi) * d.W;
            for (int bl = 0; bl < NB; ++bl) {
              __m512d gv = _mm512_loadu_pd(g + 8 * bl);
              __m512d rv = _mm512_loadu_pd(r + 8 * bl);
              __m512d prev = bl > 0 ? _mm512_loadu_pd(r + 8 * (bl - 1)) : zero;
              __m512d next = bl + 1 < NB ? _mm512_loadu_pd(r + 8 * (bl + 1)) : zero;
              a0 = _mm512_fmadd_pd(gv, shift_right1(prev, rv), a0);
              a1 = _mm512_fmadd_pd(gv, rv, a1);
              a2 = _mm512_fmadd_pd(gv, shift_left1(rv, next), a2);
            }
          }
          gwc[dh * 3 + 0] += _mm512_reduce_add_pd(a0);
          gwc[dh * 3 + 1] += _mm512_reduce_add_pd(a1);
          gwc[dh * 3 + 2] += _mm512_reduce_add_pd(a2);
        }
      }
    });
  }
};

inline int conv2d_fast_blocks(const Conv2dDims& d, std::size_t stride) {
  if (stride != 1 || d.kh != 3 || d.kw != 3 || d.Ho != d.H || d.Wo != d.W) return 0;
  if (d.W == 16) return 2;
  if (d.W == 32) return 4;
  if (d.W == 64) return 8;
  return 0;
}
#endif  // GVS_HAVE_AVX512

inline Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                             std::size_t stride) {
  Conv2dDims d = conv2d_dims(x, w, stride);
  if (b.rank() != 1 || b.dim(0) != d.cout)
    throw std::invalid_argument("conv2d: bias " + b.shape_str() + " does not match Cout");
  Tensor y({d.cout, d.Ho, d.Wo});
#ifdef GVS_HAVE_AVX512
  switch (conv2d_fast_blocks(d, stride)) {
    case 2: Conv2dFast<2>::forward(d, x.data(), w.data(), b.data(), y.data()); return y;
    case 4: Conv2dFast<4>::forward(d, x.data(), w.data(), b.data(), y.data()); return y;
    case 8: Conv2dFast<8>::forward(d, x.data(), w.data(), b.data(), y.data()); return y;
    default: break;
  }
#endif
  const std::size_t ph = d.kh / 2, pw = d.kw / 2;
  parallel_for(d.cout, [&](std::size_t co) {
    double* yc = y.data() + co * d.Ho * d.Wo;
    std::fill(yc, yc + d.Ho * d.Wo, b[co]);
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      const double* xc = x.data() + ci * d.H * d.W;
      const double* wc = w.data() + (co * d.cin + ci) * d.kh * d.kw;
      for (std::size_t dh = 0; dh < d.kh; ++dh) {
        std::size_t hlo, hhi;
        conv_axis_range(d.Ho, d.H, dh, ph, stride, hlo, hhi);
        for (std::size_t dw = 0; dw < d.kw; ++dw) {
          const double wv = wc[dh * d.kw + dw];
          if (wv == 0.0) continue;
          std::size_t wlo, whi;
          conv_axis_range(d.Wo, d.W, dw, pw, stride, wlo, whi);
          for (std::size_t ho = hlo; ho < hhi; ++ho) {
            std::size_t hi = ho * stride + dh - ph;
            double* __restrict yrow = yc + ho * d.Wo;
            const double* __restrict xrow = xc + hi * d.W;
            for (std::size_t wo = wlo; wo < whi; ++wo)
              yrow[wo] += wv * xrow[wo * stride + dw - pw];
          }
        }
      }
    }
  });
  return y;
}

inline void conv2d_backward(const Tensor& x, const Tensor& w, std::size_t stride,
                            const Tensor& gy, Tensor* gx, Tensor* gw, Tensor* gb) {
  Conv2dDims d = conv2d_dims(x, w, stride);
  const std::size_t ph = d.kh / 2, pw = d.kw / 2;
  if (gb) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      const double* gyc = gy.data() + co * d.Ho * d.Wo;
      double acc = 0.0;
      for (std::size_t i = 0; i < d.Ho * d.Wo; ++i) acc += gyc[i];
      (*gb)[co] += acc;
    }
  }
#ifdef GVS_HAVE_AVX512
  if (int nb = conv2d_fast_blocks(d, stride)) {
    auto run = [&](auto tag) {
      using F = Conv2dFast<decltype(tag)::value>;
      if (gw) F::backward_weight(d, x.data(), gy.data(), gw->data());
      if (gx) F::backward_input(d, w.data(), gy.data(), gx->data());
    };
    if (nb == 2) run(std::integral_constant<int, 2>{});
    else if (nb == 4) run(std::integral_constant<int, 4>{});
    else run(std::integral_constant<int, 8>{});
    return;
  }
#endif
  if (gw) {
    parallel_for(d.cout, [&](std::size_t co) {
      const double* gyc = gy.data() + co * d.Ho * d.Wo;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const double* xc = x.data() + ci * d.H * d.W;
        double* gwc = gw->data() + (co * d.cin + ci) * d.kh * d.kw;
        for (std::size_t dh = 0; dh < d.kh; ++dh) {
          std::size_t hlo, hhi;
          conv_axis_range(d.Ho, d.H, dh, ph, stride, hlo, hhi);
          for (std::size_t dw = 0; dw < d.kw; ++dw) {
            std::size_t wlo, whi;
            conv_axis_range(d.Wo, d.W, dw, pw, stride, wlo, whi);
            double acc = 0.0;
            for (std::size_t ho = hlo; ho < hhi; ++ho) {
              std::size_t hi = ho * stride + dh - ph;
              const double* __restrict gyrow = gyc + ho * d.Wo;
              const double* __restrict xrow = xc + hi * d.W;
              for (std::size_t wo = wlo; wo < whi; ++wo)
                acc += gyrow[wo] * xrow[wo * stride + dw - pw];
            }
            gwc[dh * d.kw + dw] += acc;
          }
        }
      }
    });
  }
  if (gx) {
    parallel_for(d.cin, [&](std::size_t ci) {
      double* gxc = gx->data() + ci * d.H * d.W;
      for (std::size_t co = 0; co < d.cout; ++co) {
        const double* gyc = gy.data() + co * d.Ho * d.Wo;
        const double* wc = w.data() + (co * d.cin + ci) * d.kh * d.kw;
        for (std::size_t dh = 0; dh < d.kh; ++dh) {
          std::size_t hlo, hhi;
          conv_axis_range(d.Ho, d.H, dh, ph, stride, hlo, hhi);
          for (std::size_t dw = 0; dw < d.kw; ++dw) {
            const double wv = wc[dh * d.kw + dw];
            if (wv == 0.0) continue;
            std::size_t wlo, whi;
            conv_axis_range(d.Wo, d.W, dw, pw, stride, wlo, whi);
            for (std::size_t ho = hlo; ho < hhi; ++ho) {
              std::size_t hi = ho * stride + dh - ph;
              const double* __restrict gyrow = gyc + ho * d.Wo;
              double* __restrict gxrow = gxc + hi * d.W;
              for (std::size_t wo = wlo; wo < whi; ++wo)
                gxrow[wo * stride + dw - pw] += wv * gyrow[wo];
            }
          }
        }
      }
    });
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------

class Graph {
 public:
  ValueId constant(Tensor t) { return push_(std::move(t), {}, nullptr, false, false); }

  ValueId parameter(Tensor t) {
    ValueId id = push_(std::move(t), {}, nullptr, true, true);
    params_.push_back(id);
    return id;
  }

  const Tensor& value(ValueId id) const { return nodes_[check_(id)].value; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<ValueId>& parameters() const { return params_; }
  bool requires_grad(ValueId id) const { return nodes_[check_(id)].requires_grad; }

  // Generic hook for module-level ops (feature lifting, scatter-mean,
  // splat rendering, IoU loss) that carry their own backward.
  using BackwardFn = std::function<void(Graph&, ValueId)>;
  ValueId custom(Tensor value, std::vector<ValueId> inputs, BackwardFn backward) {
    bool rg = false;
    for (ValueId in : inputs) rg = rg || nodes_[check_(in)].requires_grad;
    return push_(std::move(value), std::move(inputs), rg ? std::move(backward) : nullptr,
                 rg, false);
  }

  // Gradient of `self` w.r.t. its output; null when the node was not reached.
  const Tensor* out_grad(ValueId id) const {
    const Node& n = nodes_[check_(id)];
    return n.grad_set ? &n.grad : nullptr;
  }

  // Accumulation buffer for an input's gradient; null when the input does
  // not require grad (callers skip the corresponding work).
  Tensor* grad_buffer(ValueId id) {
    Node& n = nodes_[check_(id)];
    if (!n.requires_grad) return nullptr;
    if (!n.grad_set) {
      n.grad = Tensor(n.value.shape());
      n.grad_set = true;
    }
    return &n.grad;
  }

  // ---- arithmetic ---------------------------------------------------------

  ValueId add(ValueId a, ValueId b) {
    const Tensor &ta = value(a), &tb = value(b);
    detail::check_same_shape("add", ta, tb);
    Tensor y = ta;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += tb[i];
    return custom(std::move(y), {a, b}, [a, b](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* ga = g.grad_buffer(a))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i];
      if (Tensor* gb = g.grad_buffer(b))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gb)[i] += gy[i];
    });
  }

  ValueId sub(ValueId a, ValueId b) {
    const Tensor &ta = value(a), &tb = value(b);
    detail::check_same_shape("sub", ta, tb);
    Tensor y = ta;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= tb[i];
    return custom(std::move(y), {a, b}, [a, b](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* ga = g.grad_buffer(a))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i];
      if (Tensor* gb = g.grad_buffer(b))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gb)[i] -= gy[i];
    });
  }

  ValueId mul(ValueId a, ValueId b) {
    const Tensor &ta = value(a), &tb = value(b);
    detail::check_same_shape("mul", ta, tb);
    Tensor y = ta;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= tb[i];
    return custom(std::move(y), {a, b}, [a, b](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor &ta = g.value(a), &tb = g.value(b);
      if (Tensor* ga = g.grad_buffer(a))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i] * tb[i];
      if (Tensor* gb = g.grad_buffer(b))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gb)[i] += gy[i] * ta[i];
    });
  }

  ValueId div(ValueId a, ValueId b) {
    const Tensor &ta = value(a), &tb = value(b);
    detail::check_same_shape("div", ta, tb);
    Tensor y = ta;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] /= tb[i];
    return custom(std::move(y), {a, b}, [a, b](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& yv = g.value(self);
      const Tensor& tb = g.value(b);
      if (Tensor* ga = g.grad_buffer(a))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i] / tb[i];
      if (Tensor* gb = g.grad_buffer(b))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gb)[i] -= gy[i] * yv[i] / tb[i];
    });
  }

  // y = a*x + b, scalars a and b.
  ValueId scale_add(ValueId x, double a, double b = 0.0) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a * y[i] + b;
    return custom(std::move(y), {x}, [x, a](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] += a * gy[i];
    });
  }

  // ---- linear algebra -----------------------------------------------------

  ValueId matmul(ValueId a, ValueId b) {
    const Tensor &ta = value(a), &tb = value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
      throw std::invalid_argument("matmul: incompatible shapes " + ta.shape_str() + " and " +
                                  tb.shape_str());
    std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor y({m, n});
    detail::matmul_acc(ta.data(), tb.data(), y.data(), m, k, n);
    return custom(std::move(y), {a, b}, [a, b, m, k, n](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* ga = g.grad_buffer(a))
        detail::matmul_a_bt_acc(gy.data(), g.value(b).data(), ga->data(), m, k, n);
      if (Tensor* gb = g.grad_buffer(b))
        detail::matmul_at_b_acc(g.value(a).data(), gy.data(), gb->data(), m, k, n);
    });
  }

  // x: [N,D], bias: [D]; broadcast add over rows.
  ValueId add_bias_rows(ValueId x, ValueId bias) {
    const Tensor &tx = value(x), &tb = value(bias);
    if (tx.rank() != 2 || tb.rank() != 1 || tb.dim(0) != tx.dim(1))
      throw std::invalid_argument("add_bias_rows: shapes " + tx.shape_str() + " and " +
                                  tb.shape_str());
    Tensor y = tx;
    std::size_t n = tx.dim(0), d = tx.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) y[i * d + j] += tb[j];
    return custom(std::move(y), {x, bias}, [x, bias, n, d](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i];
      if (Tensor* gb = g.grad_buffer(bias))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gy[i * d + j];
    });
  }

  // x: [N,D] times per-row scalar s: [N].
  ValueId mul_rows(ValueId x, ValueId s) {
    const Tensor &tx = value(x), &ts = value(s);
    if (tx.rank() != 2 || ts.rank() != 1 || ts.dim(0) != tx.dim(0))
      throw std::invalid_argument("mul_rows: shapes " + tx.shape_str() + " and " + ts.shape_str());
    std::size_t n = tx.dim(0), d = tx.dim(1);
    Tensor y = tx;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) y[i * d + j] *= ts[i];
    return custom(std::move(y), {x, s}, [x, s, n, d](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor &tx = g.value(x), &ts = g.value(s);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) (*gx)[i * d + j] += gy[i * d + j] * ts[i];
      if (Tensor* gs = g.grad_buffer(s))
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) acc += gy[i * d + j] * tx[i * d + j];
          (*gs)[i] += acc;
        }
    });
  }

  ValueId conv2d(ValueId x, ValueId w, ValueId b, std::size_t stride = 1) {
    Tensor y = detail::conv2d_forward(value(x), value(w), value(b), stride);
    return custom(std::move(y), {x, w, b}, [x, w, b, stride](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      detail::conv2d_backward(g.value(x), g.value(w), stride, gy, g.grad_buffer(x),
                              g.grad_buffer(w), g.grad_buffer(b));
    });
  }

  ValueId conv3d(ValueId x, ValueId w, ValueId b, std::size_t stride = 1) {
    Tensor y = detail::conv3d_forward(value(x), value(w), value(b), stride);
    return custom(std::move(y), {x, w, b}, [x, w, b, stride](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      detail::conv3d_backward(g.value(x), g.value(w), stride, gy, g.grad_buffer(x),
                              g.grad_buffer(w), g.grad_buffer(b));
    });
  }

  // ---- pointwise nonlinearities -------------------------------------------

  ValueId relu(ValueId x) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.0;
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& tx = g.value(x);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i)
          if (tx[i] > 0.0) (*gx)[i] += gy[i];
    });
  }

  ValueId sigmoid(ValueId x) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = detail::stable_sigmoid(y[i]);
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& yv = g.value(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i] * yv[i] * (1.0 - yv[i]);
    });
  }

  ValueId tanh_(ValueId x) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(y[i]);
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& yv = g.value(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i] * (1.0 - yv[i] * yv[i]);
    });
  }

  ValueId exp_(ValueId x) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::exp(y[i]);
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& yv = g.value(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i] * yv[i];
    });
  }

  ValueId log_(ValueId x) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      if (y[i] <= 0.0) throw std::domain_error("log: non-positive input");
      y[i] = std::log(y[i]);
    }
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& tx = g.value(x);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i] / tx[i];
    });
  }

  ValueId softplus(ValueId x) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = detail::stable_softplus(y[i]);
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& tx = g.value(x);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i)
          (*gx)[i] += gy[i] * detail::stable_sigmoid(tx[i]);
    });
  }

  ValueId sin_(ValueId x) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::sin(y[i]);
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& tx = g.value(x);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i] * std::cos(tx[i]);
    });
  }

  ValueId cos_(ValueId x) {
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::cos(y[i]);
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& tx = g.value(x);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] -= gy[i] * std::sin(tx[i]);
    });
  }

  // Softmax along one axis, max-subtracted for overflow safety.
  ValueId softmax(ValueId x, std::size_t axis) {
    const Tensor& tx = value(x);
    if (axis >= tx.rank())
      throw std::invalid_argument("softmax: axis out of range for " + tx.shape_str());
    auto [outer, n, inner] = axis_split_(tx.shape(), axis);
    Tensor y = tx;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double* base = y.data() + o * n * inner + in;
        double mx = base[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, base[j * inner]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double e = std::exp(base[j * inner] - mx);
          base[j * inner] = e;
          sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) base[j * inner] /= sum;
      }
    return custom(std::move(y), {x}, [x, outer, n = n, inner](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor& yv = g.value(self);
      Tensor* gx = g.grad_buffer(x);
      if (!gx) return;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          std::size_t off = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gy[off + j * inner] * yv[off + j * inner];
          for (std::size_t j = 0; j < n; ++j)
            (*gx)[off + j * inner] += yv[off + j * inner] * (gy[off + j * inner] - dot);
        }
    });
  }

  // ---- reductions ---------------------------------------------------------

  ValueId sum_all(ValueId x) {
    const Tensor& tx = value(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < tx.numel(); ++i) acc += tx[i];
    return custom(Tensor::scalar(acc), {x}, [x](Graph& g, ValueId self) {
      double gy = (*g.out_grad(self))[0];
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += gy;
    });
  }

  ValueId mean_all(ValueId x) {
    const Tensor& tx = value(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < tx.numel(); ++i) acc += tx[i];
    double inv = 1.0 / static_cast<double>(tx.numel());
    return custom(Tensor::scalar(acc * inv), {x}, [x, inv](Graph& g, ValueId self) {
      double gy = (*g.out_grad(self))[0] * inv;
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += gy;
    });
  }

  // Reduce one axis to extent 1 (kept).
  ValueId sum_axis(ValueId x, std::size_t axis) { return reduce_axis_(x, axis, false); }
  ValueId mean_axis(ValueId x, std::size_t axis) { return reduce_axis_(x, axis, true); }

  // ---- shape manipulation ---------------------------------------------------

  ValueId reshape(ValueId x, std::vector<std::size_t> shape) {
    const Tensor& tx = value(x);
    Tensor y(shape, std::vector<double>(tx.data(), tx.data() + tx.numel()));
    return custom(std::move(y), {x}, [x](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i];
    });
  }

  ValueId transpose(ValueId x) {
    const Tensor& tx = value(x);
    if (tx.rank() != 2)
      throw std::invalid_argument("transpose: expected rank-2, got " + tx.shape_str());
    std::size_t m = tx.dim(0), n = tx.dim(1);
    Tensor y({n, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[j * m + i] = tx[i * n + j];
    return custom(std::move(y), {x}, [x, m, n](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += gy[j * m + i];
    });
  }

  ValueId slice(ValueId x, std::vector<std::size_t> offset, std::vector<std::size_t> extent) {
    const Tensor& tx = value(x);
    if (offset.size() != tx.rank() || extent.size() != tx.rank())
      throw std::invalid_argument("slice: offsets/extents rank mismatch for " + tx.shape_str());
    for (std::size_t d = 0; d < tx.rank(); ++d)
      if (offset[d] + extent[d] > tx.dim(d))
        throw std::invalid_argument("slice: out of range on axis " + std::to_string(d) +
                                    " for " + tx.shape_str());
    Tensor y(extent);
    copy_block_(tx, y, offset, /*to_slice=*/true);
    return custom(std::move(y), {x}, [x, offset](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* gx = g.grad_buffer(x)) add_block_(*gx, gy, offset);
    });
  }

  ValueId concat(const std::vector<ValueId>& xs, std::size_t axis) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    const Tensor& t0 = value(xs[0]);
    if (axis >= t0.rank()) throw std::invalid_argument("concat: axis out of range");
    std::vector<std::size_t> shape = t0.shape();
    for (std::size_t i = 1; i < xs.size(); ++i) {
      const Tensor& ti = value(xs[i]);
      if (ti.rank() != t0.rank())
        throw std::invalid_argument("concat: rank mismatch " + t0.shape_str() + " vs " +
                                    ti.shape_str());
      for (std::size_t d = 0; d < t0.rank(); ++d)
        if (d != axis && ti.dim(d) != t0.dim(d))
          throw std::invalid_argument("concat: shape mismatch " + t0.shape_str() + " vs " +
                                      ti.shape_str());
      shape[axis] += ti.dim(axis);
    }
    auto [outer, ntot, inner] = axis_split_(shape, axis);
    (void)ntot;
    Tensor y(shape);
    std::vector<std::size_t> extents;
    extents.reserve(xs.size());
    for (ValueId v : xs) extents.push_back(value(v).dim(axis));
    std::size_t at = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Tensor& ti = value(xs[i]);
      std::size_t ni = extents[i];
      for (std::size_t o = 0; o < outer; ++o)
        std::copy(ti.data() + o * ni * inner, ti.data() + (o + 1) * ni * inner,
                  y.data() + (o * shape[axis] + at) * inner);
      at += ni;
    }
    return custom(std::move(y), xs,
                  [xs, extents, outer, inner, total = shape[axis]](Graph& g, ValueId self) {
                    const Tensor& gy = *g.out_grad(self);
                    std::size_t at = 0;
                    for (std::size_t i = 0; i < xs.size(); ++i) {
                      std::size_t ni = extents[i];
                      if (Tensor* gx = g.grad_buffer(xs[i])) {
                        for (std::size_t o = 0; o < outer; ++o) {
                          const double* src = gy.data() + (o * total + at) * inner;
                          double* dst = gx->data() + o * ni * inner;
                          for (std::size_t j = 0; j < ni * inner; ++j) dst[j] += src[j];
                        }
                      }
                      at += ni;
                    }
                  });
  }

  // mask/weight broadcast: x [C, S...], m [S...] or [1, S...].
  ValueId broadcast_mul(ValueId x, ValueId m) {
    const Tensor &tx = value(x), &tm = value(m);
    std::size_t spatial = 1;
    for (std::size_t d = 1; d < tx.rank(); ++d) spatial *= tx.dim(d);
    if (tm.numel() != spatial)
      throw std::invalid_argument("broadcast_mul: mask " + tm.shape_str() +
                                  " does not cover spatial dims of " + tx.shape_str());
    std::size_t c = tx.dim(0);
    Tensor y = tx;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t s = 0; s < spatial; ++s) y[ch * spatial + s] *= tm[s];
    return custom(std::move(y), {x, m}, [x, m, c, spatial](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      const Tensor &tx = g.value(x), &tm = g.value(m);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t s = 0; s < spatial; ++s)
            (*gx)[ch * spatial + s] += gy[ch * spatial + s] * tm[s];
      if (Tensor* gm = g.grad_buffer(m))
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t s = 0; s < spatial; ++s)
            (*gm)[s] += gy[ch * spatial + s] * tx[ch * spatial + s];
    });
  }

  // ---- row bookkeeping (used by the multi-view fusion) ----------------------

  ValueId repeat_rows(ValueId x, std::size_t n) {
    const Tensor& tx = value(x);
    if (tx.rank() != 2 || tx.dim(0) != 1)
      throw std::invalid_argument("repeat_rows: expected [1,D], got " + tx.shape_str());
    std::size_t d = tx.dim(1);
    Tensor y({n, d});
    for (std::size_t i = 0; i < n; ++i)
      std::copy(tx.data(), tx.data() + d, y.data() + i * d);
    return custom(std::move(y), {x}, [x, n, d](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) (*gx)[j] += gy[i * d + j];
    });
  }

  ValueId gather_rows(ValueId x, std::vector<std::size_t> idx) {
    const Tensor& tx = value(x);
    if (tx.rank() < 1) throw std::invalid_argument("gather_rows: rank-0 input");
    std::size_t rows = tx.dim(0), rowlen = tx.numel() / rows;
    for (std::size_t i : idx)
      if (i >= rows) throw std::invalid_argument("gather_rows: index out of range");
    std::vector<std::size_t> shape = tx.shape();
    shape[0] = idx.size();
    Tensor y(shape);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(tx.data() + idx[i] * rowlen, tx.data() + (idx[i] + 1) * rowlen,
                y.data() + i * rowlen);
    return custom(std::move(y), {x}, [x, idx, rowlen](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const double* src = gy.data() + i * rowlen;
          double* dst = gx->data() + idx[i] * rowlen;
          for (std::size_t j = 0; j < rowlen; ++j) dst[j] += src[j];
        }
    });
  }

  // Copy of `base` with rows idx[i] replaced by rows[i]. Indices must be
  // unique; duplicate targets would make the forward value order-dependent.
  ValueId scatter_rows(ValueId base, std::vector<std::size_t> idx, ValueId rows) {
    const Tensor &tb = value(base), &tr = value(rows);
    std::size_t n = tb.dim(0), rowlen = tb.numel() / n;
    if (tr.dim(0) != idx.size() || tr.numel() / tr.dim(0) != rowlen)
      throw std::invalid_argument("scatter_rows: rows " + tr.shape_str() +
                                  " do not match base " + tb.shape_str());
    std::vector<bool> seen(n, false);
    for (std::size_t i : idx) {
      if (i >= n) throw std::invalid_argument("scatter_rows: index out of range");
      if (seen[i]) throw std::invalid_argument("scatter_rows: duplicate index");
      seen[i] = true;
    }
    Tensor y = tb;
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(tr.data() + i * rowlen, tr.data() + (i + 1) * rowlen,
                y.data() + idx[i] * rowlen);
    return custom(std::move(y), {base, rows},
                  [base, rows, idx, rowlen, seen](Graph& g, ValueId self) {
                    const Tensor& gy = *g.out_grad(self);
                    if (Tensor* gb = g.grad_buffer(base)) {
                      std::size_t n = gb->dim(0);
                      for (std::size_t r = 0; r < n; ++r) {
                        if (seen[r]) continue;
                        const double* src = gy.data() + r * rowlen;
                        double* dst = gb->data() + r * rowlen;
                        for (std::size_t j = 0; j < rowlen; ++j) dst[j] += src[j];
                      }
                    }
                    if (Tensor* gr = g.grad_buffer(rows))
                      for (std::size_t i = 0; i < idx.size(); ++i) {
                        const double* src = gy.data() + idx[i] * rowlen;
                        double* dst = gr->data() + i * rowlen;
                        for (std::size_t j = 0; j < rowlen; ++j) dst[j] += src[j];
                      }
                  });
  }

  // ---- backward -------------------------------------------------------------

  // Reverse sweep from `loss`. Returns the gradient for every parameter leaf;
  // parameters the loss does not reach get zero gradients.
  std::map<ValueId, Tensor> backward(ValueId loss) {
    Node& ln = nodes_[check_(loss)];
    if (ln.value.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar-shaped, got " +
                                  ln.value.shape_str());
    for (Node& n : nodes_) n.grad_set = false;
    ln.grad = Tensor::scalar(1.0);
    ln.grad_set = true;
    for (ValueId id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.grad_set || !n.backward) continue;
      n.backward(*this, id);
    }
    std::map<ValueId, Tensor> grads;
    for (ValueId p : params_) {
      const Node& n = nodes_[p];
      grads.emplace(p, n.grad_set ? n.grad : Tensor(n.value.shape()));
    }
    return grads;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<ValueId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable = false;
    bool grad_set = false;
  };

  ValueId push_(Tensor value, std::vector<ValueId> inputs, BackwardFn backward,
                bool requires_grad, bool trainable) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    n.requires_grad = requires_grad;
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return static_cast<ValueId>(nodes_.size() - 1);
  }

  ValueId check_(ValueId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw std::out_of_range("Graph: bad node id " + std::to_string(id));
    return id;
  }

  static std::tuple<std::size_t, std::size_t, std::size_t> axis_split_(
      const std::vector<std::size_t>& shape, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    return {outer, shape[axis], inner};
  }

  ValueId reduce_axis_(ValueId x, std::size_t axis, bool mean) {
    const Tensor& tx = value(x);
    if (axis >= tx.rank())
      throw std::invalid_argument("reduce: axis out of range for " + tx.shape_str());
    auto [outer, n, inner] = axis_split_(tx.shape(), axis);
    std::vector<std::size_t> shape = tx.shape();
    shape[axis] = 1;
    Tensor y(shape);
    double inv = mean ? 1.0 / static_cast<double>(n) : 1.0;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += tx[(o * n + j) * inner + in];
        y[o * inner + in] = acc * inv;
      }
    return custom(std::move(y), {x}, [x, outer, n = n, inner, inv](Graph& g, ValueId self) {
      const Tensor& gy = *g.out_grad(self);
      if (Tensor* gx = g.grad_buffer(x))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            double gv = gy[o * inner + in] * inv;
            for (std::size_t j = 0; j < n; ++j) (*gx)[(o * n + j) * inner + in] += gv;
          }
    });
  }

  static void copy_block_(const Tensor& src, Tensor& dst,
                          const std::vector<std::size_t>& offset, bool to_slice) {
    (void)to_slice;
    std::size_t rank = src.rank();
    std::vector<std::size_t> idx(rank, 0);
    const auto& ext = dst.shape();
    std::size_t n = dst.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t soff = 0;
      for (std::size_t d = 0; d < rank; ++d) soff = soff * src.dim(d) + offset[d] + idx[d];
      dst[flat] = src[soff];
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < ext[d]) break;
        idx[d] = 0;
      }
    }
  }

  static void add_block_(Tensor& dst, const Tensor& block,
                         const std::vector<std::size_t>& offset) {
    std::size_t rank = dst.rank();
    std::vector<std::size_t> idx(rank, 0);
    const auto& ext = block.shape();
    std::size_t n = block.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t doff = 0;
      for (std::size_t d = 0; d < rank; ++d) doff = doff * dst.dim(d) + offset[d] + idx[d];
      dst[doff] += block[flat];
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < ext[d]) break;
        idx[d] = 0;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<ValueId> params_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checker. The builder constructs the scalar loss
// from the given leaves; the checker evaluates it afresh at perturbed points,
// so the forward path is the only thing it trusts.

using GraphBuilder = std::function<ValueId(Graph&, const std::vector<ValueId>&)>;

inline double eval_loss(const GraphBuilder& build, const std::vector<Tensor>& point) {
  Graph g;
  std::vector<ValueId> leaves;
  leaves.reserve(point.size());
  for (const Tensor& t : point) leaves.push_back(g.parameter(t));
  double v = g.value(build(g, leaves))[0];
  if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite function value");
  return v;
}

inline double grad_check(const GraphBuilder& build, const std::vector<Tensor>& point,
                         double step) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  Graph g;
  std::vector<ValueId> leaves;
  leaves.reserve(point.size());
  for (const Tensor& t : point) leaves.push_back(g.parameter(t));
  ValueId loss = build(g, leaves);
  if (g.value(loss).numel() != 1)
    throw std::invalid_argument("grad_check: function must be scalar-valued");
  if (!std::isfinite(g.value(loss)[0]))
    throw std::runtime_error("grad_check: non-finite function value");
  auto grads = g.backward(loss);

  double max_rel = 0.0;
  std::vector<Tensor> probe = point;
  for (std::size_t leaf = 0; leaf < point.size(); ++leaf) {
    const Tensor& analytic = grads.at(leaves[leaf]);
    for (std::size_t i = 0; i < probe[leaf].numel(); ++i) {
      double keep = probe[leaf][i];
      probe[leaf][i] = keep + step;
      double fp = eval_loss(build, probe);
      probe[leaf][i] = keep - step;
      double fm = eval_loss(build, probe);
      probe[leaf][i] = keep;
      double fd = (fp - fm) / (2.0 * step);
      double a = analytic[i];
      double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace gvs::ad
