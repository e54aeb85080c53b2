#pragma once

// Parameter containers for the learned blocks. Initialization is
// uniform(-b, b) with b = 1/sqrt(fan_in), drawn from the run RNG in
// declaration order so runs are reproducible.

#include <cmath>

#include "gvs/autodiff.hpp"
#include "gvs/random.hpp"
#include "gvs/tensor.hpp"

namespace gvs {

inline Tensor init_uniform(Rng& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
  Tensor t(std::move(shape));
  double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-b, b);
  return t;
}

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

inline Linear make_linear(Rng& rng, std::size_t in, std::size_t out) {
  return {init_uniform(rng, {in, out}, in), init_uniform(rng, {out}, in)};
}

// y = x*W + b for x: [N, in]
inline ad::ValueId linear(ad::Graph& g, ad::ValueId x, ad::ValueId w, ad::ValueId b) {
  return g.add_bias_rows(g.matmul(x, w), b);
}

struct Conv2d {
  Tensor w;  // [out, in, k, k]
  Tensor b;  // [out]
  std::size_t stride = 1;
};

inline Conv2d make_conv2d(Rng& rng, std::size_t cin, std::size_t cout, std::size_t k,
                          std::size_t stride = 1) {
  std::size_t fan = cin * k * k;
  return {init_uniform(rng, {cout, cin, k, k}, fan), init_uniform(rng, {cout}, fan), stride};
}

struct Conv3d {
  Tensor w;  // [out, in, k, k, k]
  Tensor b;  // [out]
  std::size_t stride = 1;
};

inline Conv3d make_conv3d(Rng& rng, std::size_t cin, std::size_t cout, std::size_t k,
                          std::size_t stride = 1) {
  std::size_t fan = cin * k * k * k;
  return {init_uniform(rng, {cout, cin, k, k, k}, fan), init_uniform(rng, {cout}, fan), stride};
}

// Graph-side handles for a block's parameters, inserted once per step.
struct ConvIds {
  ad::ValueId w = -1;
  ad::ValueId b = -1;
};

inline ConvIds insert_conv(ad::Graph& g, const Conv2d& c) {
  return {g.parameter(c.w), g.parameter(c.b)};
}
inline ConvIds insert_conv(ad::Graph& g, const Conv3d& c) {
  return {g.parameter(c.w), g.parameter(c.b)};
}
inline ConvIds insert_linear(ad::Graph& g, const Linear& l) {
  return {g.parameter(l.w), g.parameter(l.b)};
}

}  // namespace gvs
