#include <gtest/gtest.h>

#include <map>

#include "gvs/random.hpp"
#include "gvs/voxelfusion.hpp"

using namespace gvs;
namespace ad = gvs::ad;

namespace {

struct OracleResult {
  std::map<std::size_t, std::vector<double>> voxel_mean;
  std::size_t dropped = 0;
};

// independent grouping oracle: map from voxel index to member mean
OracleResult oracle_voxelize(const std::vector<Vec3>& pos, const Tensor& lat,
                             const VoxelGridSpec& grid) {
  OracleResult r;
  std::size_t C = lat.dim(1);
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    double fx = std::floor((pos[i].x - grid.origin.x) / grid.voxel_size);
    double fy = std::floor((pos[i].y - grid.origin.y) / grid.voxel_size);
    double fz = std::floor((pos[i].z - grid.origin.z) / grid.voxel_size);
    if (fx < 0 || fy < 0 || fz < 0 || fx >= grid.dims[0] || fy >= grid.dims[1] ||
        fz >= grid.dims[2]) {
      ++r.dropped;
      continue;
    }
    std::size_t v = (static_cast<std::size_t>(fx) * grid.dims[1] +
                     static_cast<std::size_t>(fy)) * grid.dims[2] + static_cast<std::size_t>(fz);
    groups[v].push_back(i);
  }
  for (auto& [v, members] : groups) {
    std::vector<double> mean(C, 0.0);
    for (std::size_t m : members)
      for (std::size_t c = 0; c < C; ++c) mean[c] += lat[m * C + c];
    for (double& x : mean) x /= static_cast<double>(members.size());
    r.voxel_mean[v] = std::move(mean);
  }
  return r;
}

Tensor rand_latents(Rng& rng, std::size_t n, std::size_t c) {
  Tensor t({n, c});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1, 1);
  return t;
}

}  // namespace

TEST(Voxelize, SingleGaussianAtVoxelCenter) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {4, 4, 2});
  std::vector<Vec3> pos = {grid.voxel_center(1, 2, 1)};
  Rng rng(1);
  Tensor lat = rand_latents(rng, 1, 64);
  VoxelizeResult r = voxelize(pos, lat, grid);
  std::size_t n = grid.num_voxels();
  std::size_t v = (1 * 4 + 2) * 2 + 1;
  double occ_sum = 0;
  for (std::size_t i = 0; i < n; ++i) occ_sum += r.occupancy[i];
  EXPECT_DOUBLE_EQ(occ_sum, 1.0);
  EXPECT_DOUBLE_EQ(r.occupancy[v], 1.0);
  for (std::size_t c = 0; c < 64; ++c) EXPECT_DOUBLE_EQ(r.volume[c * n + v], lat[c]);
  EXPECT_EQ(r.dropped, 0u);
}

TEST(Voxelize, TwoGaussiansSameVoxelAverage) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.5, {2, 2, 2});
  Vec3 c = grid.voxel_center(0, 0, 0);
  std::vector<Vec3> pos = {c, {c.x + 0.1, c.y - 0.1, c.z + 0.05}};
  Rng rng(2);
  Tensor lat = rand_latents(rng, 2, 64);
  VoxelizeResult r = voxelize(pos, lat, grid);
  std::size_t n = grid.num_voxels();
  for (std::size_t ch = 0; ch < 64; ++ch)
    EXPECT_DOUBLE_EQ(r.volume[ch * n], 0.5 * (lat[ch] + lat[64 + ch]));
}

TEST(Voxelize, TenThousandRandomMatchOracle) {
  Rng rng(3);
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {16, 16, 8});
  std::size_t n_gauss = 10000;
  std::vector<Vec3> pos(n_gauss);
  for (auto& p : pos)
    p = {rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5), rng.uniform(-0.5, 2.5)};
  Tensor lat = rand_latents(rng, n_gauss, 64);
  VoxelizeResult r = voxelize(pos, lat, grid);
  OracleResult oracle = oracle_voxelize(pos, lat, grid);
  EXPECT_EQ(r.dropped, oracle.dropped);
  std::size_t n = grid.num_voxels();
  for (std::size_t v = 0; v < n; ++v) {
    auto it = oracle.voxel_mean.find(v);
    EXPECT_DOUBLE_EQ(r.occupancy[v], it != oracle.voxel_mean.end() ? 1.0 : 0.0);
    for (std::size_t c = 0; c < 64; ++c) {
      double want = it != oracle.voxel_mean.end() ? it->second[c] : 0.0;
      ASSERT_NEAR(r.volume[c * n + v], want, 1e-12);
    }
  }
}

TEST(Voxelize, DroppedPlusBinnedEqualsInput) {
  Rng rng(4);
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {8, 8, 4});
  std::size_t n_gauss = 3000;
  std::vector<Vec3> pos(n_gauss);
  for (auto& p : pos) p = {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-1, 2)};
  VoxelBinning bin = bin_gaussians(pos, grid);
  EXPECT_EQ(bin.dropped + bin.binned, n_gauss);
  EXPECT_GT(bin.dropped, 0u);
}

TEST(Voxelize, PermutationInvariance) {
  Rng rng(5);
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {6, 6, 4});
  std::size_t n_gauss = 500;
  std::vector<Vec3> pos(n_gauss);
  for (auto& p : pos) p = {rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), rng.uniform(0, 1)};
  Tensor lat = rand_latents(rng, n_gauss, 16);
  Tensor a = voxelize(pos, lat, grid).volume;
  // reversed order
  std::vector<Vec3> pos_r(pos.rbegin(), pos.rend());
  Tensor lat_r({n_gauss, 16});
  for (std::size_t i = 0; i < n_gauss; ++i)
    for (std::size_t c = 0; c < 16; ++c) lat_r[i * 16 + c] = lat[(n_gauss - 1 - i) * 16 + c];
  Tensor b = voxelize(pos_r, lat_r, grid).volume;
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a[i], b[i], 1e-12);
}

TEST(Voxelize, ParallelBitIdentical) {
  Rng rng(6);
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {16, 16, 8});
  std::size_t n_gauss = 20000;
  std::vector<Vec3> pos(n_gauss);
  for (auto& p : pos) p = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 2)};
  Tensor lat = rand_latents(rng, n_gauss, 64);
  int keep = thread_count();
  thread_count() = 1;
  Tensor serial = voxelize(pos, lat, grid).volume;
  thread_count() = 4;
  Tensor parallel = voxelize(pos, lat, grid).volume;
  thread_count() = keep;
  EXPECT_EQ(0, std::memcmp(serial.data(), parallel.data(), serial.numel() * 8));
}

TEST(Occupancy, MaskZeroesEncoderPaddingLeakage) {
  // the encoder's zero padding writes nonzero values into empty voxels via
  // the bias and neighboring features; masking must zero them exactly
  Rng rng(7);
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.5, {4, 4, 2});
  std::vector<Vec3> pos = {grid.voxel_center(1, 1, 0)};
  Tensor lat = rand_latents(rng, 1, 8);
  VoxelizeResult vr = voxelize(pos, lat, grid);

  ad::Graph g;
  Rng prng(8);
  Tensor w1({4, 8, 3, 3, 3}), b1({4}), w2({4, 4, 3, 3, 3}), b2({4});
  for (auto* t : {&w1, &b1, &w2, &b2})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = prng.uniform(-1, 1);
  auto enc = encode_gaussian_volume(g, g.constant(vr.volume),
                                    {g.constant(w1), g.constant(b1)},
                                    {g.constant(w2), g.constant(b2)});
  const Tensor& raw = g.value(enc);
  std::size_t n = grid.num_voxels();
  bool leaked = false;
  for (std::size_t v = 0; v < n; ++v)
    if (vr.occupancy[v] == 0.0 && std::abs(raw[v]) > 0) leaked = true;
  EXPECT_TRUE(leaked);  // padding really wrote into empty voxels

  auto masked = apply_occupancy(g, enc, g.constant(vr.occupancy));
  const Tensor& m = g.value(masked);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t v = 0; v < n; ++v)
      if (vr.occupancy[v] == 0.0) ASSERT_EQ(m[c * n + v], 0.0);
}

TEST(Occupancy, AllZeroAndAllOne) {
  Rng rng(9);
  Tensor x({3, 2, 2, 2});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
  Tensor zeros({2, 2, 2}), ones = Tensor::full({2, 2, 2}, 1.0);
  Tensor m0 = apply_occupancy(x, zeros);
  Tensor m1 = apply_occupancy(x, ones);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_EQ(m0[i], 0.0);
    EXPECT_DOUBLE_EQ(m1[i], x[i]);
  }
}

TEST(Occupancy, Idempotent) {
  Rng rng(10);
  Tensor x({3, 2, 2, 2});
  Tensor occ({2, 2, 2});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
  for (std::size_t i = 0; i < occ.numel(); ++i) occ[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Tensor once = apply_occupancy(x, occ);
  Tensor twice = apply_occupancy(once, occ);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(twice[i], once[i]);
}

TEST(AdaptiveWeights, SumToOneAndOpenInterval) {
  Rng rng(11);
  for (int rep = 0; rep < 100; ++rep) {
    ad::Graph g;
    // init-scale weight net over unit-range volumes (the operating regime)
    Tensor v({4, 3, 3, 2}), vg({4, 3, 3, 2});
    for (auto* t : {&v, &vg})
      for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-1, 1);
    WeightNetParams wn = make_weight_net(rng, 4);
    Tensor w = wn.c.w, b = wn.c.b;
    AdaptiveWeights aw = adaptive_weights(g, g.constant(v), g.constant(vg),
                                          {g.constant(w), g.constant(b)});
    const Tensor& av = g.value(aw.alpha_v);
    const Tensor& ag = g.value(aw.alpha_g);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      ASSERT_GT(av[i], 0.0);
      ASSERT_LT(av[i], 1.0);
      ASSERT_GT(ag[i], 0.0);
      ASSERT_LT(ag[i], 1.0);
      ASSERT_NEAR(av[i] + ag[i], 1.0, 1e-12);
    }
  }
}

TEST(AdaptiveWeights, ZeroParametersGiveExactHalf) {
  ad::Graph g;
  Rng rng(12);
  Tensor v({4, 2, 2, 2}), vg({4, 2, 2, 2});
  for (auto* t : {&v, &vg})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-3, 3);
  AdaptiveWeights aw = adaptive_weights(g, g.constant(v), g.constant(vg),
                                        {g.constant(Tensor({2, 8, 1, 1, 1})),
                                         g.constant(Tensor({2}))});
  const Tensor& av = g.value(aw.alpha_v);
  const Tensor& ag = g.value(aw.alpha_g);
  for (std::size_t i = 0; i < av.numel(); ++i) {
    EXPECT_EQ(av[i], 0.5);
    EXPECT_EQ(ag[i], 0.5);
  }
}

TEST(CrossEnhance, ShapeContractAndZeroComposition) {
  // V_g all zero and alpha from zero parameters: output = F([0.5*V, 0])
  ad::Graph g;
  Rng rng(13);
  std::size_t C = 3;
  Tensor v({C, 3, 3, 2});
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = rng.uniform(-1, 1);
  Tensor vg({C, 3, 3, 2});
  Tensor f1({C, 2 * C, 3, 3, 3}), fb1({C}), f2({C, C, 3, 3, 3}), fb2({C});
  for (auto* t : {&f1, &fb1, &f2, &fb2})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-1, 1);

  AdaptiveWeights aw = adaptive_weights(g, g.constant(v), g.constant(vg),
                                        {g.constant(Tensor({2, 2 * C, 1, 1, 1})),
                                         g.constant(Tensor({2}))});
  auto out = cross_enhance(g, g.constant(v), g.constant(vg), aw.alpha_v, aw.alpha_g,
                           {g.constant(f1), g.constant(fb1)}, {g.constant(f2), g.constant(fb2)});
  const Tensor& y = g.value(out);
  EXPECT_EQ(y.shape(), v.shape());

  // reference: half-scaled V concatenated with zeros through the same convs
  auto half_v = g.scale_add(g.constant(v), 0.5);
  auto cat = g.concat({half_v, g.constant(vg)}, 0);
  auto want = g.conv3d(g.relu(g.conv3d(cat, g.constant(f1), g.constant(fb1))),
                       g.constant(f2), g.constant(fb2));
  const Tensor& w = g.value(want);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], w[i], 1e-12);
}

TEST(GaussianEncoder, ZeroInputZeroBiasGivesZero) {
  ad::Graph g;
  auto out = encode_gaussian_volume(
      g, g.constant(Tensor({8, 3, 3, 2})),
      {g.constant(Tensor({4, 8, 3, 3, 3})), g.constant(Tensor({4}))},
      {g.constant(Tensor({4, 4, 3, 3, 3})), g.constant(Tensor({4}))});
  const Tensor& y = g.value(out);
  EXPECT_EQ(y.shape(), (std::vector<std::size_t>{4, 3, 3, 2}));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], 0.0);
}
