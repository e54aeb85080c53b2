#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "gvs/random.hpp"
#include "gvs/tensor.hpp"

using namespace gvs;

TEST(Tensor, ShapeAndData) {
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  t.at({1, 2}) = 5.0;
  EXPECT_DOUBLE_EQ(t[5], 5.0);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  EXPECT_THROW(Tensor({0, 2}), std::invalid_argument);
}

TEST(Tensor, GvtRoundTripIsBitExact) {
  Rng rng(7);
  Tensor t({3, 4, 5});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-10, 10);
  std::stringstream ss;
  write_gvt(ss, t);
  Tensor back = read_gvt(ss);
  ASSERT_TRUE(back.same_shape(t));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    std::uint64_t a, b;
    std::memcpy(&a, &t[i], 8);
    std::memcpy(&b, &back[i], 8);
    EXPECT_EQ(a, b) << "at " << i;
  }
}

TEST(Tensor, GvtHeaderLayout) {
  Tensor t({2}, {1.0, 2.0});
  std::stringstream ss;
  write_gvt(ss, t);
  std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4 + 4 + 4 + 16u);
  EXPECT_EQ(bytes.substr(0, 4), "GVT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // rank, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);  // dim 0
}

TEST(Tensor, GvtTruncatedFileNamesFile) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "gvs_tensor_test";
  fs::create_directories(dir);
  std::string path = (dir / "truncated.gvt").string();
  {
    Tensor t({4, 4});
    save_gvt(path, t);
  }
  fs::resize_file(path, 20);
  try {
    load_gvt(path);
    FAIL() << "expected truncation error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated.gvt"), std::string::npos);
  }
}

TEST(Tensor, GvtBadMagic) {
  std::stringstream ss;
  ss << "NOPE";
  EXPECT_THROW(read_gvt(ss), std::runtime_error);
}

TEST(Rng, KnownXoshiroStream) {
  // splitmix64-seeded xoshiro256**: deterministic across platforms
  Rng a(12345), b(12345);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(12345), d(54321);
  EXPECT_NE(c.next_u64(), d.next_u64());
  Rng e(0);
  for (int i = 0; i < 1000; ++i) {
    double u = e.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}
