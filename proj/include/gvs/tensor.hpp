#pragma once

// Dense row-major tensor of 64-bit floats. Carrier type for every feature
// map, volume and gradient in the library.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gvs {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count_(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count_(shape_) != data_.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape_) +
                                  " does not match data length " +
                                  std::to_string(data_.size()));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Linear offset of a multi-index, row-major.
  std::size_t index(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) off = off * shape_[d++] + i;
    return off;
  }

  double& at(std::initializer_list<std::size_t> idx) { return data_[index(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return data_[index(idx)]; }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
  }
  std::string shape_str() const { return shape_str(shape_); }

 private:
  static std::size_t count_(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
      if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension");
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// GVT1 tensor dump format: magic "GVT1", little-endian u32 rank, u32 dims,
// then raw little-endian f64 payload in row-major order.

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64_le(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace detail

inline void write_gvt(std::ostream& os, const Tensor& t) {
  os.write("GVT1", 4);
  detail::put_u32_le(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32_le(os, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.numel(); ++i) detail::put_f64_le(os, t[i]);
}

inline Tensor read_gvt(std::istream& is, const std::string& name = "<stream>") {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "GVT1", 4) != 0)
    throw std::runtime_error("GVT1: bad magic in " + name);
  std::uint32_t rank = detail::get_u32_le(is);
  if (!is || rank > 8) throw std::runtime_error("GVT1: bad rank in " + name);
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = detail::get_u32_le(is);
  if (!is) throw std::runtime_error("GVT1: truncated header in " + name);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = detail::get_f64_le(is);
  if (!is) throw std::runtime_error("GVT1: truncated payload in " + name);
  return t;
}

inline void save_gvt(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("GVT1: cannot open " + path + " for writing");
  write_gvt(os, t);
}

inline Tensor load_gvt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("GVT1: cannot open " + path);
  return read_gvt(is, path);
}

}  // namespace gvs
