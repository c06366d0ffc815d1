#pragma once

#include <cassert>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cdfnet/errors.hpp"

namespace cdfnet {

/// Extents of a dense NCHW tensor: batch, channels, height, width.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const;
};

/// Dense 4D array in NCHW row-major order. Element (n,c,i,j) lives at
/// offset ((n*C + c)*H + i)*W + j. All extents are at least 1.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() : shape{1, 1, 1, 1}, data(1, T(0)) {}

  explicit Tensor(Shape s) : shape(s) {
    validate();
    data.assign(static_cast<std::size_t>(s.numel()), T(0));
  }

  Tensor(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
    validate();
    if (static_cast<std::int64_t>(data.size()) != shape.numel())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape.str());
  }

  static Tensor zeros(Shape s) { return Tensor(s); }

  static Tensor full(Shape s, T v) {
    Tensor t(s);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  std::int64_t numel() const { return shape.numel(); }

  std::int64_t offset(int n, int c, int i, int j) const {
    assert(n >= 0 && n < shape.n && c >= 0 && c < shape.c);
    assert(i >= 0 && i < shape.h && j >= 0 && j < shape.w);
    return ((static_cast<std::int64_t>(n) * shape.c + c) * shape.h + i) *
               shape.w +
           j;
  }

  T& at(int n, int c, int i, int j) { return data[offset(n, c, i, j)]; }
  T at(int n, int c, int i, int j) const { return data[offset(n, c, i, j)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

 private:
  void validate() const {
    if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1)
      throw DimensionError("tensor extents must all be >= 1, got " +
                           shape.str());
  }
};

/// Per-pixel integer class labels, one plane per sample: dims (N, H, W).
struct LabelMap {
  int n = 1;
  int h = 1;
  int w = 1;
  std::vector<std::uint32_t> data;

  LabelMap() : data(1, 0) {}
  LabelMap(int n_, int h_, int w_);

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * h * w;
  }
  std::int64_t offset(int s, int i, int j) const {
    assert(s >= 0 && s < n && i >= 0 && i < h && j >= 0 && j < w);
    return (static_cast<std::int64_t>(s) * h + i) * w + j;
  }
  std::uint32_t& at(int s, int i, int j) { return data[offset(s, i, j)]; }
  std::uint32_t at(int s, int i, int j) const { return data[offset(s, i, j)]; }
};

/// Per-element index of the winning input of an elementwise max.
struct ArgIndex {
  Shape shape;
  std::vector<std::uint8_t> winner;
};

/// Seeded random source producing an identical draw sequence on every
/// platform. The engine is mt19937_64 (whose output sequence the standard
/// pins down); all value mappings are done here by hand because the
/// standard distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  int uniform_int(int n);

  /// Standard Box-Muller; both uniforms are drawn every call so the
  /// stream position does not depend on call parity.
  double normal(double mean, double stddev);

  template <typename T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
  }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent stream for (seed, index) pairs, splitmix64-mixed.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

/// Elementwise maximum over L >= 2 same-shaped inputs. The returned
/// ArgIndex records the winning input per element; ties go to the lowest
/// index.
template <typename T>
std::pair<Tensor<T>, ArgIndex> elementwise_max(
    const std::vector<const Tensor<T>*>& inputs);

template <typename T>
std::pair<Tensor<T>, ArgIndex> elementwise_max(const Tensor<T>& a,
                                               const Tensor<T>& b) {
  return elementwise_max<T>({&a, &b});
}

}  // namespace cdfnet
