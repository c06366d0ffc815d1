#include "cdfnet/tensor.hpp"

#include <cmath>

namespace cdfnet {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
         std::to_string(h) + "," + std::to_string(w) + ")";
}

LabelMap::LabelMap(int n_, int h_, int w_) : n(n_), h(h_), w(w_) {
  if (n < 1 || h < 1 || w < 1)
    throw DimensionError("label map extents must all be >= 1, got (" +
                         std::to_string(n) + "," + std::to_string(h) + "," +
                         std::to_string(w) + ")");
  data.assign(static_cast<std::size_t>(numel()), 0);
}

int Rng::uniform_int(int n) {
  if (n <= 0)
    throw DimensionError("uniform_int needs a positive bound, got " +
                         std::to_string(n));
  // Rejection sampling keeps the draw unbiased for every n.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = eng_();
  } while (x >= limit);
  return static_cast<int>(x % bound);
}

double Rng::normal(double mean, double stddev) {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double two_pi = 6.283185307179586476925286766559;
  double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  return mean + stddev * z;
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename T>
std::pair<Tensor<T>, ArgIndex> elementwise_max(
    const std::vector<const Tensor<T>*>& inputs) {
  if (inputs.size() < 2)
    throw DimensionError("elementwise_max needs at least 2 inputs, got " +
                         std::to_string(inputs.size()));
  if (inputs.size() > 255)
    throw DimensionError("elementwise_max supports at most 255 inputs");
  const Shape shape = inputs[0]->shape;
  for (std::size_t l = 1; l < inputs.size(); ++l) {
    if (inputs[l]->shape != shape)
      throw DimensionError("elementwise_max input " + std::to_string(l) +
                           " has shape " + inputs[l]->shape.str() +
                           ", expected " + shape.str());
  }

  Tensor<T> out(shape);
  ArgIndex arg;
  arg.shape = shape;
  arg.winner.assign(out.data.size(), 0);

  const std::int64_t total = shape.numel();
  const int L = static_cast<int>(inputs.size());
#pragma omp parallel for schedule(static) if (total > 4096)
  for (std::int64_t e = 0; e < total; ++e) {
    T best = inputs[0]->data[e];
    std::uint8_t who = 0;
    for (int l = 1; l < L; ++l) {
      const T v = inputs[l]->data[e];
      if (v > best) {
        best = v;
        who = static_cast<std::uint8_t>(l);
      }
    }
    out.data[e] = best;
    arg.winner[e] = who;
  }
  return {std::move(out), std::move(arg)};
}

template std::pair<Tensor<float>, ArgIndex> elementwise_max(
    const std::vector<const Tensor<float>*>&);
template std::pair<Tensor<double>, ArgIndex> elementwise_max(
    const std::vector<const Tensor<double>*>&);

}  // namespace cdfnet
