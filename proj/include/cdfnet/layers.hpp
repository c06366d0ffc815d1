#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cdfnet/tensor.hpp"

namespace cdfnet {

enum class Mode { kTrain, kEval };

/// A learnable tensor paired with its gradient buffer.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = false;  // weight decay applies to conv weights only

  void init(Shape s, bool decay_) {
    value = Tensor<T>(s);
    grad = Tensor<T>(s);
    decay = decay_;
  }
};

/// Stride-1 zero-padded "same" convolution. weight is (C_out, C_in, k, k)
/// with k odd; bias is stored as a (1, C_out, 1, 1) tensor.
template <typename T>
struct Conv2dParams {
  Param<T> weight;
  Param<T> bias;

  static Conv2dParams make(int c_in, int c_out, int k);

  int in_channels() const { return weight.value.shape.c; }
  int out_channels() const { return weight.value.shape.n; }
  int kernel() const { return weight.value.shape.h; }
};

template <typename T>
struct BatchNormParams {
  Param<T> gamma;
  Param<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);

  static BatchNormParams make(int c);

  int channels() const { return gamma.value.shape.c; }
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::kTrain;
  Tensor<T> xhat;
  std::vector<T> inv_std;  // per channel
};

/// Winner positions of a 2x2/stride-2 max pool. Offsets are plane-local:
/// row * input_width + col inside the (H, W) plane of each (n, c) slice.
struct PoolIndices {
  Shape pooled;
  int in_h = 0;
  int in_w = 0;
  std::vector<std::uint32_t> off;
};

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Conv2dParams<T>& p);

/// Accumulates weight/bias gradients into p and returns grad_x.
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, Conv2dParams<T>& p,
                          const Tensor<T>& grad_out);

/// Train mode normalizes with batch statistics over (N,H,W) per channel
/// and folds them into the running estimates; eval mode applies the
/// running estimates as a per-element affine map.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BatchNormParams<T>& p,
                            Mode mode, BatchNormCache<T>* cache = nullptr);

template <typename T>
Tensor<T> batchnorm_backward(BatchNormParams<T>& p,
                             const BatchNormCache<T>& cache,
                             const Tensor<T>& grad_out);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);

/// Passes gradient where x > 0; the subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out);

template <typename T>
std::pair<Tensor<T>, ArgIndex> maxout_forward(
    const std::vector<const Tensor<T>*>& inputs) {
  return elementwise_max<T>(inputs);
}

/// Routes the whole gradient to the winning input per element; losing
/// inputs receive exact zeros.
template <typename T>
std::vector<Tensor<T>> maxout_backward(const ArgIndex& arg,
                                       const Tensor<T>& grad_out,
                                       int num_inputs);

template <typename T>
std::pair<Tensor<T>, PoolIndices> maxpool2x2_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> maxpool2x2_backward(const PoolIndices& idx,
                              const Tensor<T>& grad_out);

/// Doubles H and W, placing each value at its recorded winner offset and
/// exact zero everywhere else.
template <typename T>
Tensor<T> max_unpool2x2(const Tensor<T>& x_small, const PoolIndices& idx);

template <typename T>
Tensor<T> max_unpool2x2_backward(const PoolIndices& idx,
                                 const Tensor<T>& grad_out);

/// Stacks channels, a first: C_out = C_a + C_b.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Channels [c0, c1) of x as a new tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1);

/// Splits grad_out back into the two concatenated parts.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_backward(const Tensor<T>& grad_out,
                                                int c_a, int c_b);

/// a += b, elementwise.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

/// Per-pixel softmax across the channel extent, stabilized by max
/// subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_out);

/// Order-sensitive digest of every discrete routing choice (ReLU sign
/// masks, maxout winners, pool winners) made during a forward pass. Two
/// passes with equal digests took identical paths through every kink, so
/// finite differences across them are valid.
struct RoutingHash {
  std::uint64_t state = 0xCBF29CE484222325ULL;

  void add_byte(std::uint8_t b) {
    state ^= b;
    state *= 0x100000001B3ULL;
  }
  void add_u32(std::uint32_t v) {
    add_byte(static_cast<std::uint8_t>(v & 0xFF));
    add_byte(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    add_byte(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    add_byte(static_cast<std::uint8_t>((v >> 24) & 0xFF));
  }
  template <typename T>
  void add_sign_mask(const Tensor<T>& pre) {
    std::uint8_t acc = 0;
    int nbits = 0;
    for (const T v : pre.data) {
      acc = static_cast<std::uint8_t>((acc << 1) | (v > T(0) ? 1 : 0));
      if (++nbits == 8) {
        add_byte(acc);
        acc = 0;
        nbits = 0;
      }
    }
    if (nbits > 0) add_byte(acc);
  }
  void add_argindex(const ArgIndex& a) {
    for (std::uint8_t w : a.winner) add_byte(w);
  }
  void add_pool(const PoolIndices& p) {
    for (std::uint32_t o : p.off) add_u32(o);
  }
};

}  // namespace cdfnet
