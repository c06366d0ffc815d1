#pragma once

#include <utility>
#include <vector>

#include "cdfnet/layers.hpp"
#include "cdfnet/tensor.hpp"

namespace cdfnet {

/// The repeated composite unit: conv, then ReLU, then batch norm.
template <typename T>
struct CompositeParams {
  Conv2dParams<T> conv;
  BatchNormParams<T> bn;

  static CompositeParams make(int c_in, int c_out, int k) {
    CompositeParams p;
    p.conv = Conv2dParams<T>::make(c_in, c_out, k);
    p.bn = BatchNormParams<T>::make(c_out);
    return p;
  }
};

template <typename T>
struct CompositeCache {
  Tensor<T> x;        // conv input
  Tensor<T> pre_act;  // conv output, needed by the ReLU backward
  BatchNormCache<T> bn;
};

template <typename T>
Tensor<T> composite_forward(const Tensor<T>& x, CompositeParams<T>& p,
                            Mode mode, CompositeCache<T>* cache = nullptr);

template <typename T>
Tensor<T> composite_backward(CompositeParams<T>& p,
                             const CompositeCache<T>& cache,
                             const Tensor<T>& grad_out);

enum class BlockKind { kCompetitive, kVanilla };

/// Three composite units with either competitive (elementwise max) or
/// additive-width (channel concat) feature reuse between them.
///
/// Competitive, all at the input width:
///   y1 = max(h1(x), x); y2 = max(h2(y1), y1); out = h3(y2)
/// Concatenating, with growth width g:
///   y1 = [h1(x), x]; y2 = [h2(y1), y1, x]; out = h3(y2)
/// so h3 sees g + (c_in + g) + c_in channels — the block input is reused
/// both inside y1 and again directly.
template <typename T>
struct DenseBlockParams {
  BlockKind kind = BlockKind::kCompetitive;
  int c_in = 0;
  int c_out = 0;
  int growth = 0;  // concatenating flavor only
  CompositeParams<T> h1, h2, h3;

  static DenseBlockParams make(BlockKind kind, int c_in, int c_out, int growth,
                               int k = 3);
};

template <typename T>
struct DenseBlockCache {
  CompositeCache<T> c1, c2, c3;
  ArgIndex m1, m2;  // competitive flavor only
};

template <typename T>
Tensor<T> dense_block_forward(const Tensor<T>& x, DenseBlockParams<T>& p,
                              Mode mode, DenseBlockCache<T>* cache = nullptr);

template <typename T>
Tensor<T> dense_block_backward(DenseBlockParams<T>& p,
                               const DenseBlockCache<T>& cache,
                               const Tensor<T>& grad_out);

/// Competitive skip join: unpool the decoded map to the skip resolution,
/// mix it with the skip through a 1x1 conv, then take the elementwise max
/// against the skip itself. Output width equals the skip width.
template <typename T>
struct CubParams {
  int c_dec = 0;
  int c_skip = 0;
  Conv2dParams<T> joint;  // 1x1, (c_dec + c_skip) -> c_skip

  static CubParams make(int c_dec, int c_skip) {
    CubParams p;
    p.c_dec = c_dec;
    p.c_skip = c_skip;
    p.joint = Conv2dParams<T>::make(c_dec + c_skip, c_skip, 1);
    return p;
  }
};

template <typename T>
struct CubCache {
  Tensor<T> joint_in;  // concat(unpooled, skip)
  ArgIndex m;
  const PoolIndices* idx = nullptr;
};

template <typename T>
Tensor<T> cub_forward(const Tensor<T>& decoded, const PoolIndices& idx,
                      const Tensor<T>& skip, CubParams<T>& p,
                      CubCache<T>* cache = nullptr);

/// Returns (grad wrt decoded, grad wrt skip).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> cub_backward(CubParams<T>& p,
                                             const CubCache<T>& cache,
                                             const Tensor<T>& grad_out);

/// Concatenating skip join: [unpool(decoded), skip], width c_dec + c_skip.
template <typename T>
Tensor<T> unpool_concat_forward(const Tensor<T>& decoded,
                                const PoolIndices& idx, const Tensor<T>& skip);

template <typename T>
std::pair<Tensor<T>, Tensor<T>> unpool_concat_backward(
    const PoolIndices& idx, int c_dec, int c_skip, const Tensor<T>& grad_out);

/// Channel width h3 consumes, per flavor.
int dense_block_h3_width(BlockKind kind, int c_in, int growth);

}  // namespace cdfnet
