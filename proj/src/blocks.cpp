#include "cdfnet/blocks.hpp"

#include <string>

#include "cdfnet/errors.hpp"

namespace cdfnet {

int dense_block_h3_width(BlockKind kind, int c_in, int growth) {
  return kind == BlockKind::kCompetitive ? c_in : 2 * c_in + 2 * growth;
}

template <typename T>
Tensor<T> composite_forward(const Tensor<T>& x, CompositeParams<T>& p,
                            Mode mode, CompositeCache<T>* cache) {
  Tensor<T> pre = conv2d_forward(x, p.conv);
  Tensor<T> act = relu_forward(pre);
  if (cache) {
    cache->x = x;
    cache->pre_act = std::move(pre);
    return batchnorm_forward(act, p.bn, mode, &cache->bn);
  }
  return batchnorm_forward(act, p.bn, mode);
}

template <typename T>
Tensor<T> composite_backward(CompositeParams<T>& p,
                             const CompositeCache<T>& cache,
                             const Tensor<T>& grad_out) {
  Tensor<T> g = batchnorm_backward(p.bn, cache.bn, grad_out);
  g = relu_backward(cache.pre_act, g);
  return conv2d_backward(cache.x, p.conv, g);
}

template <typename T>
DenseBlockParams<T> DenseBlockParams<T>::make(BlockKind kind, int c_in,
                                              int c_out, int growth, int k) {
  DenseBlockParams p;
  p.kind = kind;
  p.c_in = c_in;
  p.c_out = c_out;
  if (kind == BlockKind::kCompetitive) {
    p.growth = 0;
    p.h1 = CompositeParams<T>::make(c_in, c_in, k);
    p.h2 = CompositeParams<T>::make(c_in, c_in, k);
    p.h3 = CompositeParams<T>::make(c_in, c_out, k);
  } else {
    if (growth < 1) {
      throw DimensionError("dense block: growth must be >= 1, got " +
                           std::to_string(growth));
    }
    p.growth = growth;
    p.h1 = CompositeParams<T>::make(c_in, growth, k);
    p.h2 = CompositeParams<T>::make(c_in + growth, growth, k);
    p.h3 = CompositeParams<T>::make(dense_block_h3_width(kind, c_in, growth),
                                    c_out, k);
  }
  return p;
}

template <typename T>
Tensor<T> dense_block_forward(const Tensor<T>& x, DenseBlockParams<T>& p,
                              Mode mode, DenseBlockCache<T>* cache) {
  if (x.shape.c != p.c_in) {
    throw DimensionError("dense block: input has " + std::to_string(x.shape.c) +
                         " channels, expected " + std::to_string(p.c_in));
  }
  CompositeCache<T>* c1 = cache ? &cache->c1 : nullptr;
  CompositeCache<T>* c2 = cache ? &cache->c2 : nullptr;
  CompositeCache<T>* c3 = cache ? &cache->c3 : nullptr;

  if (p.kind == BlockKind::kCompetitive) {
    Tensor<T> f1 = composite_forward(x, p.h1, mode, c1);
    auto [y1, m1] = elementwise_max(f1, x);
    Tensor<T> f2 = composite_forward(y1, p.h2, mode, c2);
    auto [y2, m2] = elementwise_max(f2, y1);
    if (cache) {
      cache->m1 = std::move(m1);
      cache->m2 = std::move(m2);
    }
    return composite_forward(y2, p.h3, mode, c3);
  }

  Tensor<T> f1 = composite_forward(x, p.h1, mode, c1);
  Tensor<T> y1 = concat_channels(f1, x);
  Tensor<T> f2 = composite_forward(y1, p.h2, mode, c2);
  Tensor<T> y2 = concat_channels(concat_channels(f2, y1), x);
  return composite_forward(y2, p.h3, mode, c3);
}

template <typename T>
Tensor<T> dense_block_backward(DenseBlockParams<T>& p,
                               const DenseBlockCache<T>& cache,
                               const Tensor<T>& grad_out) {
  Tensor<T> g_y2 = composite_backward(p.h3, cache.c3, grad_out);

  if (p.kind == BlockKind::kCompetitive) {
    auto gs2 = maxout_backward(cache.m2, g_y2, 2);
    Tensor<T> g_y1 = composite_backward(p.h2, cache.c2, gs2[0]);
    add_inplace(g_y1, gs2[1]);
    auto gs1 = maxout_backward(cache.m1, g_y1, 2);
    Tensor<T> g_x = composite_backward(p.h1, cache.c1, gs1[0]);
    add_inplace(g_x, gs1[1]);
    return g_x;
  }

  const int g = p.growth, ci = p.c_in;
  // y2 = [f2 (g) | y1 (ci + g) | x (ci)]
  Tensor<T> g_f2 = slice_channels(g_y2, 0, g);
  Tensor<T> g_y1 = slice_channels(g_y2, g, g + ci + g);
  Tensor<T> g_x = slice_channels(g_y2, g + ci + g, g + ci + g + ci);
  add_inplace(g_y1, composite_backward(p.h2, cache.c2, g_f2));
  // y1 = [f1 (g) | x (ci)]
  Tensor<T> g_f1 = slice_channels(g_y1, 0, g);
  add_inplace(g_x, slice_channels(g_y1, g, g + ci));
  add_inplace(g_x, composite_backward(p.h1, cache.c1, g_f1));
  return g_x;
}

template <typename T>
Tensor<T> cub_forward(const Tensor<T>& decoded, const PoolIndices& idx,
                      const Tensor<T>& skip, CubParams<T>& p,
                      CubCache<T>* cache) {
  if (decoded.shape.c != p.c_dec || skip.shape.c != p.c_skip) {
    throw DimensionError("skip join: got widths " +
                         std::to_string(decoded.shape.c) + " and " +
                         std::to_string(skip.shape.c) + ", expected " +
                         std::to_string(p.c_dec) + " and " +
                         std::to_string(p.c_skip));
  }
  Tensor<T> up = max_unpool2x2(decoded, idx);
  Tensor<T> joint_in = concat_channels(up, skip);
  Tensor<T> mixed = conv2d_forward(joint_in, p.joint);
  auto [out, m] = elementwise_max(mixed, skip);
  if (cache) {
    cache->joint_in = std::move(joint_in);
    cache->m = std::move(m);
    cache->idx = &idx;
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> cub_backward(CubParams<T>& p,
                                             const CubCache<T>& cache,
                                             const Tensor<T>& grad_out) {
  auto gs = maxout_backward(cache.m, grad_out, 2);
  Tensor<T> g_joint_in = conv2d_backward(cache.joint_in, p.joint, gs[0]);
  auto [g_up, g_skip] = concat_backward(g_joint_in, p.c_dec, p.c_skip);
  add_inplace(g_skip, gs[1]);
  Tensor<T> g_decoded = max_unpool2x2_backward(*cache.idx, g_up);
  return {std::move(g_decoded), std::move(g_skip)};
}

template <typename T>
Tensor<T> unpool_concat_forward(const Tensor<T>& decoded,
                                const PoolIndices& idx, const Tensor<T>& skip) {
  return concat_channels(max_unpool2x2(decoded, idx), skip);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> unpool_concat_backward(
    const PoolIndices& idx, int c_dec, int c_skip, const Tensor<T>& grad_out) {
  auto [g_up, g_skip] = concat_backward(grad_out, c_dec, c_skip);
  return {max_unpool2x2_backward(idx, g_up), std::move(g_skip)};
}

#define CDFNET_BLOCKS_INSTANTIATE(T)                                           \
  template struct CompositeParams<T>;                                          \
  template struct DenseBlockParams<T>;                                         \
  template struct CubParams<T>;                                                \
  template Tensor<T> composite_forward<T>(const Tensor<T>&, CompositeParams<T>&, \
                                          Mode, CompositeCache<T>*);           \
  template Tensor<T> composite_backward<T>(CompositeParams<T>&,                \
                                           const CompositeCache<T>&,           \
                                           const Tensor<T>&);                  \
  template Tensor<T> dense_block_forward<T>(const Tensor<T>&,                  \
                                            DenseBlockParams<T>&, Mode,        \
                                            DenseBlockCache<T>*);              \
  template Tensor<T> dense_block_backward<T>(DenseBlockParams<T>&,             \
                                             const DenseBlockCache<T>&,        \
                                             const Tensor<T>&);                \
  template Tensor<T> cub_forward<T>(const Tensor<T>&, const PoolIndices&,      \
                                    const Tensor<T>&, CubParams<T>&,           \
                                    CubCache<T>*);                             \
  template std::pair<Tensor<T>, Tensor<T>> cub_backward<T>(                    \
      CubParams<T>&, const CubCache<T>&, const Tensor<T>&);                    \
  template Tensor<T> unpool_concat_forward<T>(const Tensor<T>&,                \
                                              const PoolIndices&,              \
                                              const Tensor<T>&);               \
  template std::pair<Tensor<T>, Tensor<T>> unpool_concat_backward<T>(          \
      const PoolIndices&, int, int, const Tensor<T>&);

CDFNET_BLOCKS_INSTANTIATE(float)
CDFNET_BLOCKS_INSTANTIATE(double)

#undef CDFNET_BLOCKS_INSTANTIATE

}  // namespace cdfnet
