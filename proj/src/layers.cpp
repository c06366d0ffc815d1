#include "cdfnet/layers.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "cdfnet/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cdfnet {

namespace {

[[noreturn]] void throw_channel_mismatch(const char* op, int got, int want) {
  throw DimensionError(std::string(op) + ": input has " + std::to_string(got) +
                       " channels, expected " + std::to_string(want));
}

}  // namespace

template <typename T>
Conv2dParams<T> Conv2dParams<T>::make(int c_in, int c_out, int k) {
  if (c_in < 1 || c_out < 1) {
    throw DimensionError("conv2d: channel counts must be >= 1, got " +
                         std::to_string(c_in) + " -> " + std::to_string(c_out));
  }
  if (k < 1 || k % 2 == 0) {
    throw DimensionError("conv2d: kernel must be odd and >= 1, got " +
                         std::to_string(k));
  }
  Conv2dParams<T> p;
  p.weight.init(Shape{c_out, c_in, k, k}, true);
  p.bias.init(Shape{1, c_out, 1, 1}, false);
  return p;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::make(int c) {
  BatchNormParams<T> p;
  p.gamma.init(Shape{1, c, 1, 1}, false);
  p.beta.init(Shape{1, c, 1, 1}, false);
  for (auto& g : p.gamma.value.data) g = T(1);
  p.running_mean = Tensor<T>::zeros(Shape{1, c, 1, 1});
  p.running_var = Tensor<T>::full(Shape{1, c, 1, 1}, T(1));
  return p;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Conv2dParams<T>& p) {
  const int C_in = p.in_channels(), C_out = p.out_channels(), k = p.kernel();
  if (x.shape.c != C_in) throw_channel_mismatch("conv2d", x.shape.c, C_in);
  const int N = x.shape.n, H = x.shape.h, W = x.shape.w;
  const int r = k / 2;
  Tensor<T> y(Shape{N, C_out, H, W});

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < C_out; ++co) {
      const T b = p.bias.value.data[static_cast<std::size_t>(co)];
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          T acc = b;
          for (int ci = 0; ci < C_in; ++ci) {
            for (int ki = 0; ki < k; ++ki) {
              const int ii = i + ki - r;
              if (ii < 0 || ii >= H) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int jj = j + kj - r;
                if (jj < 0 || jj >= W) continue;
                acc += x.at(n, ci, ii, jj) * p.weight.value.at(co, ci, ki, kj);
              }
            }
          }
          y.at(n, co, i, j) = acc;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, Conv2dParams<T>& p,
                          const Tensor<T>& grad_out) {
  const int C_in = p.in_channels(), C_out = p.out_channels(), k = p.kernel();
  if (x.shape.c != C_in) throw_channel_mismatch("conv2d", x.shape.c, C_in);
  const Shape want{x.shape.n, C_out, x.shape.h, x.shape.w};
  if (!(grad_out.shape == want)) {
    throw DimensionError("conv2d backward: grad shape " + grad_out.shape.str() +
                         " does not match output shape " + want.str());
  }
  const int N = x.shape.n, H = x.shape.h, W = x.shape.w;
  const int r = k / 2;

  // Each (co, ci, ki, kj) weight gradient is owned by one thread; the
  // (n, i, j) accumulation order inside is fixed, so results do not
  // depend on the thread count.
#pragma omp parallel for collapse(2) schedule(static)
  for (int co = 0; co < C_out; ++co) {
    for (int ci = 0; ci < C_in; ++ci) {
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          T acc = T(0);
          for (int n = 0; n < N; ++n) {
            for (int i = 0; i < H; ++i) {
              const int ii = i + ki - r;
              if (ii < 0 || ii >= H) continue;
              for (int j = 0; j < W; ++j) {
                const int jj = j + kj - r;
                if (jj < 0 || jj >= W) continue;
                acc += grad_out.at(n, co, i, j) * x.at(n, ci, ii, jj);
              }
            }
          }
          p.weight.grad.at(co, ci, ki, kj) += acc;
        }
      }
    }
  }

#pragma omp parallel for schedule(static)
  for (int co = 0; co < C_out; ++co) {
    T acc = T(0);
    for (int n = 0; n < N; ++n) {
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          acc += grad_out.at(n, co, i, j);
        }
      }
    }
    p.bias.grad.data[static_cast<std::size_t>(co)] += acc;
  }

  Tensor<T> gx(x.shape);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int ci = 0; ci < C_in; ++ci) {
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          T acc = T(0);
          for (int co = 0; co < C_out; ++co) {
            for (int ki = 0; ki < k; ++ki) {
              const int oi = i - ki + r;  // output row this tap fed
              if (oi < 0 || oi >= H) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int oj = j - kj + r;
                if (oj < 0 || oj >= W) continue;
                acc +=
                    grad_out.at(n, co, oi, oj) * p.weight.value.at(co, ci, ki, kj);
              }
            }
          }
          gx.at(n, ci, i, j) = acc;
        }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BatchNormParams<T>& p,
                            Mode mode, BatchNormCache<T>* cache) {
  const int C = p.channels();
  if (x.shape.c != C) throw_channel_mismatch("batchnorm", x.shape.c, C);
  const int N = x.shape.n, H = x.shape.h, W = x.shape.w;
  const T m = static_cast<T>(N) * H * W;

  Tensor<T> y(x.shape);
  if (cache) {
    cache->mode = mode;
    cache->inv_std.assign(static_cast<std::size_t>(C), T(0));
  }

  if (mode == Mode::kTrain) {
    if (cache) cache->xhat = Tensor<T>(x.shape);
    std::vector<T> mean(static_cast<std::size_t>(C)), inv(static_cast<std::size_t>(C));
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
      T sum = T(0);
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) sum += x.at(n, c, i, j);
      const T mu = sum / m;
      T var = T(0);
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T d = x.at(n, c, i, j) - mu;
            var += d * d;
          }
      var /= m;  // biased
      mean[static_cast<std::size_t>(c)] = mu;
      inv[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + p.epsilon);
      p.running_mean.data[static_cast<std::size_t>(c)] =
          (T(1) - p.momentum) * p.running_mean.data[static_cast<std::size_t>(c)] +
          p.momentum * mu;
      p.running_var.data[static_cast<std::size_t>(c)] =
          (T(1) - p.momentum) * p.running_var.data[static_cast<std::size_t>(c)] +
          p.momentum * var;
    }
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const T mu = mean[static_cast<std::size_t>(c)];
        const T is = inv[static_cast<std::size_t>(c)];
        const T g = p.gamma.value.data[static_cast<std::size_t>(c)];
        const T b = p.beta.value.data[static_cast<std::size_t>(c)];
        for (int i = 0; i < H; ++i) {
          for (int j = 0; j < W; ++j) {
            const T xh = (x.at(n, c, i, j) - mu) * is;
            if (cache) cache->xhat.at(n, c, i, j) = xh;
            y.at(n, c, i, j) = g * xh + b;
          }
        }
      }
    }
    if (cache) {
      for (int c = 0; c < C; ++c)
        cache->inv_std[static_cast<std::size_t>(c)] = inv[static_cast<std::size_t>(c)];
    }
  } else {
    if (cache) cache->xhat = Tensor<T>(x.shape);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const T mu = p.running_mean.data[static_cast<std::size_t>(c)];
        const T is = T(1) / std::sqrt(p.running_var.data[static_cast<std::size_t>(c)] +
                                      p.epsilon);
        const T g = p.gamma.value.data[static_cast<std::size_t>(c)];
        const T b = p.beta.value.data[static_cast<std::size_t>(c)];
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T xh = (x.at(n, c, i, j) - mu) * is;
            if (cache) cache->xhat.at(n, c, i, j) = xh;
            y.at(n, c, i, j) = g * xh + b;
          }
      }
    }
    if (cache) {
      for (int c = 0; c < C; ++c)
        cache->inv_std[static_cast<std::size_t>(c)] =
            T(1) / std::sqrt(p.running_var.data[static_cast<std::size_t>(c)] + p.epsilon);
    }
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_backward(BatchNormParams<T>& p,
                             const BatchNormCache<T>& cache,
                             const Tensor<T>& grad_out) {
  const int C = p.channels();
  if (grad_out.shape.c != C) throw_channel_mismatch("batchnorm", grad_out.shape.c, C);
  const int N = grad_out.shape.n, H = grad_out.shape.h, W = grad_out.shape.w;
  Tensor<T> gx(grad_out.shape);

  if (cache.xhat.numel() == 0) {
    throw DimensionError("batchnorm backward: cache missing normalized activations");
  }

  if (cache.mode == Mode::kEval) {
    // With frozen statistics the layer is a per-channel affine map.
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
      const T scale = p.gamma.value.data[static_cast<std::size_t>(c)] *
                      cache.inv_std[static_cast<std::size_t>(c)];
      T gsum = T(0), bsum = T(0);
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T go = grad_out.at(n, c, i, j);
            gx.at(n, c, i, j) = go * scale;
            bsum += go;
            gsum += go * cache.xhat.at(n, c, i, j);
          }
      p.gamma.grad.data[static_cast<std::size_t>(c)] += gsum;
      p.beta.grad.data[static_cast<std::size_t>(c)] += bsum;
    }
    return gx;
  }
  const T m = static_cast<T>(N) * H * W;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    const T g = p.gamma.value.data[static_cast<std::size_t>(c)];
    const T is = cache.inv_std[static_cast<std::size_t>(c)];
    T sum_go = T(0), sum_go_xh = T(0);
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const T go = grad_out.at(n, c, i, j);
          sum_go += go;
          sum_go_xh += go * cache.xhat.at(n, c, i, j);
        }
    p.gamma.grad.data[static_cast<std::size_t>(c)] += sum_go_xh;
    p.beta.grad.data[static_cast<std::size_t>(c)] += sum_go;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const T go = grad_out.at(n, c, i, j);
          const T xh = cache.xhat.at(n, c, i, j);
          gx.at(n, c, i, j) =
              g * is / m * (m * go - sum_go - xh * sum_go_xh);
        }
  }
  return gx;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  const std::int64_t total = static_cast<std::int64_t>(x.numel());
#pragma omp parallel for schedule(static) if (total > 4096)
  for (std::int64_t e = 0; e < total; ++e) {
    const T v = x.data[static_cast<std::size_t>(e)];
    y.data[static_cast<std::size_t>(e)] = v > T(0) ? v : T(0);
  }
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  if (!(x.shape == grad_out.shape)) {
    throw DimensionError("relu backward: grad shape " + grad_out.shape.str() +
                         " does not match input shape " + x.shape.str());
  }
  Tensor<T> gx(x.shape);
  const std::int64_t total = static_cast<std::int64_t>(x.numel());
#pragma omp parallel for schedule(static) if (total > 4096)
  for (std::int64_t e = 0; e < total; ++e) {
    gx.data[static_cast<std::size_t>(e)] =
        x.data[static_cast<std::size_t>(e)] > T(0)
            ? grad_out.data[static_cast<std::size_t>(e)]
            : T(0);
  }
  return gx;
}

template <typename T>
std::vector<Tensor<T>> maxout_backward(const ArgIndex& arg,
                                       const Tensor<T>& grad_out,
                                       int num_inputs) {
  if (!(arg.shape == grad_out.shape)) {
    throw DimensionError("maxout backward: grad shape " + grad_out.shape.str() +
                         " does not match recorded shape " + arg.shape.str());
  }
  std::vector<Tensor<T>> gs;
  gs.reserve(static_cast<std::size_t>(num_inputs));
  for (int l = 0; l < num_inputs; ++l) gs.push_back(Tensor<T>::zeros(arg.shape));
  const std::int64_t total = static_cast<std::int64_t>(grad_out.numel());
#pragma omp parallel for schedule(static) if (total > 4096)
  for (std::int64_t e = 0; e < total; ++e) {
    const std::uint8_t w = arg.winner[static_cast<std::size_t>(e)];
    gs[w].data[static_cast<std::size_t>(e)] = grad_out.data[static_cast<std::size_t>(e)];
  }
  return gs;
}

template <typename T>
std::pair<Tensor<T>, PoolIndices> maxpool2x2_forward(const Tensor<T>& x) {
  const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
  if (H % 2 != 0 || W % 2 != 0) {
    throw DimensionError("maxpool2x2: spatial extents must be even, got " +
                         x.shape.str());
  }
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> y(Shape{N, C, Ho, Wo});
  PoolIndices idx;
  idx.pooled = y.shape;
  idx.in_h = H;
  idx.in_w = W;
  idx.off.assign(y.numel(), 0);

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oi = 0; oi < Ho; ++oi) {
        for (int oj = 0; oj < Wo; ++oj) {
          const int i0 = 2 * oi, j0 = 2 * oj;
          // row-major window scan; strict > keeps the first maximum
          T best = x.at(n, c, i0, j0);
          int bi = i0, bj = j0;
          for (int di = 0; di < 2; ++di) {
            for (int dj = 0; dj < 2; ++dj) {
              const T v = x.at(n, c, i0 + di, j0 + dj);
              if (v > best) {
                best = v;
                bi = i0 + di;
                bj = j0 + dj;
              }
            }
          }
          y.at(n, c, oi, oj) = best;
          const std::size_t flat =
              static_cast<std::size_t>(((n * C + c) * Ho + oi) * Wo + oj);
          idx.off[flat] = static_cast<std::uint32_t>(bi * W + bj);
        }
      }
    }
  }
  return {std::move(y), std::move(idx)};
}

namespace {

void check_pool_grad_shape(const PoolIndices& idx, const Shape& got) {
  if (!(got == idx.pooled)) {
    throw DimensionError("pool: shape " + got.str() +
                         " does not match recorded pooled shape " +
                         idx.pooled.str());
  }
}

// Serial pre-pass: exceptions must not cross an OpenMP region, so all
// offsets are vetted before any parallel scatter/gather uses them.
void check_pool_offsets(const PoolIndices& idx) {
  const int N = idx.pooled.n, C = idx.pooled.c, Ho = idx.pooled.h,
            Wo = idx.pooled.w;
  std::size_t flat = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oi = 0; oi < Ho; ++oi)
        for (int oj = 0; oj < Wo; ++oj, ++flat) {
          const std::uint32_t off = idx.off[flat];
          const int i = static_cast<int>(off) / idx.in_w;
          const int j = static_cast<int>(off) % idx.in_w;
          if (static_cast<std::int64_t>(off) >=
                  static_cast<std::int64_t>(idx.in_h) * idx.in_w ||
              i / 2 != oi || j / 2 != oj) {
            throw CorruptionError(
                "pool index " + std::to_string(off) +
                " falls outside its 2x2 window at pooled cell (" +
                std::to_string(oi) + ", " + std::to_string(oj) + ")");
          }
        }
}

}  // namespace

template <typename T>
Tensor<T> maxpool2x2_backward(const PoolIndices& idx, const Tensor<T>& grad_out) {
  check_pool_grad_shape(idx, grad_out.shape);
  check_pool_offsets(idx);
  const int N = idx.pooled.n, C = idx.pooled.c, Ho = idx.pooled.h, Wo = idx.pooled.w;
  Tensor<T> gx = Tensor<T>::zeros(Shape{N, C, idx.in_h, idx.in_w});
  // Windows are disjoint, so parallel scatter over pooled cells is safe.
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oi = 0; oi < Ho; ++oi) {
        for (int oj = 0; oj < Wo; ++oj) {
          const std::size_t flat =
              static_cast<std::size_t>(((n * C + c) * Ho + oi) * Wo + oj);
          const std::uint32_t off = idx.off[flat];
          const int i = static_cast<int>(off) / idx.in_w;
          const int j = static_cast<int>(off) % idx.in_w;
          gx.at(n, c, i, j) = grad_out.at(n, c, oi, oj);
        }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> max_unpool2x2(const Tensor<T>& x_small, const PoolIndices& idx) {
  check_pool_grad_shape(idx, x_small.shape);
  check_pool_offsets(idx);
  const int N = idx.pooled.n, C = idx.pooled.c, Ho = idx.pooled.h, Wo = idx.pooled.w;
  Tensor<T> y = Tensor<T>::zeros(Shape{N, C, idx.in_h, idx.in_w});
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oi = 0; oi < Ho; ++oi) {
        for (int oj = 0; oj < Wo; ++oj) {
          const std::size_t flat =
              static_cast<std::size_t>(((n * C + c) * Ho + oi) * Wo + oj);
          const std::uint32_t off = idx.off[flat];
          const int i = static_cast<int>(off) / idx.in_w;
          const int j = static_cast<int>(off) % idx.in_w;
          y.at(n, c, i, j) = x_small.at(n, c, oi, oj);
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> max_unpool2x2_backward(const PoolIndices& idx,
                                 const Tensor<T>& grad_out) {
  const Shape want{idx.pooled.n, idx.pooled.c, idx.in_h, idx.in_w};
  if (!(grad_out.shape == want)) {
    throw DimensionError("unpool backward: grad shape " + grad_out.shape.str() +
                         " does not match unpooled shape " + want.str());
  }
  check_pool_offsets(idx);
  const int N = idx.pooled.n, C = idx.pooled.c, Ho = idx.pooled.h, Wo = idx.pooled.w;
  Tensor<T> gx(idx.pooled);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oi = 0; oi < Ho; ++oi) {
        for (int oj = 0; oj < Wo; ++oj) {
          const std::size_t flat =
              static_cast<std::size_t>(((n * C + c) * Ho + oi) * Wo + oj);
          const std::uint32_t off = idx.off[flat];
          const int i = static_cast<int>(off) / idx.in_w;
          const int j = static_cast<int>(off) % idx.in_w;
          gx.at(n, c, oi, oj) = grad_out.at(n, c, i, j);
        }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.n != b.shape.n || a.shape.h != b.shape.h || a.shape.w != b.shape.w) {
    throw DimensionError("concat: shapes " + a.shape.str() + " and " +
                         b.shape.str() + " differ outside the channel extent");
  }
  const int N = a.shape.n, Ca = a.shape.c, Cb = b.shape.c;
  const int H = a.shape.h, W = a.shape.w;
  Tensor<T> y(Shape{N, Ca + Cb, H, W});
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < Ca + Cb; ++c) {
      const Tensor<T>& src = c < Ca ? a : b;
      const int cs = c < Ca ? c : c - Ca;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) y.at(n, c, i, j) = src.at(n, cs, i, j);
    }
  }
  return y;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  if (c0 < 0 || c1 > x.shape.c || c0 >= c1) {
    throw DimensionError("slice: range [" + std::to_string(c0) + ", " +
                         std::to_string(c1) + ") invalid for " + x.shape.str());
  }
  const int N = x.shape.n, H = x.shape.h, W = x.shape.w;
  Tensor<T> y(Shape{N, c1 - c0, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = c0; c < c1; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) y.at(n, c - c0, i, j) = x.at(n, c, i, j);
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_backward(const Tensor<T>& grad_out,
                                                int c_a, int c_b) {
  if (grad_out.shape.c != c_a + c_b) {
    throw DimensionError("concat backward: grad has " +
                         std::to_string(grad_out.shape.c) +
                         " channels, expected " + std::to_string(c_a + c_b));
  }
  return {slice_channels(grad_out, 0, c_a),
          slice_channels(grad_out, c_a, c_a + c_b)};
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape == b.shape)) {
    throw DimensionError("add: shapes " + a.shape.str() + " and " +
                         b.shape.str() + " differ");
  }
  const std::int64_t total = static_cast<std::int64_t>(a.numel());
#pragma omp parallel for schedule(static) if (total > 8192)
  for (std::int64_t e = 0; e < total; ++e)
    a.data[static_cast<std::size_t>(e)] += b.data[static_cast<std::size_t>(e)];
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
  Tensor<T> y(x.shape);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        T mx = x.at(n, 0, i, j);
        for (int c = 1; c < C; ++c) mx = std::max(mx, x.at(n, c, i, j));
        T z = T(0);
        for (int c = 0; c < C; ++c) {
          const T e = std::exp(x.at(n, c, i, j) - mx);
          y.at(n, c, i, j) = e;
          z += e;
        }
        for (int c = 0; c < C; ++c) y.at(n, c, i, j) /= z;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_out) {
  if (!(probs.shape == grad_out.shape)) {
    throw DimensionError("softmax backward: grad shape " + grad_out.shape.str() +
                         " does not match " + probs.shape.str());
  }
  const int N = probs.shape.n, C = probs.shape.c, H = probs.shape.h,
            W = probs.shape.w;
  Tensor<T> gx(probs.shape);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        T dot = T(0);
        for (int c = 0; c < C; ++c)
          dot += grad_out.at(n, c, i, j) * probs.at(n, c, i, j);
        for (int c = 0; c < C; ++c)
          gx.at(n, c, i, j) =
              probs.at(n, c, i, j) * (grad_out.at(n, c, i, j) - dot);
      }
    }
  }
  return gx;
}

#define CDFNET_LAYERS_INSTANTIATE(T)                                           \
  template struct Conv2dParams<T>;                                             \
  template struct BatchNormParams<T>;                                          \
  template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const Conv2dParams<T>&); \
  template Tensor<T> conv2d_backward<T>(const Tensor<T>&, Conv2dParams<T>&,    \
                                        const Tensor<T>&);                     \
  template Tensor<T> batchnorm_forward<T>(const Tensor<T>&, BatchNormParams<T>&, \
                                          Mode, BatchNormCache<T>*);           \
  template Tensor<T> batchnorm_backward<T>(BatchNormParams<T>&,                \
                                           const BatchNormCache<T>&,           \
                                           const Tensor<T>&);                  \
  template Tensor<T> relu_forward<T>(const Tensor<T>&);                        \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);     \
  template std::vector<Tensor<T>> maxout_backward<T>(const ArgIndex&,          \
                                                     const Tensor<T>&, int);   \
  template std::pair<Tensor<T>, PoolIndices> maxpool2x2_forward<T>(            \
      const Tensor<T>&);                                                       \
  template Tensor<T> maxpool2x2_backward<T>(const PoolIndices&,                \
                                            const Tensor<T>&);                 \
  template Tensor<T> max_unpool2x2<T>(const Tensor<T>&, const PoolIndices&);   \
  template Tensor<T> max_unpool2x2_backward<T>(const PoolIndices&,             \
                                               const Tensor<T>&);              \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);   \
  template void add_inplace<T>(Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, int, int);            \
  template std::pair<Tensor<T>, Tensor<T>> concat_backward<T>(const Tensor<T>&, \
                                                              int, int);       \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);                    \
  template Tensor<T> softmax_backward<T>(const Tensor<T>&, const Tensor<T>&);

CDFNET_LAYERS_INSTANTIATE(float)
CDFNET_LAYERS_INSTANTIATE(double)

#undef CDFNET_LAYERS_INSTANTIATE

}  // namespace cdfnet
