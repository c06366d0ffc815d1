#include "serial_kernels.hpp"

#include <cmath>

namespace cdfnet::serial {

template <typename T>
void max_reference(const std::vector<const Tensor<T>*>& inputs, Tensor<T>& out,
                   std::vector<std::uint8_t>& winner) {
  const Shape s = inputs[0]->shape;
  out = Tensor<T>(s);
  winner.assign(out.data.size(), 0);
  for (std::int64_t e = 0; e < s.numel(); ++e) {
    T best = inputs[0]->data[e];
    std::uint8_t who = 0;
    for (std::size_t l = 1; l < inputs.size(); ++l) {
      if (inputs[l]->data[e] > best) {
        best = inputs[l]->data[e];
        who = static_cast<std::uint8_t>(l);
      }
    }
    out.data[e] = best;
    winner[e] = who;
  }
}

template <typename T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& weight,
                           const std::vector<T>& bias) {
  const int N = x.shape.n, Cin = x.shape.c, H = x.shape.h, W = x.shape.w;
  const int Cout = weight.shape.n, k = weight.shape.h;
  const int pad = (k - 1) / 2;
  Tensor<T> out(Shape{N, Cout, H, W});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          T acc = bias[static_cast<std::size_t>(co)];
          for (int ci = 0; ci < Cin; ++ci)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const int ii = i + ki - pad;
                const int jj = j + kj - pad;
                if (ii >= 0 && ii < H && jj >= 0 && jj < W)
                  acc += x.at(n, ci, ii, jj) * weight.at(co, ci, ki, kj);
              }
          out.at(n, co, i, j) = acc;
        }
  return out;
}

template <typename T>
void maxpool2x2_reference(const Tensor<T>& x, Tensor<T>& out,
                          std::vector<std::uint32_t>& offsets) {
  const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
  out = Tensor<T>(Shape{N, C, H / 2, W / 2});
  offsets.assign(out.data.size(), 0);
  std::size_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j) {
          T best = x.at(n, c, 2 * i, 2 * j);
          int bi = 2 * i, bj = 2 * j;
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj) {
              const T v = x.at(n, c, 2 * i + di, 2 * j + dj);
              if (v > best) {
                best = v;
                bi = 2 * i + di;
                bj = 2 * j + dj;
              }
            }
          out.data[o] = best;
          offsets[o] = static_cast<std::uint32_t>(bi * W + bj);
          ++o;
        }
}

template <typename T>
Tensor<T> batchnorm_reference(const Tensor<T>& x, const std::vector<T>& gamma,
                              const std::vector<T>& beta, T epsilon) {
  const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
  const T m = static_cast<T>(static_cast<std::int64_t>(N) * H * W);
  Tensor<T> out(x.shape);
  for (int c = 0; c < C; ++c) {
    T sum = 0;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) sum += x.at(n, c, i, j);
    const T mean = sum / m;
    T sq = 0;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const T d = x.at(n, c, i, j) - mean;
          sq += d * d;
        }
    const T var = sq / m;
    const T inv = T(1) / std::sqrt(var + epsilon);
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          out.at(n, c, i, j) =
              gamma[static_cast<std::size_t>(c)] *
                  ((x.at(n, c, i, j) - mean) * inv) +
              beta[static_cast<std::size_t>(c)];
  }
  return out;
}

template <typename T>
Tensor<T> softmax_reference(const Tensor<T>& x) {
  const int N = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
  Tensor<T> out(x.shape);
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        T mx = x.at(n, 0, i, j);
        for (int c = 1; c < C; ++c) mx = std::max(mx, x.at(n, c, i, j));
        T denom = 0;
        for (int c = 0; c < C; ++c) denom += std::exp(x.at(n, c, i, j) - mx);
        for (int c = 0; c < C; ++c)
          out.at(n, c, i, j) = std::exp(x.at(n, c, i, j) - mx) / denom;
      }
  return out;
}

template <typename T>
T weighted_logistic_reference(const Tensor<T>& logits, const LabelMap& labels,
                              const std::vector<T>& w) {
  const Tensor<T> probs = softmax_reference(logits);
  const int N = logits.shape.n, H = logits.shape.h, W = logits.shape.w;
  T total = 0;
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const std::uint32_t y = labels.at(n, i, j);
        total += w[y] * -std::log(probs.at(n, static_cast<int>(y), i, j));
      }
  return total / static_cast<T>(static_cast<std::int64_t>(N) * H * W);
}

template <typename T>
T soft_dice_reference(const Tensor<T>& probs, const LabelMap& labels,
                      int num_classes, T eps) {
  const int N = probs.shape.n, H = probs.shape.h, W = probs.shape.w;
  T sum = 0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    T inter = 0, psum = 0, tsum = 0;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const T t = labels.at(n, i, j) == static_cast<std::uint32_t>(c)
                          ? T(1)
                          : T(0);
          inter += probs.at(n, c, i, j) * t;
          psum += probs.at(n, c, i, j);
          tsum += t;
        }
    if (tsum > 0) {
      sum += T(2) * inter / (psum + tsum + eps);
      ++present;
    }
  }
  if (present == 0) return T(0);
  return T(1) - sum / static_cast<T>(present);
}

std::vector<double> hard_dice_reference(const std::vector<std::uint32_t>& pred,
                                        const std::vector<std::uint32_t>& truth,
                                        int num_classes) {
  std::vector<double> dice(static_cast<std::size_t>(num_classes), -1.0);
  for (int c = 0; c < num_classes; ++c) {
    std::int64_t p = 0, t = 0, both = 0;
    for (std::size_t e = 0; e < pred.size(); ++e) {
      const bool inp = pred[e] == static_cast<std::uint32_t>(c);
      const bool int_ = truth[e] == static_cast<std::uint32_t>(c);
      p += inp;
      t += int_;
      both += inp && int_;
    }
    if (p + t > 0)
      dice[static_cast<std::size_t>(c)] =
          2.0 * static_cast<double>(both) / static_cast<double>(p + t);
  }
  return dice;
}

double momentum_trajectory_reference(double theta0, double mu, double lr,
                                     double wd,
                                     const std::vector<double>& grads) {
  double theta = theta0, v = 0.0;
  for (double g : grads) {
    v = mu * v - lr * (g + wd * theta);
    theta += v;
  }
  return theta;
}

#define CDFNET_SERIAL_INSTANTIATE(T)                                       \
  template void max_reference(const std::vector<const Tensor<T>*>&,        \
                              Tensor<T>&, std::vector<std::uint8_t>&);     \
  template Tensor<T> conv2d_reference(const Tensor<T>&, const Tensor<T>&,  \
                                      const std::vector<T>&);              \
  template void maxpool2x2_reference(const Tensor<T>&, Tensor<T>&,         \
                                     std::vector<std::uint32_t>&);         \
  template Tensor<T> batchnorm_reference(const Tensor<T>&,                 \
                                         const std::vector<T>&,            \
                                         const std::vector<T>&, T);        \
  template Tensor<T> softmax_reference(const Tensor<T>&);                  \
  template T weighted_logistic_reference(const Tensor<T>&, const LabelMap&,\
                                         const std::vector<T>&);           \
  template T soft_dice_reference(const Tensor<T>&, const LabelMap&, int, T);

CDFNET_SERIAL_INSTANTIATE(float)
CDFNET_SERIAL_INSTANTIATE(double)

#undef CDFNET_SERIAL_INSTANTIATE

}  // namespace cdfnet::serial
