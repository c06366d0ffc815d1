#pragma once

// Naive single-threaded reference kernels. Every function here is a plain
// scalar loop over the mathematical definition, kept deliberately separate
// from the production kernels so tests and the benchmark can compare the
// two paths.

#include <cstdint>
#include <vector>

#include "cdfnet/tensor.hpp"

namespace cdfnet::serial {

/// Elementwise max over L inputs, one scalar pass per element.
template <typename T>
void max_reference(const std::vector<const Tensor<T>*>& inputs, Tensor<T>& out,
                   std::vector<std::uint8_t>& winner);

/// Direct six-loop cross-correlation, stride 1, zero padding (k-1)/2.
template <typename T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& weight,
                           const std::vector<T>& bias);

/// Windowed 2x2 max with plane-local winner offsets, ties to the first
/// element in row-major window order.
template <typename T>
void maxpool2x2_reference(const Tensor<T>& x, Tensor<T>& out,
                          std::vector<std::uint32_t>& offsets);

/// Two-pass batch normalization over (N,H,W) per channel, train mode.
template <typename T>
Tensor<T> batchnorm_reference(const Tensor<T>& x, const std::vector<T>& gamma,
                              const std::vector<T>& beta, T epsilon);

/// Per-pixel channel softmax with max subtraction.
template <typename T>
Tensor<T> softmax_reference(const Tensor<T>& x);

/// Mean over pixels of w[y] * -log softmax(logits)[y].
template <typename T>
T weighted_logistic_reference(const Tensor<T>& logits, const LabelMap& labels,
                              const std::vector<T>& w);

/// Soft Dice loss over classes present in the labels, smoothing eps.
template <typename T>
T soft_dice_reference(const Tensor<T>& probs, const LabelMap& labels,
                      int num_classes, T eps);

/// Hard Dice per class; absent classes (no pixels on either side) get -1.
std::vector<double> hard_dice_reference(const std::vector<std::uint32_t>& pred,
                                        const std::vector<std::uint32_t>& truth,
                                        int num_classes);

/// Scalar momentum-SGD trajectory: v <- mu*v - lr*(g + wd*theta),
/// theta <- theta + v, applied per step of the gradient sequence.
double momentum_trajectory_reference(double theta0, double mu, double lr,
                                     double wd,
                                     const std::vector<double>& grads);

}  // namespace cdfnet::serial
