#pragma once

#include <string>
#include <vector>

#include "cdfnet/tensor.hpp"

namespace cdfnet {

/// Median-frequency balancing: w_c = median(present frequencies) / freq_c.
/// Classes absent from the labels get weight 0; `degenerate` (optional)
/// reports whether fewer than two classes are present at all.
template <typename T>
std::vector<T> compute_class_weights(const LabelMap& labels, int num_classes,
                                     bool* degenerate = nullptr);

struct LossParts {
  double total = 0.0;
  double logistic = 0.0;
  double dice = 0.0;
};

/// Weighted logistic term plus soft overlap term, both differentiated
/// through the per-pixel channel softmax. When grad_logits is given it is
/// filled (not accumulated) with d total / d logits.
template <typename T>
LossParts composite_loss(const Tensor<T>& logits, const LabelMap& labels,
                         const std::vector<T>& class_weights,
                         Tensor<T>* grad_logits = nullptr);

/// Per-pixel argmax over channels; ties go to the lowest class index.
template <typename T>
LabelMap argmax_predictions(const Tensor<T>& logits);

struct MetricsReport {
  int num_classes = 0;
  std::vector<double> dice;        // -1 when scored by neither map
  std::vector<double> truth_freq;  // pixel frequency per class in truth
  double mean_dice = 0.0;        // over scored classes
  double foreground_dice = -1.0; // over scored classes except background
  double pixel_accuracy = 0.0;
  double rare_dice = -1.0;      // mean over scored classes under threshold
  double frequent_dice = -1.0;  // mean over the rest of the scored classes
  double rare_threshold = 0.0;

  std::string to_text() const;
  std::string to_kv() const;  // stable machine-readable key=value lines
};

/// Hard per-class overlap between prediction and truth. A class with no
/// pixels on either side scores -1 and is excluded from every mean.
MetricsReport evaluate_segmentation(const LabelMap& pred, const LabelMap& truth,
                                    int num_classes,
                                    double rare_threshold = 0.01);

}  // namespace cdfnet
