#include "cdfnet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "cdfnet/errors.hpp"
#include "cdfnet/layers.hpp"

namespace cdfnet {

namespace {

void check_label_dims(const Shape& logits, const LabelMap& labels) {
  if (labels.n != logits.n || labels.h != logits.h || labels.w != logits.w) {
    throw DimensionError("labels (" + std::to_string(labels.n) + "," +
                         std::to_string(labels.h) + "," +
                         std::to_string(labels.w) +
                         ") do not match logits " + logits.str());
  }
}

void check_label_values(const LabelMap& labels, int num_classes) {
  for (const std::uint32_t y : labels.data) {
    if (y >= static_cast<std::uint32_t>(num_classes)) {
      throw LabelError("label value " + std::to_string(y) +
                       " outside the " + std::to_string(num_classes) +
                       "-class range");
    }
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

template <typename T>
std::vector<T> compute_class_weights(const LabelMap& labels, int num_classes,
                                     bool* degenerate) {
  if (num_classes < 1)
    throw DimensionError("class weights need num_classes >= 1");
  check_label_values(labels, num_classes);

  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const std::uint32_t y : labels.data) ++counts[y];
  const double total = static_cast<double>(labels.numel());

  std::vector<double> present;
  for (const std::int64_t c : counts)
    if (c > 0) present.push_back(static_cast<double>(c) / total);
  if (degenerate) *degenerate = present.size() < 2;
  if (present.empty())
    throw LabelError("label map holds no pixels at all");

  // median: middle element, or the mean of the two middles
  std::sort(present.begin(), present.end());
  const std::size_t half = present.size() / 2;
  const double median = present.size() % 2 == 1
                            ? present[half]
                            : 0.5 * (present[half - 1] + present[half]);

  std::vector<T> w(static_cast<std::size_t>(num_classes), T(0));
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) {
      const double freq =
          static_cast<double>(counts[static_cast<std::size_t>(c)]) / total;
      w[static_cast<std::size_t>(c)] = static_cast<T>(median / freq);
    }
  }
  return w;
}

template <typename T>
LossParts composite_loss(const Tensor<T>& logits, const LabelMap& labels,
                         const std::vector<T>& class_weights,
                         Tensor<T>* grad_logits) {
  check_label_dims(logits.shape, labels);
  const int K = logits.shape.c;
  check_label_values(labels, K);
  if (static_cast<int>(class_weights.size()) != K) {
    throw DimensionError("got " + std::to_string(class_weights.size()) +
                         " class weights for " + std::to_string(K) +
                         " classes");
  }
  const int N = logits.shape.n, H = logits.shape.h, W = logits.shape.w;
  const T pixels = static_cast<T>(static_cast<std::int64_t>(N) * H * W);
  const Tensor<T> probs = softmax_channels(logits);

  // weighted logistic term, mean over pixels of w[y] * -log p_y. Computed
  // from the logits as max + log-sum-exp so huge logits cannot underflow
  // the probability to zero and turn the log infinite.
  T logistic = T(0);
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const std::uint32_t y = labels.at(n, i, j);
        T m = logits.at(n, 0, i, j);
        for (int c = 1; c < K; ++c) m = std::max(m, logits.at(n, c, i, j));
        T sum = T(0);
        for (int c = 0; c < K; ++c)
          sum += std::exp(logits.at(n, c, i, j) - m);
        logistic += class_weights[y] *
                    (m + std::log(sum) - logits.at(n, static_cast<int>(y), i, j));
      }
  logistic /= pixels;

  // soft overlap term over classes present in the labels
  const T eps = T(1e-6);
  std::vector<T> inter(static_cast<std::size_t>(K), T(0));
  std::vector<T> psum(static_cast<std::size_t>(K), T(0));
  std::vector<T> tsum(static_cast<std::size_t>(K), T(0));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < K; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const T p = probs.at(n, c, i, j);
          const T t =
              labels.at(n, i, j) == static_cast<std::uint32_t>(c) ? T(1) : T(0);
          inter[static_cast<std::size_t>(c)] += p * t;
          psum[static_cast<std::size_t>(c)] += p;
          tsum[static_cast<std::size_t>(c)] += t;
        }
  int present = 0;
  T overlap = T(0);
  for (int c = 0; c < K; ++c) {
    if (tsum[static_cast<std::size_t>(c)] > T(0)) {
      overlap += T(2) * inter[static_cast<std::size_t>(c)] /
                 (psum[static_cast<std::size_t>(c)] +
                  tsum[static_cast<std::size_t>(c)] + eps);
      ++present;
    }
  }
  const T dice = present > 0 ? T(1) - overlap / static_cast<T>(present) : T(0);

  LossParts parts;
  parts.logistic = static_cast<double>(logistic);
  parts.dice = static_cast<double>(dice);
  parts.total = parts.logistic + parts.dice;

  if (grad_logits) {
    // logistic gradient straight to logits: w[y]/M * (p - onehot)
    Tensor<T> g(logits.shape);
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const std::uint32_t y = labels.at(n, i, j);
          const T wy = class_weights[y] / pixels;
          for (int c = 0; c < K; ++c) {
            const T onehot =
                c == static_cast<int>(y) ? T(1) : T(0);
            g.at(n, c, i, j) = wy * (probs.at(n, c, i, j) - onehot);
          }
        }

    // overlap gradient wrt probabilities, chained through the softmax
    Tensor<T> gp = Tensor<T>::zeros(logits.shape);
    if (present > 0) {
      for (int c = 0; c < K; ++c) {
        if (tsum[static_cast<std::size_t>(c)] <= T(0)) continue;
        const T denom = psum[static_cast<std::size_t>(c)] +
                        tsum[static_cast<std::size_t>(c)] + eps;
        const T i_c = inter[static_cast<std::size_t>(c)];
        for (int n = 0; n < N; ++n)
          for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
              const T t = labels.at(n, i, j) == static_cast<std::uint32_t>(c)
                              ? T(1)
                              : T(0);
              // d(1 - mean_c 2 I_c / D_c) / dp = -2 (t D_c - I_c) / D_c^2 / K'
              gp.at(n, c, i, j) = -(T(2) * (t * denom - i_c) / (denom * denom)) /
                                  static_cast<T>(present);
            }
      }
    }
    add_inplace(g, softmax_backward(probs, gp));
    *grad_logits = std::move(g);
  }
  return parts;
}

template <typename T>
LabelMap argmax_predictions(const Tensor<T>& logits) {
  const int N = logits.shape.n, K = logits.shape.c, H = logits.shape.h,
            W = logits.shape.w;
  LabelMap out(N, H, W);
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        int best = 0;
        T bv = logits.at(n, 0, i, j);
        for (int c = 1; c < K; ++c) {
          const T v = logits.at(n, c, i, j);
          if (v > bv) {  // strict: ties keep the lowest class
            bv = v;
            best = c;
          }
        }
        out.at(n, i, j) = static_cast<std::uint32_t>(best);
      }
  return out;
}

MetricsReport evaluate_segmentation(const LabelMap& pred, const LabelMap& truth,
                                    int num_classes, double rare_threshold) {
  if (pred.n != truth.n || pred.h != truth.h || pred.w != truth.w) {
    throw DimensionError("prediction (" + std::to_string(pred.n) + "," +
                         std::to_string(pred.h) + "," + std::to_string(pred.w) +
                         ") and truth (" + std::to_string(truth.n) + "," +
                         std::to_string(truth.h) + "," + std::to_string(truth.w) +
                         ") extents differ");
  }
  check_label_values(pred, num_classes);
  check_label_values(truth, num_classes);

  MetricsReport r;
  r.num_classes = num_classes;
  r.rare_threshold = rare_threshold;
  r.dice.assign(static_cast<std::size_t>(num_classes), -1.0);
  r.truth_freq.assign(static_cast<std::size_t>(num_classes), 0.0);

  const double total = static_cast<double>(truth.numel());
  std::vector<std::int64_t> p_count(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> t_count(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> hit(static_cast<std::size_t>(num_classes), 0);
  std::int64_t correct = 0;
  for (std::size_t e = 0; e < truth.data.size(); ++e) {
    const std::uint32_t p = pred.data[e], t = truth.data[e];
    ++p_count[p];
    ++t_count[t];
    if (p == t) {
      ++hit[p];
      ++correct;
    }
  }
  r.pixel_accuracy = static_cast<double>(correct) / total;

  double mean = 0.0, fg = 0.0, rare = 0.0, freq = 0.0;
  int scored = 0, n_fg = 0, n_rare = 0, n_freq = 0;
  for (int c = 0; c < num_classes; ++c) {
    const std::size_t ci = static_cast<std::size_t>(c);
    r.truth_freq[ci] = static_cast<double>(t_count[ci]) / total;
    if (p_count[ci] + t_count[ci] == 0) continue;  // scored by neither map
    const double d = 2.0 * static_cast<double>(hit[ci]) /
                     static_cast<double>(p_count[ci] + t_count[ci]);
    r.dice[ci] = d;
    mean += d;
    ++scored;
    if (c > 0) {
      fg += d;
      ++n_fg;
    }
    if (r.truth_freq[ci] < rare_threshold) {
      rare += d;
      ++n_rare;
    } else {
      freq += d;
      ++n_freq;
    }
  }
  r.mean_dice = scored > 0 ? mean / scored : 0.0;
  r.foreground_dice = n_fg > 0 ? fg / n_fg : -1.0;
  r.rare_dice = n_rare > 0 ? rare / n_rare : -1.0;
  r.frequent_dice = n_freq > 0 ? freq / n_freq : -1.0;
  return r;
}

std::string MetricsReport::to_text() const {
  std::string s;
  s += "class  truth-freq  dice\n";
  for (int c = 0; c < num_classes; ++c) {
    const std::size_t ci = static_cast<std::size_t>(c);
    s += "  " + std::to_string(c) + "     " + fmt_fixed(truth_freq[ci]) + "   ";
    s += dice[ci] < 0 ? "   --" : fmt_fixed(dice[ci]);
    s += "\n";
  }
  s += "mean dice        " + fmt_fixed(mean_dice) + "\n";
  if (foreground_dice >= 0)
    s += "foreground dice  " + fmt_fixed(foreground_dice) + "\n";
  s += "pixel accuracy   " + fmt_fixed(pixel_accuracy) + "\n";
  if (rare_dice >= 0)
    s += "rare-class dice  " + fmt_fixed(rare_dice) + " (freq < " +
         fmt_fixed(rare_threshold) + ")\n";
  if (frequent_dice >= 0)
    s += "frequent dice    " + fmt_fixed(frequent_dice) + "\n";
  return s;
}

std::string MetricsReport::to_kv() const {
  std::string s;
  s += "num_classes = " + std::to_string(num_classes) + "\n";
  for (int c = 0; c < num_classes; ++c) {
    const std::size_t ci = static_cast<std::size_t>(c);
    s += "dice." + std::to_string(c) + " = " + fmt_double(dice[ci]) + "\n";
    s += "truth_freq." + std::to_string(c) + " = " + fmt_double(truth_freq[ci]) +
         "\n";
  }
  s += "mean_dice = " + fmt_double(mean_dice) + "\n";
  s += "foreground_dice = " + fmt_double(foreground_dice) + "\n";
  s += "pixel_accuracy = " + fmt_double(pixel_accuracy) + "\n";
  s += "rare_dice = " + fmt_double(rare_dice) + "\n";
  s += "frequent_dice = " + fmt_double(frequent_dice) + "\n";
  s += "rare_threshold = " + fmt_double(rare_threshold) + "\n";
  return s;
}

#define CDFNET_LOSS_INSTANTIATE(T)                                          \
  template std::vector<T> compute_class_weights<T>(const LabelMap&, int,    \
                                                   bool*);                  \
  template LossParts composite_loss<T>(const Tensor<T>&, const LabelMap&,   \
                                       const std::vector<T>&, Tensor<T>*);  \
  template LabelMap argmax_predictions<T>(const Tensor<T>&);

CDFNET_LOSS_INSTANTIATE(float)
CDFNET_LOSS_INSTANTIATE(double)

#undef CDFNET_LOSS_INSTANTIATE

}  // namespace cdfnet
