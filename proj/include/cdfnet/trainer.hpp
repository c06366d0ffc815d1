#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdfnet/loss.hpp"
#include "cdfnet/network.hpp"
#include "cdfnet/synthdata.hpp"
#include "cdfnet/tensor.hpp"

namespace cdfnet::train {

struct TrainConfig {
  int epochs = 40;
  int batch_size = 4;
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-6;  // conv weights only
  int lr_step = 20;            // epochs between tenfold decays
  bool augment = false;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  std::string out_dir;       // empty: write no files
};

/// lr0 * 0.1^floor(epoch / lr_step): piecewise constant, tenfold drops.
double lr_at(const TrainConfig& cfg, int epoch);

/// One velocity buffer per learnable tensor, in the store's order.
struct OptState {
  std::vector<Tensor<float>> velocity;
  static OptState make(const ParamStore<float>& store);
};

/// Classical momentum: v <- mu*v - lr*(g + lambda*theta); theta += v.
/// The decay term applies only to tensors flagged for it. Gradients are
/// zeroed afterward, ready for the next accumulation.
void sgd_step(const ParamStore<float>& store, OptState& opt, double lr,
              const TrainConfig& cfg);

/// Random affine draw: rotation within +/-10 degrees, scale 0.9-1.1,
/// translation within +/-10% of each extent. Identity is all-neutral.
struct AffineParams {
  double angle = 0.0;  // radians
  double scale = 1.0;
  double tx = 0.0;  // pixels, along width
  double ty = 0.0;  // pixels, along height
};

AffineParams draw_affine(Rng& rng, int height, int width);

/// Resamples around the image center with border clamping: the image
/// bilinearly, the labels nearest-neighbor, both under the same map.
/// Neutral parameters reproduce the input bit-for-bit.
Tensor<float> warp_image(const Tensor<float>& img, const AffineParams& a);
LabelMap warp_labels(const LabelMap& lab, const AffineParams& a);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> curve;
  std::vector<float> class_weights;  // median-frequency, from the train split
  MetricsReport held_out;            // eval-mode metrics, see `evaluated`
  bool evaluated = false;
};

/// The full loop: per epoch a seeded shuffle, mini-batches, optional
/// augmentation, forward, composite loss, backward, momentum step; one
/// appended log line per epoch. Trains on the train split and reports
/// eval-mode metrics on val (or test when no val exists). A non-finite
/// loss aborts with DivergenceError naming the epoch and batch.
TrainResult train(Model<float>& model, const synth::Dataset& data,
                  const TrainConfig& cfg);

/// Aggregate eval-mode metrics of a model over a split view: predictions
/// of every sample pooled against their labels.
MetricsReport evaluate_split(Model<float>& model, const synth::SplitView& view,
                             int num_classes);

}  // namespace cdfnet::train
