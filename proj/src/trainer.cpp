#include "cdfnet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cdfnet/errors.hpp"

namespace cdfnet::train {

double lr_at(const TrainConfig& cfg, int epoch) {
  if (cfg.lr_step < 1) throw ConfigError("lr step must be positive");
  if (epoch < 0) throw ConfigError("epoch index must be non-negative");
  return cfg.lr0 * std::pow(0.1, epoch / cfg.lr_step);
}

OptState OptState::make(const ParamStore<float>& store) {
  OptState opt;
  for (const auto& r : store.refs()) {
    if (r.grad == nullptr) continue;  // running stats carry no velocity
    opt.velocity.push_back(Tensor<float>::zeros(r.value->shape));
  }
  return opt;
}

void sgd_step(const ParamStore<float>& store, OptState& opt, double lr,
              const TrainConfig& cfg) {
  const float mu = static_cast<float>(cfg.momentum);
  const float step = static_cast<float>(lr);
  const float wd = static_cast<float>(cfg.weight_decay);
  std::size_t slot = 0;
  for (const auto& r : store.refs()) {
    if (r.grad == nullptr) continue;
    if (slot >= opt.velocity.size())
      throw UsageError("optimizer state has fewer tensors than the model");
    Tensor<float>& v = opt.velocity[slot++];
    if (v.shape.numel() != r.value->numel())
      throw UsageError("optimizer state does not match tensor \"" + r.name +
                       "\"");
    float* theta = r.value->data.data();
    float* g = r.grad->data.data();
    float* vel = v.data.data();
    const std::int64_t n = r.value->numel();
    const float lambda = r.decay ? wd : 0.0f;
    for (std::int64_t i = 0; i < n; ++i) {
      vel[i] = mu * vel[i] - step * (g[i] + lambda * theta[i]);
      theta[i] += vel[i];
      g[i] = 0.0f;
    }
  }
  if (slot != opt.velocity.size())
    throw UsageError("optimizer state has more tensors than the model");
}

AffineParams draw_affine(Rng& rng, int height, int width) {
  constexpr double kPi = 3.14159265358979323846;
  AffineParams a;
  a.angle = rng.uniform(-10.0, 10.0) * kPi / 180.0;
  a.scale = rng.uniform(0.9, 1.1);
  a.tx = rng.uniform(-0.1, 0.1) * width;
  a.ty = rng.uniform(-0.1, 0.1) * height;
  return a;
}

namespace {

// Inverse map of rotate-scale-translate about the image center. Output
// pixel (i, j) samples the input at (ys, xs).
inline void source_coords(const AffineParams& a, int h, int w, int i, int j,
                          double& ys, double& xs) {
  const double cy = (h - 1) / 2.0;
  const double cx = (w - 1) / 2.0;
  const double yc = i - cy - a.ty;
  const double xc = j - cx - a.tx;
  const double c = std::cos(a.angle), s = std::sin(a.angle);
  xs = (xc * c + yc * s) / a.scale + cx;
  ys = (-xc * s + yc * c) / a.scale + cy;
}

inline int clampi(int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); }

}  // namespace

Tensor<float> warp_image(const Tensor<float>& img, const AffineParams& a) {
  const int h = img.shape.h, w = img.shape.w;
  if (img.shape.n != 1 || img.shape.c != 1)
    throw DimensionError("warp expects a single-channel image, got " +
                         img.shape.str());
  Tensor<float> out(img.shape);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double ys, xs;
      source_coords(a, h, w, i, j, ys, xs);
      const double yf = std::floor(ys), xf = std::floor(xs);
      const double fy = ys - yf, fx = xs - xf;
      const int y0 = clampi(static_cast<int>(yf), h - 1);
      const int x0 = clampi(static_cast<int>(xf), w - 1);
      if (fy == 0.0 && fx == 0.0) {  // exact grid hit: copy the bits
        out.at(0, 0, i, j) = img.at(0, 0, y0, x0);
        continue;
      }
      const int y1 = clampi(static_cast<int>(yf) + 1, h - 1);
      const int x1 = clampi(static_cast<int>(xf) + 1, w - 1);
      const double v = (1 - fy) * (1 - fx) * img.at(0, 0, y0, x0) +
                       (1 - fy) * fx * img.at(0, 0, y0, x1) +
                       fy * (1 - fx) * img.at(0, 0, y1, x0) +
                       fy * fx * img.at(0, 0, y1, x1);
      out.at(0, 0, i, j) = static_cast<float>(v);
    }
  }
  return out;
}

LabelMap warp_labels(const LabelMap& lab, const AffineParams& a) {
  if (lab.n != 1)
    throw DimensionError("warp expects a single label map");
  const int h = lab.h, w = lab.w;
  LabelMap out(1, h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double ys, xs;
      source_coords(a, h, w, i, j, ys, xs);
      const int yi = clampi(static_cast<int>(std::llround(ys)), h - 1);
      const int xi = clampi(static_cast<int>(std::llround(xs)), w - 1);
      out.at(0, i, j) = lab.at(0, yi, xi);
    }
  }
  return out;
}

namespace {

void copy_into_batch(Tensor<float>& bx, LabelMap& by, int slot,
                     const Tensor<float>& img, const LabelMap& lab) {
  const std::int64_t px = static_cast<std::int64_t>(bx.shape.h) * bx.shape.w;
  std::copy(img.data.begin(), img.data.end(), bx.data.begin() + slot * px);
  std::copy(lab.data.begin(), lab.data.end(), by.data.begin() + slot * px);
}

}  // namespace

MetricsReport evaluate_split(Model<float>& model, const synth::SplitView& view,
                             int num_classes) {
  if (view.size() == 0) throw ConfigError("cannot evaluate an empty split");
  const int h = view.labels[0]->h, w = view.labels[0]->w;
  LabelMap pred_all(view.size(), h, w);
  LabelMap truth_all(view.size(), h, w);
  const std::int64_t px = static_cast<std::int64_t>(h) * w;
  for (int i = 0; i < view.size(); ++i) {
    Tensor<float> logits = model.forward(*view.images[i], Mode::kEval);
    LabelMap p = argmax_predictions(logits);
    std::copy(p.data.begin(), p.data.end(), pred_all.data.begin() + i * px);
    std::copy(view.labels[i]->data.begin(), view.labels[i]->data.end(),
              truth_all.data.begin() + i * px);
  }
  return evaluate_segmentation(pred_all, truth_all, num_classes);
}

TrainResult train(Model<float>& model, const synth::Dataset& data,
                  const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw ConfigError("epoch count must be non-negative");
  if (cfg.batch_size < 1) throw ConfigError("batch size must be positive");
  if (cfg.lr_step < 1) throw ConfigError("lr step must be positive");
  if (data.train_idx.empty()) throw ConfigError("training split is empty");
  if (model.num_classes != data.num_classes)
    throw ConfigError("model expects " + std::to_string(model.num_classes) +
                      " classes but the dataset has " +
                      std::to_string(data.num_classes));
  if (model.in_channels != 1)
    throw ConfigError("dataset images are single-channel but the model "
                      "expects " +
                      std::to_string(model.in_channels));

  const int h = data.images[data.train_idx[0]].shape.h;
  const int w = data.images[data.train_idx[0]].shape.w;
  const int n_train = static_cast<int>(data.train_idx.size());

  ParamStore<float> store;
  model.collect(store);
  OptState opt = OptState::make(store);
  model.zero_grads();

  TrainResult result;
  {
    LabelMap all(n_train, h, w);
    const std::int64_t px = static_cast<std::int64_t>(h) * w;
    for (int i = 0; i < n_train; ++i)
      std::copy(data.labels[data.train_idx[i]].data.begin(),
                data.labels[data.train_idx[i]].data.end(),
                all.data.begin() + i * px);
    result.class_weights =
        compute_class_weights<float>(all, data.num_classes);
  }

  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    log.open(cfg.out_dir + "/train.log", std::ios::app);
    if (!log) throw IoError("cannot open " + cfg.out_dir + "/train.log");
  }

  std::vector<int> order;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(cfg, e);
    order = data.train_idx;
    Rng shuffler(Rng::derive(cfg.seed, 0x5F0000ULL + e));
    shuffler.shuffle(order);
    Rng aug(Rng::derive(cfg.seed, 0xAF0000ULL + e));

    double loss_sum = 0.0;
    int batch_no = 0;
    for (int start = 0; start < n_train; start += cfg.batch_size, ++batch_no) {
      const int bs = std::min(cfg.batch_size, n_train - start);
      Tensor<float> bx(Shape(bs, 1, h, w));
      LabelMap by(bs, h, w);
      for (int k = 0; k < bs; ++k) {
        const int idx = order[start + k];
        if (cfg.augment) {
          AffineParams ap = draw_affine(aug, h, w);
          copy_into_batch(bx, by, k, warp_image(data.images[idx], ap),
                          warp_labels(data.labels[idx], ap));
        } else {
          copy_into_batch(bx, by, k, data.images[idx], data.labels[idx]);
        }
      }
      ModelCache<float> cache;
      Tensor<float> logits = model.forward(bx, Mode::kTrain, &cache);
      Tensor<float> grad(logits.shape);
      LossParts parts =
          composite_loss(logits, by, result.class_weights, &grad);
      if (!std::isfinite(parts.total))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(e) +
                              ", batch " + std::to_string(batch_no));
      model.backward(cache, grad);
      sgd_step(store, opt, lr, cfg);
      loss_sum += parts.total * bs;
    }

    EpochStats st;
    st.epoch = e;
    st.lr = lr;
    st.mean_loss = loss_sum / n_train;
    st.seconds = std::chrono::duration<double>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
    result.curve.push_back(st);

    if (log.is_open()) {
      char line[160];
      std::snprintf(line, sizeof(line), "epoch %d lr %.17g loss %.17g",
                    e, lr, st.mean_loss);
      log << line;
      std::snprintf(line, sizeof(line), " seconds %.3f\n", st.seconds);
      log << line << std::flush;
    }
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
        (e + 1) % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "/checkpoint_epoch%04d.cdfc", e + 1);
      model.save(cfg.out_dir + name);
    }
  }

  if (!cfg.out_dir.empty()) model.save(cfg.out_dir + "/model.cdfc");

  const std::vector<int>& held =
      !data.val_idx.empty() ? data.val_idx : data.test_idx;
  if (!held.empty()) {
    synth::SplitView view = synth::split_view(
        data, !data.val_idx.empty() ? "val" : "test");
    result.held_out = evaluate_split(model, view, data.num_classes);
    result.evaluated = true;
  }
  return result;
}

}  // namespace cdfnet::train
