#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdfnet/tensor.hpp"

namespace cdfnet::synth {

enum class Primitive { kEllipse, kRectangle };

/// One foreground class: a primitive with an area range (as a fraction of
/// the image), an aspect range, and an intensity mean.
struct ClassShape {
  Primitive primitive = Primitive::kEllipse;
  double min_area = 0.0;  // fraction of image pixels
  double max_area = 0.0;
  double min_aspect = 0.7;
  double max_aspect = 1.4;
  double mean = 0.0;  // intensity inside the shape
};

/// Recipe for one family of scenes. Class c >= 1 is shapes[c - 1];
/// class 0 is the background. Scenes draw bigger classes first so the
/// rarest class is never painted over.
struct SceneSpec {
  std::string name = "custom";
  int height = 64;
  int width = 64;
  double background_mean = 0.1;
  double noise_sigma = 0.05;
  // Occlusion analog: the rarest class is centered on the largest shape,
  // where its low contrast makes it hard to separate.
  bool rare_on_largest = false;
  std::vector<ClassShape> shapes;

  int num_classes() const { return static_cast<int>(shapes.size()) + 1; }
  /// Expected pixel ratio of the rarest class to the largest one.
  double rare_ratio() const;
  /// Stable textual form, the basis of the manifest digest.
  std::string digest_text() const;

  static SceneSpec easy();
  static SceneSpec imbalanced();
  static SceneSpec occluded();
  /// Preset by name; unknown names throw ConfigError.
  static SceneSpec preset(const std::string& name);
};

/// A generated corpus: aligned images and label maps plus disjoint split
/// index lists. Samples are addressed by their global index, so the same
/// (spec, seed, index) triple always yields the same sample no matter how
/// many are generated.
struct Dataset {
  std::vector<Tensor<float>> images;  // each (1, 1, H, W)
  std::vector<LabelMap> labels;       // each (1, H, W)
  std::vector<int> train_idx, val_idx, test_idx;
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::string spec_digest;

  int size() const { return static_cast<int>(images.size()); }
};

/// Pointer view of one split, in index order.
struct SplitView {
  std::vector<const Tensor<float>*> images;
  std::vector<const LabelMap*> labels;
  int size() const { return static_cast<int>(images.size()); }
};

SplitView split_view(const Dataset& ds, const std::string& split);

/// Renders one sample; exposed so callers can stream without holding a
/// whole Dataset.
void render_sample(const SceneSpec& spec, std::uint64_t seed, int index,
                   Tensor<float>& image, LabelMap& labels);

Dataset generate(const SceneSpec& spec, int n_train, std::uint64_t seed,
                 int n_val = 0, int n_test = 0);

/// One CDFT file per image and per label map, plus manifest.txt binding
/// filenames, splits, and content digests. import verifies every digest
/// and rejects tampered or incomplete directories with IntegrityError.
void export_dataset(const Dataset& ds, const std::string& dir);
Dataset import_dataset(const std::string& dir);

}  // namespace cdfnet::synth
