#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cdfnet/blocks.hpp"
#include "cdfnet/layers.hpp"
#include "cdfnet/tensor.hpp"

namespace cdfnet {

/// The four architecture variants under comparison. Two independent
/// switches: how dense blocks fuse features (max vs concat) and how the
/// decoder joins skip connections (max join vs concat).
struct VariantSpec {
  std::string name;  // canonical: bl0 | bl1 | bl2 | cdfnet
  BlockKind blocks = BlockKind::kVanilla;
  bool competitive_unpool = false;

  static VariantSpec parse(const std::string& name);
  static std::vector<VariantSpec> all();
  int id() const;  // stable small integer for checkpoints
  static VariantSpec from_id(int id);
};

/// Named view over every tensor a model owns: learnable parameters carry
/// a gradient pointer, running-stat buffers do not.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
  bool decay = false;
};

template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Param<T>& p) {
    refs_.push_back({name, &p.value, &p.grad, p.decay});
  }
  void add_buffer(const std::string& name, Tensor<T>& t) {
    refs_.push_back({name, &t, nullptr, false});
  }
  const std::vector<ParamRef<T>>& refs() const { return refs_; }
  std::size_t size() const { return refs_.size(); }

 private:
  std::vector<ParamRef<T>> refs_;
};

template <typename T>
struct ModelCache {
  Tensor<T> x;
  std::array<DenseBlockCache<T>, 4> enc_cache;
  DenseBlockCache<T> bottleneck_cache;
  std::array<PoolIndices, 4> idx;
  std::array<CubCache<T>, 4> cub_cache;
  std::array<DenseBlockCache<T>, 4> dec_cache;
  Tensor<T> cls_in;
};

/// Encoder-decoder segmentation network at constant feature width:
/// stem conv, four dense blocks with 2x2 pooling on the way down, a
/// bottleneck block, four unpool-join + dense block stages on the way
/// up, and a 1x1 classifier producing per-class logits.
template <typename T>
class Model {
 public:
  VariantSpec variant;
  int in_channels = 1;
  int num_classes = 2;
  int width = 8;

  Conv2dParams<T> stem;
  std::array<DenseBlockParams<T>, 4> enc;
  DenseBlockParams<T> bottleneck;
  std::array<CubParams<T>, 4> cub;  // competitive join only
  std::array<DenseBlockParams<T>, 4> dec;
  Conv2dParams<T> classifier;

  static Model build(const VariantSpec& v, int in_ch, int classes, int width,
                     std::uint64_t seed);

  /// Registers every tensor in a fixed canonical order (encoder top-down,
  /// then decoder deep-to-shallow); checkpoints and the optimizer both
  /// follow this order.
  void collect(ParamStore<T>& store);

  std::int64_t param_count();  // learnable tensors only

  /// Input spatial extents must be divisible by 16 (four pooling stages).
  Tensor<T> forward(const Tensor<T>& x, Mode mode,
                    ModelCache<T>* cache = nullptr);

  /// Accumulates parameter gradients and returns the input gradient.
  Tensor<T> backward(const ModelCache<T>& cache, const Tensor<T>& grad_logits);

  void zero_grads();

  void save(const std::string& path);
  static Model load(const std::string& path);

  int decoder_in_width() const {
    return variant.competitive_unpool ? width : 2 * width;
  }
};

/// Digest of every discrete routing decision recorded in a cache, in the
/// same canonical order as the forward pass.
template <typename T>
std::uint64_t routing_digest(const Model<T>& m, const ModelCache<T>& cache);

}  // namespace cdfnet
