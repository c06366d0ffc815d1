#include "cdfnet/network.hpp"

#include <cmath>
#include <map>

#include "cdfnet/errors.hpp"
#include "cdfnet/io.hpp"

namespace cdfnet {

VariantSpec VariantSpec::parse(const std::string& name) {
  for (const auto& v : all())
    if (v.name == name) return v;
  throw ConfigError("unknown variant \"" + name +
                    "\" (expected bl0, bl1, bl2 or cdfnet)");
}

std::vector<VariantSpec> VariantSpec::all() {
  return {
      {"bl0", BlockKind::kVanilla, false},
      {"bl1", BlockKind::kCompetitive, false},
      {"bl2", BlockKind::kVanilla, true},
      {"cdfnet", BlockKind::kCompetitive, true},
  };
}

int VariantSpec::id() const {
  const auto v = all();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i].name == name) return static_cast<int>(i);
  throw ConfigError("variant \"" + name + "\" has no id");
}

VariantSpec VariantSpec::from_id(int id) {
  const auto v = all();
  if (id < 0 || id >= static_cast<int>(v.size()))
    throw CheckpointError("variant id " + std::to_string(id) +
                          " out of range");
  return v[static_cast<std::size_t>(id)];
}

namespace {

template <typename T>
void register_conv(ParamStore<T>& s, const std::string& prefix,
                   Conv2dParams<T>& c) {
  s.add(prefix + ".weight", c.weight);
  s.add(prefix + ".bias", c.bias);
}

template <typename T>
void register_composite(ParamStore<T>& s, const std::string& prefix,
                        CompositeParams<T>& c) {
  register_conv(s, prefix + ".conv", c.conv);
  s.add(prefix + ".bn.gamma", c.bn.gamma);
  s.add(prefix + ".bn.beta", c.bn.beta);
  s.add_buffer(prefix + ".bn.running_mean", c.bn.running_mean);
  s.add_buffer(prefix + ".bn.running_var", c.bn.running_var);
}

template <typename T>
void register_block(ParamStore<T>& s, const std::string& prefix,
                    DenseBlockParams<T>& b) {
  register_composite(s, prefix + ".h1", b.h1);
  register_composite(s, prefix + ".h2", b.h2);
  register_composite(s, prefix + ".h3", b.h3);
}

}  // namespace

template <typename T>
Model<T> Model<T>::build(const VariantSpec& v, int in_ch, int classes,
                         int width, std::uint64_t seed) {
  if (in_ch < 1 || classes < 2 || width < 1) {
    throw ConfigError("model needs in_channels >= 1, classes >= 2, width >= 1; got " +
                      std::to_string(in_ch) + ", " + std::to_string(classes) +
                      ", " + std::to_string(width));
  }
  Model m;
  m.variant = v;
  m.in_channels = in_ch;
  m.num_classes = classes;
  m.width = width;

  const int W = width;
  m.stem = Conv2dParams<T>::make(in_ch, W, 3);
  for (auto& b : m.enc) b = DenseBlockParams<T>::make(v.blocks, W, W, W);
  m.bottleneck = DenseBlockParams<T>::make(v.blocks, W, W, W);
  const int U = v.competitive_unpool ? W : 2 * W;
  for (int l = 0; l < 4; ++l) {
    if (v.competitive_unpool) m.cub[l] = CubParams<T>::make(W, W);
    m.dec[l] = DenseBlockParams<T>::make(v.blocks, U, W, W);
  }
  m.classifier = Conv2dParams<T>::make(W, classes, 1);

  // He-uniform fan-in init for every conv weight, one shared stream in
  // registration order; biases stay 0, batch-norm scales stay (1, 0).
  Rng rng(seed);
  ParamStore<T> store;
  m.collect(store);
  for (const auto& ref : store.refs()) {
    if (ref.grad == nullptr) continue;
    if (ref.name.size() >= 11 &&
        ref.name.compare(ref.name.size() - 11, 11, "conv.weight") == 0) {
      const Shape s = ref.value->shape;
      const double fan_in = static_cast<double>(s.c) * s.h * s.w;
      const double bound = std::sqrt(6.0 / fan_in);
      rng.fill_uniform(*ref.value, -bound, bound);
    }
  }
  return m;
}

template <typename T>
void Model<T>::collect(ParamStore<T>& store) {
  register_conv(store, "stem.conv", stem);
  for (int l = 0; l < 4; ++l)
    register_block(store, "enc" + std::to_string(l + 1), enc[l]);
  register_block(store, "bottleneck", bottleneck);
  for (int l = 3; l >= 0; --l) {
    if (variant.competitive_unpool)
      register_conv(store, "cub" + std::to_string(l + 1) + ".joint.conv",
                    cub[l].joint);
    register_block(store, "dec" + std::to_string(l + 1), dec[l]);
  }
  register_conv(store, "classifier.conv", classifier);
}

template <typename T>
std::int64_t Model<T>::param_count() {
  ParamStore<T> store;
  collect(store);
  std::int64_t total = 0;
  for (const auto& ref : store.refs())
    if (ref.grad != nullptr) total += ref.value->numel();
  return total;
}

template <typename T>
void Model<T>::zero_grads() {
  ParamStore<T> store;
  collect(store);
  for (const auto& ref : store.refs()) {
    if (ref.grad == nullptr) continue;
    std::fill(ref.grad->data.begin(), ref.grad->data.end(), T(0));
  }
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, Mode mode,
                            ModelCache<T>* cache) {
  if (x.shape.c != in_channels) {
    throw DimensionError("model: input has " + std::to_string(x.shape.c) +
                         " channels, expected " + std::to_string(in_channels));
  }
  if (x.shape.h % 16 != 0 || x.shape.w % 16 != 0) {
    throw DimensionError("model: spatial extents must be divisible by 16, got " +
                         x.shape.str());
  }
  if (cache) cache->x = x;

  std::array<PoolIndices, 4> local_idx;
  PoolIndices* idx = cache ? cache->idx.data() : local_idx.data();

  Tensor<T> cur = conv2d_forward(x, stem);
  std::array<Tensor<T>, 4> skips;
  for (int l = 0; l < 4; ++l) {
    cur = dense_block_forward(cur, enc[l], mode,
                              cache ? &cache->enc_cache[l] : nullptr);
    skips[l] = cur;
    auto [pooled, pidx] = maxpool2x2_forward(cur);
    cur = std::move(pooled);
    idx[l] = std::move(pidx);
  }
  cur = dense_block_forward(cur, bottleneck, mode,
                            cache ? &cache->bottleneck_cache : nullptr);
  for (int l = 3; l >= 0; --l) {
    Tensor<T> joined =
        variant.competitive_unpool
            ? cub_forward(cur, idx[l], skips[l], cub[l],
                          cache ? &cache->cub_cache[l] : nullptr)
            : unpool_concat_forward(cur, idx[l], skips[l]);
    cur = dense_block_forward(joined, dec[l], mode,
                              cache ? &cache->dec_cache[l] : nullptr);
  }
  if (cache) cache->cls_in = cur;
  return conv2d_forward(cur, classifier);
}

template <typename T>
Tensor<T> Model<T>::backward(const ModelCache<T>& cache,
                             const Tensor<T>& grad_logits) {
  Tensor<T> g = conv2d_backward(cache.cls_in, classifier, grad_logits);

  std::array<Tensor<T>, 4> g_skip;
  for (int l = 0; l < 4; ++l) {  // reverse of the decoder: shallow first
    g = dense_block_backward(dec[l], cache.dec_cache[l], g);
    if (variant.competitive_unpool) {
      auto [g_dec, gs] = cub_backward(cub[l], cache.cub_cache[l], g);
      g = std::move(g_dec);
      g_skip[l] = std::move(gs);
    } else {
      auto [g_dec, gs] =
          unpool_concat_backward(cache.idx[l], width, width, g);
      g = std::move(g_dec);
      g_skip[l] = std::move(gs);
    }
  }
  g = dense_block_backward(bottleneck, cache.bottleneck_cache, g);
  for (int l = 3; l >= 0; --l) {
    Tensor<T> ge = maxpool2x2_backward(cache.idx[l], g);
    add_inplace(ge, g_skip[l]);
    g = dense_block_backward(enc[l], cache.enc_cache[l], ge);
  }
  return conv2d_backward(cache.x, stem, g);
}

template <typename T>
void Model<T>::save(const std::string& path) {
  ParamStore<T> store;
  collect(store);
  Tensor<T> meta(Shape{1, 1, 1, 4},
                 {static_cast<T>(variant.id()), static_cast<T>(in_channels),
                  static_cast<T>(num_classes), static_cast<T>(width)});
  std::vector<std::pair<std::string, const Tensor<T>*>> entries;
  entries.reserve(store.size() + 1);
  entries.emplace_back("meta", &meta);
  for (const auto& ref : store.refs()) entries.emplace_back(ref.name, ref.value);
  write_checkpoint<T>(path, entries);
}

template <typename T>
Model<T> Model<T>::load(const std::string& path) {
  auto entries = read_checkpoint(path);
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& e : entries) {
    if (!std::holds_alternative<Tensor<T>>(e.value))
      throw CheckpointError("entry \"" + e.name + "\" in " + path +
                            " has the wrong element type");
    if (by_name.count(e.name))
      throw CheckpointError("duplicate entry \"" + e.name + "\" in " + path);
    by_name[e.name] = &std::get<Tensor<T>>(e.value);
  }

  auto meta_it = by_name.find("meta");
  if (meta_it == by_name.end())
    throw CheckpointError("checkpoint " + path + " has no meta entry");
  const Tensor<T>& meta = *meta_it->second;
  if (meta.numel() != 4)
    throw CheckpointError("checkpoint " + path + " has a malformed meta entry");
  const VariantSpec v = VariantSpec::from_id(static_cast<int>(meta.data[0]));
  Model m = build(v, static_cast<int>(meta.data[1]),
                  static_cast<int>(meta.data[2]),
                  static_cast<int>(meta.data[3]), /*seed=*/0);

  ParamStore<T> store;
  m.collect(store);
  std::size_t used = 1;  // meta
  for (const auto& ref : store.refs()) {
    auto it = by_name.find(ref.name);
    if (it == by_name.end())
      throw CheckpointError("checkpoint " + path + " is missing \"" +
                            ref.name + "\"");
    if (!(it->second->shape == ref.value->shape))
      throw CheckpointError("checkpoint entry \"" + ref.name + "\" has shape " +
                            it->second->shape.str() + ", expected " +
                            ref.value->shape.str());
    ref.value->data = it->second->data;
    ++used;
  }
  if (used != by_name.size()) {
    for (const auto& [name, t] : by_name) {
      (void)t;
      bool known = name == "meta";
      for (const auto& ref : store.refs()) known = known || ref.name == name;
      if (!known)
        throw CheckpointError("checkpoint " + path +
                              " holds an unexpected entry \"" + name + "\"");
    }
  }
  return m;
}

template <typename T>
std::uint64_t routing_digest(const Model<T>& m, const ModelCache<T>& cache) {
  RoutingHash h;
  auto add_composite = [&h](const CompositeCache<T>& c) {
    h.add_sign_mask(c.pre_act);
  };
  auto add_block = [&](const DenseBlockCache<T>& c, BlockKind kind) {
    add_composite(c.c1);
    if (kind == BlockKind::kCompetitive) h.add_argindex(c.m1);
    add_composite(c.c2);
    if (kind == BlockKind::kCompetitive) h.add_argindex(c.m2);
    add_composite(c.c3);
  };
  for (int l = 0; l < 4; ++l) {
    add_block(cache.enc_cache[l], m.variant.blocks);
    h.add_pool(cache.idx[l]);
  }
  add_block(cache.bottleneck_cache, m.variant.blocks);
  for (int l = 3; l >= 0; --l) {
    if (m.variant.competitive_unpool) h.add_argindex(cache.cub_cache[l].m);
    add_block(cache.dec_cache[l], m.variant.blocks);
  }
  return h.state;
}

template class Model<float>;
template class Model<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template std::uint64_t routing_digest<float>(const Model<float>&,
                                             const ModelCache<float>&);
template std::uint64_t routing_digest<double>(const Model<double>&,
                                              const ModelCache<double>&);

}  // namespace cdfnet
