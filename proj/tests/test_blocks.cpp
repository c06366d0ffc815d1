#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <utility>
#include <vector>

#include "cdfnet/blocks.hpp"
#include "cdfnet/errors.hpp"
#include "cdfnet/layers.hpp"
#include "cdfnet/tensor.hpp"

using namespace cdfnet;

namespace {

void fill_unit(CompositeParams<double>& p, Rng& rng) {
  rng.fill_uniform(p.conv.weight.value, -0.5, 0.5);
  rng.fill_uniform(p.conv.bias.value, -0.2, 0.2);
  rng.fill_uniform(p.bn.gamma.value, 0.5, 1.5);
  rng.fill_uniform(p.bn.beta.value, -0.2, 0.2);
}

// A unit that outputs exactly zero on any input: zero conv, and batch
// norm of the resulting all-zero map is its (zero) shift.
void silence_unit(CompositeParams<double>& p) {
  p.conv.weight.value = Tensor<double>::zeros(p.conv.weight.value.shape);
  p.conv.bias.value = Tensor<double>::zeros(p.conv.bias.value.shape);
  p.bn.beta.value = Tensor<double>::zeros(p.bn.beta.value.shape);
}

bool same_bits(const Tensor<double>& a, const Tensor<double>& b) {
  if (!(a.shape == b.shape)) return false;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("composite unit is conv, then relu, then channel norm") {
  Rng rng(42);
  auto p = CompositeParams<double>::make(2, 3, 3);
  fill_unit(p, rng);
  Tensor<double> x(Shape(2, 2, 5, 5));
  rng.fill_uniform(x, -1.0, 1.0);

  auto manual_bn = p.bn;  // train-mode forward shifts the running stats
  Tensor<double> expected =
      batchnorm_forward(relu_forward(conv2d_forward(x, p.conv)), manual_bn,
                        Mode::kTrain);
  Tensor<double> got = composite_forward(x, p, Mode::kTrain);
  CHECK(same_bits(expected, got));
}

TEST_CASE("third-unit input width per block flavor") {
  CHECK(dense_block_h3_width(BlockKind::kCompetitive, 4, 4) == 4);
  CHECK(dense_block_h3_width(BlockKind::kVanilla, 4, 4) == 16);
  CHECK(dense_block_h3_width(BlockKind::kVanilla, 3, 2) == 10);
}

TEST_CASE("block construction wires the three units") {
  auto comp = DenseBlockParams<double>::make(BlockKind::kCompetitive, 3, 5, 7);
  CHECK(comp.h1.conv.in_channels() == 3);
  CHECK(comp.h1.conv.out_channels() == 3);
  CHECK(comp.h2.conv.in_channels() == 3);
  CHECK(comp.h2.conv.out_channels() == 3);
  CHECK(comp.h3.conv.in_channels() == 3);
  CHECK(comp.h3.conv.out_channels() == 5);

  auto van = DenseBlockParams<double>::make(BlockKind::kVanilla, 3, 5, 2);
  CHECK(van.h1.conv.in_channels() == 3);
  CHECK(van.h1.conv.out_channels() == 2);
  CHECK(van.h2.conv.in_channels() == 5);   // [f1 | x]
  CHECK(van.h2.conv.out_channels() == 2);
  CHECK(van.h3.conv.in_channels() == 10);  // [f2 | y1 | x]
  CHECK(van.h3.conv.out_channels() == 5);

  CHECK_THROWS_AS(DenseBlockParams<double>::make(BlockKind::kVanilla, 3, 5, 0),
                  DimensionError);
}

TEST_CASE("block rejects input of the wrong width") {
  auto p = DenseBlockParams<double>::make(BlockKind::kCompetitive, 3, 3, 3);
  Tensor<double> x(Shape(1, 2, 4, 4));
  CHECK_THROWS_AS(dense_block_forward(x, p, Mode::kTrain), DimensionError);
}

TEST_CASE("competitive block with silent early units passes input to h3") {
  Rng rng(7);
  auto p = DenseBlockParams<double>::make(BlockKind::kCompetitive, 3, 4, 3);
  fill_unit(p.h1, rng);
  fill_unit(p.h2, rng);
  fill_unit(p.h3, rng);
  silence_unit(p.h1);
  silence_unit(p.h2);

  // Strictly positive input beats the silent units at every max, so the
  // block collapses to h3 applied to the raw input.
  Tensor<double> x(Shape(2, 3, 6, 6));
  rng.fill_uniform(x, 0.1, 1.0);

  auto h3_copy = p.h3;
  DenseBlockCache<double> cache;
  Tensor<double> got = dense_block_forward(x, p, Mode::kTrain, &cache);
  Tensor<double> expected = composite_forward(x, h3_copy, Mode::kTrain);
  CHECK(same_bits(expected, got));

  // Every max chose the carried input (index 1), never the new features.
  for (std::size_t i = 0; i < cache.m1.winner.size(); ++i) {
    CHECK(cache.m1.winner[i] == 1);
    CHECK(cache.m2.winner[i] == 1);
  }
}

TEST_CASE("competitive block backward: silent units get no gradient") {
  Rng rng(8);
  auto p = DenseBlockParams<double>::make(BlockKind::kCompetitive, 2, 3, 2);
  fill_unit(p.h1, rng);
  fill_unit(p.h2, rng);
  fill_unit(p.h3, rng);
  silence_unit(p.h1);
  silence_unit(p.h2);

  Tensor<double> x(Shape(1, 2, 4, 4));
  rng.fill_uniform(x, 0.1, 1.0);
  Tensor<double> go(Shape(1, 3, 4, 4));
  rng.fill_uniform(go, -1.0, 1.0);

  auto h3_copy = p.h3;
  DenseBlockCache<double> cache;
  dense_block_forward(x, p, Mode::kTrain, &cache);
  Tensor<double> gx = dense_block_backward(p, cache, go);

  CompositeCache<double> solo;
  composite_forward(x, h3_copy, Mode::kTrain, &solo);
  Tensor<double> gx_solo = composite_backward(h3_copy, solo, go);
  CHECK(same_bits(gx_solo, gx));

  // The losing branches routed nothing back into h1/h2.
  for (double v : p.h1.conv.weight.grad.data) CHECK(v == 0.0);
  for (double v : p.h2.conv.weight.grad.data) CHECK(v == 0.0);
  for (double v : p.h1.bn.gamma.grad.data) CHECK(v == 0.0);
}

TEST_CASE("concatenating block matches its hand-assembled composition") {
  Rng rng(9);
  auto p = DenseBlockParams<double>::make(BlockKind::kVanilla, 3, 4, 2);
  fill_unit(p.h1, rng);
  fill_unit(p.h2, rng);
  fill_unit(p.h3, rng);
  Tensor<double> x(Shape(2, 3, 6, 6));
  rng.fill_uniform(x, -1.0, 1.0);

  auto h1 = p.h1, h2 = p.h2, h3 = p.h3;
  Tensor<double> f1 = composite_forward(x, h1, Mode::kTrain);
  Tensor<double> y1 = concat_channels(f1, x);
  Tensor<double> f2 = composite_forward(y1, h2, Mode::kTrain);
  Tensor<double> y2 = concat_channels(concat_channels(f2, y1), x);
  Tensor<double> expected = composite_forward(y2, h3, Mode::kTrain);

  Tensor<double> got = dense_block_forward(x, p, Mode::kTrain);
  CHECK(same_bits(expected, got));
  CHECK(got.shape.c == 4);
}

TEST_CASE("competitive block matches its hand-assembled composition") {
  Rng rng(10);
  auto p = DenseBlockParams<double>::make(BlockKind::kCompetitive, 3, 4, 3);
  fill_unit(p.h1, rng);
  fill_unit(p.h2, rng);
  fill_unit(p.h3, rng);
  Tensor<double> x(Shape(2, 3, 6, 6));
  rng.fill_uniform(x, -1.0, 1.0);

  auto h1 = p.h1, h2 = p.h2, h3 = p.h3;
  Tensor<double> f1 = composite_forward(x, h1, Mode::kTrain);
  Tensor<double> y1 = elementwise_max(f1, x).first;
  Tensor<double> f2 = composite_forward(y1, h2, Mode::kTrain);
  Tensor<double> y2 = elementwise_max(f2, y1).first;
  Tensor<double> expected = composite_forward(y2, h3, Mode::kTrain);

  Tensor<double> got = dense_block_forward(x, p, Mode::kTrain);
  CHECK(same_bits(expected, got));
}

TEST_CASE("competitive skip join defers to the skip when the mix loses") {
  Rng rng(11);
  const int c_dec = 2, c_skip = 3;
  Tensor<double> aux(Shape(1, c_dec, 8, 8));
  rng.fill_uniform(aux, -1.0, 1.0);
  const PoolIndices idx = maxpool2x2_forward(aux).second;

  Tensor<double> decoded(Shape(1, c_dec, 4, 4));
  rng.fill_uniform(decoded, -1.0, 1.0);
  Tensor<double> skip(Shape(1, c_skip, 8, 8));
  rng.fill_uniform(skip, -1.0, 1.0);

  auto p = CubParams<double>::make(c_dec, c_skip);
  p.joint.weight.value = Tensor<double>::zeros(p.joint.weight.value.shape);
  p.joint.bias.value = Tensor<double>::full(p.joint.bias.value.shape, -5.0);

  CubCache<double> cache;
  Tensor<double> out = cub_forward(decoded, idx, skip, p, &cache);
  CHECK(same_bits(skip, out));
  for (auto w : cache.m.winner) CHECK(w == 1);

  // All gradient flows straight back through the skip branch.
  Tensor<double> go(Shape(1, c_skip, 8, 8));
  rng.fill_uniform(go, -1.0, 1.0);
  auto [g_dec, g_skip] = cub_backward(p, cache, go);
  CHECK(same_bits(go, g_skip));
  for (double v : g_dec.data) CHECK(v == 0.0);
  for (double v : p.joint.weight.grad.data) CHECK(v == 0.0);
}

TEST_CASE("competitive skip join mixes both resolutions through one conv") {
  Rng rng(12);
  const int c_dec = 2, c_skip = 2;
  Tensor<double> aux(Shape(1, c_dec, 4, 4));
  rng.fill_uniform(aux, -1.0, 1.0);
  const PoolIndices idx = maxpool2x2_forward(aux).second;
  Tensor<double> decoded(Shape(1, c_dec, 2, 2));
  rng.fill_uniform(decoded, -1.0, 1.0);
  Tensor<double> skip(Shape(1, c_skip, 4, 4));
  rng.fill_uniform(skip, -1.0, 1.0);
  auto p = CubParams<double>::make(c_dec, c_skip);
  rng.fill_uniform(p.joint.weight.value, -0.5, 0.5);
  rng.fill_uniform(p.joint.bias.value, -0.2, 0.2);

  CubCache<double> cache;
  Tensor<double> out = cub_forward(decoded, idx, skip, p, &cache);

  Tensor<double> joint_in =
      concat_channels(max_unpool2x2(decoded, idx), skip);
  Tensor<double> mixed = conv2d_forward(joint_in, p.joint);
  Tensor<double> expected = elementwise_max(mixed, skip).first;
  CHECK(same_bits(expected, out));

  CHECK_THROWS_AS(cub_forward(skip, idx, skip, p), DimensionError);
}

TEST_CASE("concatenating join stacks the upsampled map over the skip") {
  Rng rng(13);
  const int c_dec = 2, c_skip = 3;
  Tensor<double> aux(Shape(2, c_dec, 6, 6));
  rng.fill_uniform(aux, -1.0, 1.0);
  const PoolIndices idx = maxpool2x2_forward(aux).second;
  Tensor<double> decoded(Shape(2, c_dec, 3, 3));
  rng.fill_uniform(decoded, -1.0, 1.0);
  Tensor<double> skip(Shape(2, c_skip, 6, 6));
  rng.fill_uniform(skip, -1.0, 1.0);

  Tensor<double> out = unpool_concat_forward(decoded, idx, skip);
  CHECK(out.shape.c == c_dec + c_skip);
  CHECK(out.shape.h == 6);

  Tensor<double> up = max_unpool2x2(decoded, idx);
  CHECK(same_bits(up, slice_channels(out, 0, c_dec)));
  CHECK(same_bits(skip, slice_channels(out, c_dec, c_dec + c_skip)));

  // Backward splits the incoming gradient the same way.
  Tensor<double> go(out.shape);
  rng.fill_uniform(go, -1.0, 1.0);
  auto [g_dec, g_skip] = unpool_concat_backward(idx, c_dec, c_skip, go);
  CHECK(same_bits(slice_channels(go, c_dec, c_dec + c_skip), g_skip));
  CHECK(g_dec.shape.h == 3);
  Tensor<double> expected_gdec =
      max_unpool2x2_backward(idx, slice_channels(go, 0, c_dec));
  CHECK(same_bits(expected_gdec, g_dec));
}
