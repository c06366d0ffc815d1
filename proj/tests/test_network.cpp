#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cdfnet/errors.hpp"
#include "cdfnet/io.hpp"
#include "cdfnet/network.hpp"
#include "cdfnet/tensor.hpp"

using namespace cdfnet;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  const fs::path d = fs::temp_directory_path() / "cdfnet_network_test";
  fs::create_directories(d);
  return d;
}

template <typename T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape == b.shape)) return false;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

Tensor<float> random_input(int n, int c, int h, int w, std::uint64_t seed) {
  Tensor<float> x(Shape(n, c, h, w));
  Rng rng(seed);
  rng.fill_uniform(x, 0.0, 1.0);
  return x;
}

}  // namespace

TEST_CASE("variant table: names, switches, ids") {
  const auto all = VariantSpec::all();
  REQUIRE(all.size() == 4);
  CHECK(all[0].name == "bl0");
  CHECK(all[0].blocks == BlockKind::kVanilla);
  CHECK(all[0].competitive_unpool == false);
  CHECK(all[1].name == "bl1");
  CHECK(all[1].blocks == BlockKind::kCompetitive);
  CHECK(all[1].competitive_unpool == false);
  CHECK(all[2].name == "bl2");
  CHECK(all[2].blocks == BlockKind::kVanilla);
  CHECK(all[2].competitive_unpool == true);
  CHECK(all[3].name == "cdfnet");
  CHECK(all[3].blocks == BlockKind::kCompetitive);
  CHECK(all[3].competitive_unpool == true);

  for (int i = 0; i < 4; ++i)
    CHECK(VariantSpec::from_id(i).id() == i);
  CHECK(VariantSpec::parse("cdfnet").id() == 3);
  CHECK_THROWS_AS(VariantSpec::parse("bl3"), ConfigError);
  CHECK_THROWS_WITH_AS(VariantSpec::parse("dense"),
                       doctest::Contains("expected bl0, bl1, bl2 or cdfnet"),
                       ConfigError);
  CHECK_THROWS_AS(VariantSpec::from_id(4), CheckpointError);
  CHECK_THROWS_AS(VariantSpec::from_id(-1), CheckpointError);
}

TEST_CASE("decoder input width depends on the join flavor") {
  auto cdf = Model<float>::build(VariantSpec::parse("cdfnet"), 1, 2, 8, 1);
  CHECK(cdf.decoder_in_width() == 8);
  auto bl0 = Model<float>::build(VariantSpec::parse("bl0"), 1, 2, 8, 1);
  CHECK(bl0.decoder_in_width() == 16);
}

TEST_CASE("forward keeps spatial extents and emits one channel per class") {
  const auto x = random_input(1, 1, 32, 32, 99);
  for (const auto& v : VariantSpec::all()) {
    auto m = Model<float>::build(v, 1, 3, 2, 5);
    auto logits = m.forward(x, Mode::kTrain);
    CHECK(logits.shape == Shape(1, 3, 32, 32));
  }
}

TEST_CASE("forward validates its input") {
  auto m = Model<float>::build(VariantSpec::parse("cdfnet"), 1, 2, 2, 5);
  CHECK_THROWS_AS(m.forward(random_input(1, 2, 32, 32, 1), Mode::kEval),
                  DimensionError);
  CHECK_THROWS_AS(m.forward(random_input(1, 1, 20, 20, 1), Mode::kEval),
                  DimensionError);
  CHECK_THROWS_AS(
      Model<float>::build(VariantSpec::parse("cdfnet"), 0, 2, 2, 5),
      ConfigError);
  CHECK_THROWS_AS(
      Model<float>::build(VariantSpec::parse("cdfnet"), 1, 1, 2, 5),
      ConfigError);
  CHECK_THROWS_AS(
      Model<float>::build(VariantSpec::parse("cdfnet"), 1, 2, 0, 5),
      ConfigError);
}

TEST_CASE("competitive variants need fewer parameters at every width") {
  for (int w : {2, 4, 8, 16}) {
    std::int64_t count[4];
    for (const auto& v : VariantSpec::all()) {
      auto m = Model<float>::build(v, 1, 5, w, 1);
      count[v.id()] = m.param_count();
    }
    // maxing keeps widths constant; concatenation multiplies them
    CHECK(count[3] < count[1]);  // cdfnet < bl1: joins cost less than concat
    CHECK(count[3] < count[2]);  // cdfnet < bl2: blocks cost less too
    CHECK(count[1] < count[0]);
    CHECK(count[2] < count[0]);
  }
}

TEST_CASE("parameter names are stable and complete") {
  auto m = Model<float>::build(VariantSpec::parse("cdfnet"), 1, 2, 2, 1);
  ParamStore<float> store;
  m.collect(store);
  const auto& refs = store.refs();
  REQUIRE(!refs.empty());
  CHECK(refs.front().name == "stem.conv.weight");
  CHECK(refs.back().name == "classifier.conv.bias");

  int learnable = 0, buffers = 0;
  bool saw_cub = false, saw_running = false;
  for (const auto& r : refs) {
    (r.grad != nullptr ? learnable : buffers)++;
    saw_cub = saw_cub || r.name.rfind("cub4.joint.conv.weight", 0) == 0;
    saw_running = saw_running || r.name.find("running_mean") != std::string::npos;
  }
  CHECK(saw_cub);
  CHECK(saw_running);
  // stem(2) + 9 blocks * 3 units * 4 + 4 cub joints * 2 + classifier(2)
  CHECK(learnable == 2 + 9 * 12 + 8 + 2);
  // 9 blocks * 3 units * 2 running stats
  CHECK(buffers == 54);

  // Vanilla join drops the extra convs.
  auto plain = Model<float>::build(VariantSpec::parse("bl0"), 1, 2, 2, 1);
  ParamStore<float> pstore;
  plain.collect(pstore);
  for (const auto& r : pstore.refs()) CHECK(r.name.rfind("cub", 0) != 0);
}

TEST_CASE("same seed builds the same net, different seed does not") {
  auto a = Model<float>::build(VariantSpec::parse("bl1"), 1, 2, 4, 1234);
  auto b = Model<float>::build(VariantSpec::parse("bl1"), 1, 2, 4, 1234);
  auto c = Model<float>::build(VariantSpec::parse("bl1"), 1, 2, 4, 1235);
  CHECK(same_bits(a.stem.weight.value, b.stem.weight.value));
  CHECK(same_bits(a.enc[3].h2.conv.weight.value,
                  b.enc[3].h2.conv.weight.value));
  CHECK(!same_bits(a.stem.weight.value, c.stem.weight.value));
  // biases start at zero, norm scales at one
  for (float v : a.stem.bias.value.data) CHECK(v == 0.0f);
  for (float v : a.enc[0].h1.bn.gamma.value.data) CHECK(v == 1.0f);
  for (float v : a.enc[0].h1.bn.beta.value.data) CHECK(v == 0.0f);
}

TEST_CASE("save and load round-trip bit-exactly") {
  const auto path = (tmp_dir() / "round.cdfc").string();
  auto m = Model<float>::build(VariantSpec::parse("cdfnet"), 1, 3, 2, 77);
  // Make the buffers non-trivial so the round trip covers them too.
  const auto x = random_input(2, 1, 16, 16, 7);
  m.forward(x, Mode::kTrain);
  m.save(path);

  auto r = Model<float>::load(path);
  CHECK(r.variant.name == "cdfnet");
  CHECK(r.in_channels == 1);
  CHECK(r.num_classes == 3);
  CHECK(r.width == 2);
  CHECK(r.param_count() == m.param_count());

  ParamStore<float> sa, sb;
  m.collect(sa);
  r.collect(sb);
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    CHECK(sa.refs()[i].name == sb.refs()[i].name);
    CHECK(same_bits(*sa.refs()[i].value, *sb.refs()[i].value));
  }

  // Eval forward depends on every saved tensor including running stats.
  auto ya = m.forward(x, Mode::kEval);
  auto yb = r.forward(x, Mode::kEval);
  CHECK(same_bits(ya, yb));
}

TEST_CASE("checkpoint negatives: missing, extra, reshaped, unversioned") {
  auto m = Model<float>::build(VariantSpec::parse("bl1"), 1, 2, 2, 3);
  ParamStore<float> store;
  m.collect(store);
  Tensor<float> meta(Shape{1, 1, 1, 4},
                     {static_cast<float>(m.variant.id()), 1.0f, 2.0f, 2.0f});

  using Entries = std::vector<std::pair<std::string, const Tensor<float>*>>;
  auto write_variant = [&](const std::string& name, auto mutate) {
    Entries e;
    e.emplace_back("meta", &meta);
    for (const auto& r : store.refs()) e.emplace_back(r.name, r.value);
    mutate(e);
    const auto p = (tmp_dir() / name).string();
    write_checkpoint<float>(p, e);
    return p;
  };

  SUBCASE("missing tensor") {
    auto p = write_variant("missing.cdfc", [](Entries& e) { e.pop_back(); });
    CHECK_THROWS_WITH_AS(Model<float>::load(p),
                         doctest::Contains("missing"), CheckpointError);
  }
  SUBCASE("unexpected extra tensor") {
    Tensor<float> stray(Shape(1, 1, 1, 1));
    auto p = write_variant("extra.cdfc", [&](Entries& e) {
      e.emplace_back("stray", &stray);
    });
    CHECK_THROWS_WITH_AS(Model<float>::load(p),
                         doctest::Contains("unexpected"), CheckpointError);
  }
  SUBCASE("shape mismatch names the entry and both shapes") {
    Tensor<float> wrong(Shape(1, 1, 1, 2));
    auto p = write_variant("shape.cdfc", [&](Entries& e) {
      e.back().second = &wrong;  // classifier.conv.bias is (1,2,1,1)
    });
    CHECK_THROWS_WITH_AS(Model<float>::load(p),
                         doctest::Contains("classifier.conv.bias"),
                         CheckpointError);
  }
  SUBCASE("no meta entry") {
    auto p = write_variant("nometa.cdfc",
                           [](Entries& e) { e.erase(e.begin()); });
    CHECK_THROWS_WITH_AS(Model<float>::load(p), doctest::Contains("meta"),
                         CheckpointError);
  }
  SUBCASE("variant id out of range") {
    meta.data[0] = 9.0f;
    auto p = write_variant("badid.cdfc", [](Entries&) {});
    CHECK_THROWS_AS(Model<float>::load(p), CheckpointError);
  }
  SUBCASE("label payload instead of weights") {
    const auto p = (tmp_dir() / "labels.cdfc").string();
    {
      std::ofstream f(p, std::ios::binary);
      f.write("CDFC\x01", 5);
      const std::uint32_t count = 1;
      f.write(reinterpret_cast<const char*>(&count), 4);
      const std::uint32_t name_len = 4;
      f.write(reinterpret_cast<const char*>(&name_len), 4);
      f.write("meta", 4);
      LabelMap lm(1, 1, 4);
      write_record(f, lm);
    }
    CHECK_THROWS_WITH_AS(Model<float>::load(p),
                         doctest::Contains("element type"), CheckpointError);
  }
}

TEST_CASE("routing digest is stable per input and split by input") {
  auto m = Model<double>::build(VariantSpec::parse("cdfnet"), 1, 2, 2, 21);
  Tensor<double> x(Shape(1, 1, 16, 16));
  Rng rng(3);
  rng.fill_uniform(x, 0.0, 1.0);
  Tensor<double> x2(Shape(1, 1, 16, 16));
  rng.fill_uniform(x2, 0.0, 1.0);

  ModelCache<double> c1, c2, c3;
  m.forward(x, Mode::kTrain, &c1);
  m.forward(x, Mode::kTrain, &c2);
  m.forward(x2, Mode::kTrain, &c3);
  CHECK(routing_digest(m, c1) == routing_digest(m, c2));
  CHECK(routing_digest(m, c1) != routing_digest(m, c3));
}

TEST_CASE("backward produces an input-shaped gradient for every variant") {
  Tensor<double> x(Shape(1, 1, 16, 16));
  Rng rng(5);
  rng.fill_uniform(x, 0.0, 1.0);
  for (const auto& v : VariantSpec::all()) {
    auto m = Model<double>::build(v, 1, 2, 2, 17);
    ModelCache<double> cache;
    auto logits = m.forward(x, Mode::kTrain, &cache);
    Tensor<double> go(logits.shape);
    rng.fill_uniform(go, -1.0, 1.0);
    m.zero_grads();
    auto gx = m.backward(cache, go);
    CHECK(gx.shape == x.shape);
    // Gradient reached all the way down to the stem.
    double sum = 0.0;
    for (double g : m.stem.weight.grad.data) sum += std::abs(g);
    CHECK(sum > 0.0);
  }
}
