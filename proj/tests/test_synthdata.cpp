#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cdfnet/synthdata.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cdfnet/errors.hpp"

using namespace cdfnet;
using namespace cdfnet::synth;
namespace fs = std::filesystem;

namespace {

bool same_image(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape.numel() == b.shape.numel() && a.data == b.data;
}

bool same_labels(const LabelMap& a, const LabelMap& b) {
  return a.n == b.n && a.h == b.h && a.w == b.w && a.data == b.data;
}

fs::path fresh_dir(const char* leaf) {
  fs::path p = fs::temp_directory_path() / leaf;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("a (spec, seed, index) triple renders the same sample every time") {
  SceneSpec spec = SceneSpec::easy();
  Tensor<float> img1, img2;
  LabelMap lab1, lab2;
  render_sample(spec, 77, 3, img1, lab1);
  render_sample(spec, 77, 3, img2, lab2);
  CHECK(same_image(img1, img2));
  CHECK(same_labels(lab1, lab2));

  // Different index or seed: different scene.
  render_sample(spec, 77, 4, img2, lab2);
  CHECK_FALSE(same_image(img1, img2));
  render_sample(spec, 78, 3, img2, lab2);
  CHECK_FALSE(same_image(img1, img2));
}

TEST_CASE("samples do not depend on how many are generated") {
  SceneSpec spec = SceneSpec::easy();
  Dataset small = generate(spec, 6, 123);
  Dataset big = generate(spec, 40, 123, 5, 5);
  for (int i = 0; i < 6; ++i) {
    CHECK(same_image(small.images[i], big.images[i]));
    CHECK(same_labels(small.labels[i], big.labels[i]));
  }
}

TEST_CASE("generate is deterministic end to end") {
  SceneSpec spec = SceneSpec::imbalanced();
  Dataset a = generate(spec, 5, 9, 2, 2);
  Dataset b = generate(spec, 5, 9, 2, 2);
  REQUIRE(a.size() == b.size());
  for (int i = 0; i < a.size(); ++i) {
    CHECK(same_image(a.images[i], b.images[i]));
    CHECK(same_labels(a.labels[i], b.labels[i]));
  }
  CHECK(a.spec_digest == b.spec_digest);
}

TEST_CASE("labels stay in range and the background survives") {
  SceneSpec spec = SceneSpec::easy();
  Dataset ds = generate(spec, 8, 5);
  REQUIRE(ds.num_classes == 5);
  for (const auto& lab : ds.labels) {
    std::uint32_t lo = 1000, hi = 0;
    std::int64_t bg = 0;
    for (std::uint32_t v : lab.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      bg += v == 0;
    }
    CHECK(lo == 0);
    CHECK(hi < 5);
    // The easy preset's shapes cover well under half the image.
    CHECK(bg > lab.numel() / 2);
  }
}

TEST_CASE("a full-cover noiseless rectangle gives a constant scene") {
  SceneSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.noise_sigma = 0.0;
  spec.shapes.push_back({Primitive::kRectangle, 1.0, 1.0, 1.0, 1.0, 0.75});
  Tensor<float> img;
  LabelMap lab;
  render_sample(spec, 1, 0, img, lab);
  for (std::uint32_t v : lab.data) CHECK(v == 1);
  for (float v : img.data) CHECK(v == 0.75f);
}

TEST_CASE("measured class imbalance tracks the recipe") {
  for (const char* name : {"imbalanced", "occluded"}) {
    CAPTURE(name);
    SceneSpec spec = SceneSpec::preset(name);
    const int rare = spec.num_classes() - 1;
    std::int64_t rare_px = 0, largest_px = 0;
    for (int i = 0; i < 100; ++i) {
      Tensor<float> img;
      LabelMap lab;
      render_sample(spec, 31, i, img, lab);
      for (std::uint32_t v : lab.data) {
        rare_px += v == static_cast<std::uint32_t>(rare);
        largest_px += v == 1;
      }
    }
    CHECK(rare_px > 0);
    const double measured = double(rare_px) / double(largest_px);
    const double designed = spec.rare_ratio();
    CAPTURE(measured);
    CAPTURE(designed);
    CHECK(measured > designed / 2.0);
    CHECK(measured < designed * 2.0);
  }
}

TEST_CASE("the rare class sits on the largest shape when pinned") {
  SceneSpec spec = SceneSpec::occluded();
  REQUIRE(spec.rare_on_largest);
  const std::uint32_t rare = spec.num_classes() - 1;
  int checked = 0;
  for (int s = 0; s < 60; ++s) {
    Tensor<float> img;
    LabelMap lab;
    render_sample(spec, 404, s, img, lab);
    int min_i1 = 1 << 20, max_i1 = -1, min_j1 = 1 << 20, max_j1 = -1;
    double ri = 0, rj = 0;
    int rn = 0;
    for (int i = 0; i < lab.h; ++i)
      for (int j = 0; j < lab.w; ++j) {
        const std::uint32_t v = lab.at(0, i, j);
        if (v == 1) {
          min_i1 = std::min(min_i1, i);
          max_i1 = std::max(max_i1, i);
          min_j1 = std::min(min_j1, j);
          max_j1 = std::max(max_j1, j);
        } else if (v == rare) {
          ri += i;
          rj += j;
          ++rn;
        }
      }
    if (rn == 0 || max_i1 < 0) continue;
    ri /= rn;
    rj /= rn;
    CHECK(ri >= min_i1 - 1);
    CHECK(ri <= max_i1 + 1);
    CHECK(rj >= min_j1 - 1);
    CHECK(rj <= max_j1 + 1);
    ++checked;
  }
  CHECK(checked > 30);
}

TEST_CASE("a rare class that cannot fill a pixel is rejected with advice") {
  SceneSpec spec = SceneSpec::imbalanced();
  spec.height = 16;
  spec.width = 16;
  CHECK_THROWS_WITH_AS(generate(spec, 1, 0),
                       doctest::Contains("under one pixel"), ConfigError);
  CHECK_THROWS_WITH_AS(generate(spec, 1, 0), doctest::Contains("48x48"),
                       ConfigError);
}

TEST_CASE("generate validates its arguments") {
  SceneSpec spec = SceneSpec::easy();
  CHECK_THROWS_AS(generate(spec, 0, 1), ConfigError);
  CHECK_THROWS_AS(generate(spec, 3, 1, -1, 0), ConfigError);
  spec.height = 24;  // not a multiple of 16
  CHECK_THROWS_AS(generate(spec, 1, 1), ConfigError);
  spec = SceneSpec::easy();
  spec.shapes.clear();
  CHECK_THROWS_AS(generate(spec, 1, 1), ConfigError);
  spec = SceneSpec::easy();
  spec.noise_sigma = -0.1;
  CHECK_THROWS_AS(generate(spec, 1, 1), ConfigError);
  spec = SceneSpec::easy();
  spec.shapes[0].min_area = spec.shapes[0].max_area + 0.01;
  CHECK_THROWS_AS(generate(spec, 1, 1), ConfigError);
}

TEST_CASE("split views expose the right samples") {
  Dataset ds = generate(SceneSpec::easy(), 4, 2, 2, 3);
  REQUIRE(ds.size() == 9);
  CHECK(ds.train_idx == std::vector<int>({0, 1, 2, 3}));
  CHECK(ds.val_idx == std::vector<int>({4, 5}));
  CHECK(ds.test_idx == std::vector<int>({6, 7, 8}));
  SplitView tr = split_view(ds, "train");
  SplitView va = split_view(ds, "val");
  SplitView te = split_view(ds, "test");
  CHECK(tr.size() == 4);
  CHECK(va.size() == 2);
  CHECK(te.size() == 3);
  CHECK(tr.images[1] == &ds.images[1]);
  CHECK(va.labels[0] == &ds.labels[4]);
  CHECK(te.images[2] == &ds.images[8]);
  CHECK_THROWS_AS(split_view(ds, "holdout"), ConfigError);
}

TEST_CASE("preset lookup rejects unknown names") {
  CHECK_THROWS_WITH_AS(SceneSpec::preset("hardcore"),
                       doctest::Contains("expected easy, imbalanced or "
                                         "occluded"),
                       ConfigError);
  CHECK(SceneSpec::preset("easy").name == "easy");
  CHECK(SceneSpec::preset("occluded").rare_on_largest);
}

TEST_CASE("export then import reproduces the dataset exactly") {
  fs::path dir = fresh_dir("cdfnet_synth_roundtrip");
  Dataset ds = generate(SceneSpec::imbalanced(), 3, 42, 1, 2);
  export_dataset(ds, dir.string());
  Dataset back = import_dataset(dir.string());
  REQUIRE(back.size() == ds.size());
  for (int i = 0; i < ds.size(); ++i) {
    CHECK(same_image(ds.images[i], back.images[i]));
    CHECK(same_labels(ds.labels[i], back.labels[i]));
  }
  CHECK(back.train_idx == ds.train_idx);
  CHECK(back.val_idx == ds.val_idx);
  CHECK(back.test_idx == ds.test_idx);
  CHECK(back.num_classes == ds.num_classes);
  CHECK(back.spec_digest == ds.spec_digest);
  fs::remove_all(dir);
}

TEST_CASE("import refuses incomplete or tampered directories") {
  fs::path dir = fresh_dir("cdfnet_synth_integrity");
  Dataset ds = generate(SceneSpec::easy(), 3, 7);
  export_dataset(ds, dir.string());

  SUBCASE("missing directory") {
    CHECK_THROWS_AS(import_dataset((dir / "nope").string()), IntegrityError);
  }
  SUBCASE("a deleted label file is named") {
    fs::remove(dir / "lab_00001.cdft");
    CHECK_THROWS_WITH_AS(import_dataset(dir.string()),
                         doctest::Contains("lab_00001.cdft"), IntegrityError);
  }
  SUBCASE("an edited image fails its digest") {
    fs::path victim = dir / "img_00002.cdft";
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    char b;
    f.seekg(-1, std::ios::end);
    f.get(b);
    f.seekp(-1, std::ios::end);
    b ^= 0x40;
    f.put(b);
    f.close();
    CHECK_THROWS_WITH_AS(import_dataset(dir.string()),
                         doctest::Contains("img_00002.cdft"), IntegrityError);
  }
  SUBCASE("a malformed manifest line is rejected") {
    std::ofstream m(dir / "manifest.txt", std::ios::app);
    m << "sample = what\n";
    m.close();
    CHECK_THROWS_AS(import_dataset(dir.string()), IntegrityError);
  }
  SUBCASE("a future format version is rejected") {
    // Rewrite the first line.
    std::ifstream in(dir / "manifest.txt");
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    in.close();
    const std::string from = "format = 1";
    text.replace(text.find(from), from.size(), "format = 9");
    std::ofstream out(dir / "manifest.txt", std::ios::trunc);
    out << text;
    out.close();
    CHECK_THROWS_AS(import_dataset(dir.string()), IntegrityError);
  }
  fs::remove_all(dir);
}

TEST_CASE("exports are reproducible byte for byte") {
  fs::path d1 = fresh_dir("cdfnet_synth_bytes1");
  fs::path d2 = fresh_dir("cdfnet_synth_bytes2");
  Dataset ds = generate(SceneSpec::occluded(), 2, 99, 0, 1);
  export_dataset(ds, d1.string());
  export_dataset(ds, d2.string());
  for (const auto& entry : fs::directory_iterator(d1)) {
    std::ifstream a(entry.path(), std::ios::binary);
    std::ifstream b(d2 / entry.path().filename(), std::ios::binary);
    REQUIRE(b.good());
    std::string sa((std::istreambuf_iterator<char>(a)),
                   std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)),
                   std::istreambuf_iterator<char>());
    CHECK(sa == sb);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}
