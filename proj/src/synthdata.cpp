#include "cdfnet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cdfnet/errors.hpp"
#include "cdfnet/io.hpp"

namespace fs = std::filesystem;

namespace cdfnet::synth {

namespace {

constexpr std::uint64_t kSampleStream = 0x5CE11E50ULL;
constexpr double kPi = 3.14159265358979323846;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double mid_area(const ClassShape& s) { return 0.5 * (s.min_area + s.max_area); }

/// Class indices (into spec.shapes) ordered biggest expected area first.
std::vector<std::size_t> draw_order(const SceneSpec& spec) {
  std::vector<std::size_t> order(spec.shapes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return mid_area(spec.shapes[a]) > mid_area(spec.shapes[b]);
                   });
  return order;
}

int suggest_side(double area_frac) {
  // smallest multiple of 16 whose square grants the class one whole pixel
  const double side = std::sqrt(1.0 / area_frac);
  int s = 16;
  while (s < side) s += 16;
  return s;
}

void validate(const SceneSpec& spec) {
  if (spec.height < 16 || spec.width < 16 || spec.height % 16 != 0 ||
      spec.width % 16 != 0) {
    throw ConfigError("scene size must be a multiple of 16 in both extents, got " +
                      std::to_string(spec.height) + "x" +
                      std::to_string(spec.width));
  }
  if (spec.shapes.empty())
    throw ConfigError("scene needs at least one foreground class");
  if (spec.num_classes() > 255)
    throw ConfigError("too many classes for a sane scene");
  if (spec.noise_sigma < 0.0)
    throw ConfigError("noise sigma must be non-negative");
  const double pixels = static_cast<double>(spec.height) * spec.width;
  for (std::size_t k = 0; k < spec.shapes.size(); ++k) {
    const ClassShape& s = spec.shapes[k];
    if (!(s.min_area > 0.0) || s.max_area < s.min_area || s.max_area > 1.0)
      throw ConfigError("class " + std::to_string(k + 1) +
                        " has an invalid area range");
    if (!(s.min_aspect > 0.0) || s.max_aspect < s.min_aspect)
      throw ConfigError("class " + std::to_string(k + 1) +
                        " has an invalid aspect range");
    if (s.min_area * pixels < 1.0) {
      const int side = suggest_side(s.min_area);
      throw ConfigError(
          "class " + std::to_string(k + 1) + " would cover under one pixel at " +
          std::to_string(spec.height) + "x" + std::to_string(spec.width) +
          "; use at least " + std::to_string(side) + "x" +
          std::to_string(side));
    }
  }
}

struct Placed {
  double ci = 0.0, cj = 0.0;  // center
  double hh = 0.0, hw = 0.0;  // half extents of the bounding box
};

double place_coord(Rng& rng, double half, double extent, bool near,
                   double near_center, double near_half) {
  const double u = rng.uniform(0.0, 1.0);  // always one draw per coordinate
  if (near) {
    // Stay on the host shape: offset at most half its extent from its center.
    return near_center + (u - 0.5) * near_half;
  }
  const double lo = half, hi = extent - 1.0 - half;
  if (hi <= lo) return 0.5 * (extent - 1.0);
  return lo + u * (hi - lo);
}

}  // namespace

double SceneSpec::rare_ratio() const {
  if (shapes.empty()) return 1.0;
  double lo = mid_area(shapes[0]), hi = lo;
  for (const auto& s : shapes) {
    lo = std::min(lo, mid_area(s));
    hi = std::max(hi, mid_area(s));
  }
  return hi > 0.0 ? lo / hi : 1.0;
}

std::string SceneSpec::digest_text() const {
  std::ostringstream os;
  os << "scene 1\n"
     << "name " << name << "\n"
     << "size " << height << " " << width << "\n"
     << "background " << fmt(background_mean) << "\n"
     << "sigma " << fmt(noise_sigma) << "\n"
     << "rare_on_largest " << (rare_on_largest ? 1 : 0) << "\n";
  for (const auto& s : shapes) {
    os << "class "
       << (s.primitive == Primitive::kEllipse ? "ellipse" : "rectangle") << " "
       << fmt(s.min_area) << " " << fmt(s.max_area) << " " << fmt(s.min_aspect)
       << " " << fmt(s.max_aspect) << " " << fmt(s.mean) << "\n";
  }
  return os.str();
}

SceneSpec SceneSpec::easy() {
  SceneSpec s;
  s.name = "easy";
  s.background_mean = 0.10;
  s.noise_sigma = 0.05;
  // Intensity means sit 4 sigma apart: separable by brightness alone.
  s.shapes = {
      {Primitive::kEllipse, 0.100, 0.140, 0.7, 1.4, 0.30},
      {Primitive::kRectangle, 0.070, 0.100, 0.6, 1.7, 0.50},
      {Primitive::kEllipse, 0.045, 0.065, 0.7, 1.4, 0.70},
      {Primitive::kRectangle, 0.025, 0.040, 0.6, 1.7, 0.90},
  };
  return s;
}

SceneSpec SceneSpec::imbalanced() {
  SceneSpec s;
  s.name = "imbalanced";
  s.background_mean = 0.10;
  s.noise_sigma = 0.05;
  // Still separable by brightness, but the last class is ~225x rarer
  // than the first.
  s.shapes = {
      {Primitive::kEllipse, 0.280, 0.340, 0.7, 1.4, 0.30},
      {Primitive::kRectangle, 0.100, 0.140, 0.6, 1.7, 0.50},
      {Primitive::kEllipse, 0.030, 0.050, 0.7, 1.4, 0.70},
      {Primitive::kRectangle, 0.0009, 0.0018, 0.8, 1.25, 0.90},
  };
  return s;
}

SceneSpec SceneSpec::occluded() {
  SceneSpec s;
  s.name = "occluded";
  s.background_mean = 0.10;
  s.noise_sigma = 0.08;
  s.rare_on_largest = true;
  // The rare class sits on the largest organ at under one sigma of
  // contrast; brightness alone cannot find it.
  s.shapes = {
      {Primitive::kEllipse, 0.400, 0.480, 0.7, 1.4, 0.45},
      {Primitive::kRectangle, 0.080, 0.120, 0.6, 1.7, 0.65},
      {Primitive::kEllipse, 0.030, 0.050, 0.7, 1.4, 0.25},
      {Primitive::kEllipse, 0.0013, 0.0026, 0.8, 1.25, 0.52},
  };
  return s;
}

SceneSpec SceneSpec::preset(const std::string& name) {
  if (name == "easy") return easy();
  if (name == "imbalanced") return imbalanced();
  if (name == "occluded") return occluded();
  throw ConfigError("unknown preset \"" + name +
                    "\" (expected easy, imbalanced or occluded)");
}

void render_sample(const SceneSpec& spec, std::uint64_t seed, int index,
                   Tensor<float>& image, LabelMap& labels) {
  validate(spec);
  const int H = spec.height, W = spec.width;
  image = Tensor<float>(Shape(1, 1, H, W));
  labels = LabelMap(1, H, W);

  Rng rng(Rng::derive(Rng::derive(seed, kSampleStream),
                      static_cast<std::uint64_t>(index)));
  const auto order = draw_order(spec);
  const double pixels = static_cast<double>(H) * W;

  Placed largest;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t k = order[oi];
    const ClassShape& s = spec.shapes[k];
    const std::uint32_t label = static_cast<std::uint32_t>(k + 1);
    const bool is_rare = oi + 1 == order.size() && order.size() > 1;
    const bool pin = spec.rare_on_largest && is_rare;

    const double area = rng.uniform(s.min_area, s.max_area) * pixels;
    const double aspect = rng.uniform(s.min_aspect, s.max_aspect);
    double hw, hh;  // half extents
    if (s.primitive == Primitive::kEllipse) {
      hw = std::sqrt(area * aspect / kPi);
      hh = hw / aspect;
    } else {
      hw = 0.5 * std::sqrt(area * aspect);
      hh = area / (4.0 * hw);
    }
    Placed p;
    p.hh = hh;
    p.hw = hw;
    p.ci = place_coord(rng, hh, H, pin, largest.ci, largest.hh);
    p.cj = place_coord(rng, hw, W, pin, largest.cj, largest.hw);
    if (oi == 0) largest = p;

    const int i0 = std::max(0, static_cast<int>(std::floor(p.ci - hh)));
    const int i1 = std::min(H - 1, static_cast<int>(std::ceil(p.ci + hh)));
    const int j0 = std::max(0, static_cast<int>(std::floor(p.cj - hw)));
    const int j1 = std::min(W - 1, static_cast<int>(std::ceil(p.cj + hw)));
    for (int i = i0; i <= i1; ++i) {
      for (int j = j0; j <= j1; ++j) {
        const double di = (i - p.ci) / hh, dj = (j - p.cj) / hw;
        const bool inside = s.primitive == Primitive::kEllipse
                                ? di * di + dj * dj <= 1.0
                                : std::abs(i - p.ci) <= hh &&
                                      std::abs(j - p.cj) <= hw;
        if (inside) labels.at(0, i, j) = label;
      }
    }
  }

  // One intensity pass keyed by the finished label map.
  std::vector<double> means(static_cast<std::size_t>(spec.num_classes()));
  means[0] = spec.background_mean;
  for (std::size_t k = 0; k < spec.shapes.size(); ++k)
    means[k + 1] = spec.shapes[k].mean;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const double m = means[labels.at(0, i, j)];
      image.at(0, 0, i, j) =
          static_cast<float>(m + spec.noise_sigma * rng.normal(0.0, 1.0));
    }
}

Dataset generate(const SceneSpec& spec, int n_train, std::uint64_t seed,
                 int n_val, int n_test) {
  validate(spec);
  if (n_train < 1)
    throw ConfigError("need at least one training sample, got " +
                      std::to_string(n_train));
  if (n_val < 0 || n_test < 0)
    throw ConfigError("split sizes cannot be negative");

  Dataset ds;
  ds.num_classes = spec.num_classes();
  ds.seed = seed;
  ds.spec_digest =
      hex64(fnv1a64(spec.digest_text().data(), spec.digest_text().size()));
  const int total = n_train + n_val + n_test;
  ds.images.resize(static_cast<std::size_t>(total));
  ds.labels.resize(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    render_sample(spec, seed, i, ds.images[static_cast<std::size_t>(i)],
                  ds.labels[static_cast<std::size_t>(i)]);
    if (i < n_train)
      ds.train_idx.push_back(i);
    else if (i < n_train + n_val)
      ds.val_idx.push_back(i);
    else
      ds.test_idx.push_back(i);
  }
  return ds;
}

SplitView split_view(const Dataset& ds, const std::string& split) {
  const std::vector<int>* idx = nullptr;
  if (split == "train")
    idx = &ds.train_idx;
  else if (split == "val")
    idx = &ds.val_idx;
  else if (split == "test")
    idx = &ds.test_idx;
  else
    throw ConfigError("unknown split \"" + split +
                      "\" (expected train, val or test)");
  SplitView v;
  for (int i : *idx) {
    v.images.push_back(&ds.images[static_cast<std::size_t>(i)]);
    v.labels.push_back(&ds.labels[static_cast<std::size_t>(i)]);
  }
  return v;
}

namespace {

std::string img_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05d.cdft", i);
  return buf;
}

std::string lab_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "lab_%05d.cdft", i);
  return buf;
}

std::string split_of(const Dataset& ds, int i) {
  for (int t : ds.train_idx)
    if (t == i) return "train";
  for (int t : ds.val_idx)
    if (t == i) return "val";
  for (int t : ds.test_idx)
    if (t == i) return "test";
  return "none";
}

}  // namespace

void export_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  std::ostringstream manifest;
  manifest << "format = 1\n";
  manifest << "spec_digest = " << ds.spec_digest << "\n";
  manifest << "seed = " << ds.seed << "\n";
  manifest << "classes = " << ds.num_classes << "\n";
  manifest << "count = " << ds.size() << "\n";
  for (int i = 0; i < ds.size(); ++i) {
    const std::string in = img_name(i), ln = lab_name(i);
    const fs::path ip = fs::path(dir) / in, lp = fs::path(dir) / ln;
    write_tensor(ip.string(), ds.images[static_cast<std::size_t>(i)]);
    write_label_map(lp.string(), ds.labels[static_cast<std::size_t>(i)]);
    manifest << "sample = " << i << " " << split_of(ds, i) << " " << in << " "
             << hex64(fnv1a64_file(ip.string())) << " " << ln << " "
             << hex64(fnv1a64_file(lp.string())) << "\n";
  }
  std::ofstream mf(fs::path(dir) / "manifest.txt", std::ios::binary);
  if (!mf) throw IoError("cannot write manifest in " + dir);
  mf << manifest.str();
}

Dataset import_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.txt", std::ios::binary);
  if (!mf) throw IntegrityError("no manifest.txt in " + dir);

  Dataset ds;
  int count = -1;
  std::string line;
  int line_no = 0;
  while (std::getline(mf, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string key, eq;
    is >> key >> eq;
    if (eq != "=")
      throw IntegrityError("manifest line " + std::to_string(line_no) +
                           " is malformed: " + line);
    if (key == "format") {
      int v = 0;
      is >> v;
      if (v != 1)
        throw IntegrityError("unsupported manifest format " +
                             std::to_string(v));
    } else if (key == "spec_digest") {
      is >> ds.spec_digest;
    } else if (key == "seed") {
      is >> ds.seed;
    } else if (key == "classes") {
      is >> ds.num_classes;
    } else if (key == "count") {
      is >> count;
    } else if (key == "sample") {
      int i = 0;
      std::string split, in, idig, ln, ldig;
      if (!(is >> i >> split >> in >> idig >> ln >> ldig))
        throw IntegrityError("manifest line " + std::to_string(line_no) +
                             " is malformed: " + line);
      const fs::path ip = fs::path(dir) / in, lp = fs::path(dir) / ln;
      if (!fs::exists(ip))
        throw IntegrityError("sample " + std::to_string(i) +
                             ": missing image file " + in);
      if (!fs::exists(lp))
        throw IntegrityError("sample " + std::to_string(i) +
                             ": missing label file " + ln);
      if (hex64(fnv1a64_file(ip.string())) != idig)
        throw IntegrityError("sample " + std::to_string(i) + ": image file " +
                             in + " does not match its manifest digest");
      if (hex64(fnv1a64_file(lp.string())) != ldig)
        throw IntegrityError("sample " + std::to_string(i) + ": label file " +
                             ln + " does not match its manifest digest");
      ds.images.push_back(read_tensor<float>(ip.string()));
      ds.labels.push_back(read_label_map(lp.string()));
      if (split == "train")
        ds.train_idx.push_back(i);
      else if (split == "val")
        ds.val_idx.push_back(i);
      else if (split == "test")
        ds.test_idx.push_back(i);
      else
        throw IntegrityError("sample " + std::to_string(i) +
                             ": unknown split \"" + split + "\"");
    } else {
      throw IntegrityError("unknown manifest key \"" + key + "\"");
    }
  }
  if (count != ds.size())
    throw IntegrityError("manifest promises " + std::to_string(count) +
                         " samples but lists " + std::to_string(ds.size()));
  if (ds.num_classes < 2)
    throw IntegrityError("manifest lacks a usable class count");
  for (std::size_t s = 0; s < ds.labels.size(); ++s)
    for (const std::uint32_t y : ds.labels[s].data)
      if (y >= static_cast<std::uint32_t>(ds.num_classes))
        throw IntegrityError("sample " + std::to_string(s) +
                             " holds label " + std::to_string(y) +
                             " outside the declared class range");
  return ds;
}

}  // namespace cdfnet::synth
