#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cdfnet/errors.hpp"
#include "cdfnet/gradcheck.hpp"
#include "cdfnet/layers.hpp"
#include "cdfnet/tensor.hpp"

using namespace cdfnet;
using namespace cdfnet::gradcheck;

namespace {

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

}  // namespace

TEST_CASE("a broken backward pass is flagged, not excused") {
  Rng rng(5);
  Tensor<double> x(Shape(2, 3, 3, 2));
  rng.fill_uniform(x, 0.5, 1.5);  // well away from the relu boundary
  Tensor<double> co(x.shape);
  rng.fill_uniform(co, -1.0, 1.0);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);

  auto eval = [&](RoutingHash* h) {
    if (h) h->add_sign_mask(x);
    return dot(relu_forward(x), co);
  };
  auto backward = [&]() {
    gx = relu_backward(x, co);
    for (auto& g : gx.data) g *= 1.01;  // deliberately 1% off
  };
  const CheckResult r =
      check_gradients("broken", {{"x", &x, &gx}}, eval, backward);
  CHECK(!r.pass);
  CHECK(r.max_rel_err > 1e-3);
  REQUIRE(r.failing().size() == 1);
  CHECK(r.failing()[0] == "x");
  CHECK(r.excluded == 0);
}

TEST_CASE("an element probed across a kink is excluded, not judged") {
  Tensor<double> x(Shape{1, 1, 2, 2}, {0.5, 1e-6, -0.3, 0.8});
  Tensor<double> co = Tensor<double>::full(x.shape, 1.0);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash* h) {
    if (h) h->add_sign_mask(x);
    return dot(relu_forward(x), co);
  };
  auto backward = [&]() { gx = relu_backward(x, co); };
  const CheckResult r =
      check_gradients("kink", {{"x", &x, &gx}}, eval, backward);
  CHECK(r.pass);
  CHECK(r.excluded == 1);
  CHECK(r.checked == 3);
}

TEST_CASE("a genuinely wrong gradient at a smooth point is not excluded") {
  // Same routing-sensitive objective, but the bug sits at a point whose
  // probes stay on one side of the kink: the excluder must not save it.
  Tensor<double> x(Shape{1, 1, 1, 2}, {0.4, 0.9});
  Tensor<double> co = Tensor<double>::full(x.shape, 1.0);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash* h) {
    if (h) h->add_sign_mask(x);
    return dot(relu_forward(x), co);
  };
  auto backward = [&]() {
    gx = relu_backward(x, co);
    gx.data[0] += 0.5;
  };
  const CheckResult r =
      check_gradients("smooth-bug", {{"x", &x, &gx}}, eval, backward);
  CHECK(!r.pass);
  CHECK(r.excluded == 0);
}

TEST_CASE("element cap limits the work per tensor") {
  Rng rng(9);
  Tensor<double> x(Shape(2, 4, 8, 8));
  rng.fill_uniform(x, 0.5, 1.5);
  Tensor<double> co(x.shape);
  rng.fill_uniform(co, -1.0, 1.0);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash*) { return dot(x, co); };
  auto backward = [&]() { gx = co; };
  CheckOptions opts;
  opts.max_per_tensor = 7;
  const CheckResult r =
      check_gradients("capped", {{"x", &x, &gx}}, eval, backward, opts);
  CHECK(r.pass);
  CHECK(r.checked == 7);
}

TEST_CASE("every primitive layer passes its derivative check") {
  for (const auto& r : run_units("layers", 2, 1234)) {
    INFO(r.summary());
    CHECK(r.pass);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_err < 1e-5);
  }
}

TEST_CASE("every block flavor passes its derivative check") {
  for (const auto& r : run_units("blocks", 2, 1234)) {
    INFO(r.summary());
    CHECK(r.pass);
    CHECK(r.checked > 0);
  }
}

TEST_CASE("single named unit runs alone and passes") {
  const auto rs = run_units("layer:maxout", 2, 7);
  REQUIRE(rs.size() == 1);
  CHECK(rs[0].unit == "layer:maxout");
  CHECK(rs[0].pass);
}

TEST_CASE("a full network's assembled backward pass survives the check") {
  const auto rs = run_units("net:cdfnet", 2, 99);
  REQUIRE(rs.size() == 1);
  INFO(rs[0].summary());
  CHECK(rs[0].pass);
  CHECK(rs[0].max_rel_err < 1e-4);
  // input plus every learnable parameter was visited
  CHECK(rs[0].tensors.size() > 40);
  bool saw_input = false;
  for (const auto& t : rs[0].tensors) saw_input |= t.name == "input";
  CHECK(saw_input);
}

TEST_CASE("unknown unit names are rejected with the known list") {
  CHECK_THROWS_AS(run_units("layer:sigmoid", 2, 1), ConfigError);
  CHECK_THROWS_WITH_AS(run_units("everything", 2, 1),
                       doctest::Contains("layer:maxout"), ConfigError);
  const auto names = unit_names();
  CHECK(std::find(names.begin(), names.end(), "net:bl2") != names.end());
  CHECK(std::find(names.begin(), names.end(), "all") != names.end());
}
