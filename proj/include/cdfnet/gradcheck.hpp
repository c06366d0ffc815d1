#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cdfnet/layers.hpp"
#include "cdfnet/tensor.hpp"

namespace cdfnet::gradcheck {

/// One tensor whose hand-written gradient is under test. `grad` is where
/// the backward pass deposits it; both pointers must stay valid for the
/// duration of the check.
struct CheckedTensor {
  std::string name;
  Tensor<double>* value = nullptr;
  Tensor<double>* grad = nullptr;
};

struct CheckOptions {
  double tolerance = 1e-5;      // layer and block units
  double net_tolerance = 1e-4;  // whole-network units (longer chains)
  double step = 1e-5;           // central-difference half-width
  std::size_t max_per_tensor = 0;  // 0 checks every element
  std::uint64_t seed = 0x5eedULL;  // element subsampling when capped
};

struct TensorVerdict {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // probe crossed a routing boundary
  std::size_t refined = 0;   // re-measured at step/10 (see below)
  bool pass = true;
};

struct CheckResult {
  std::string unit;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::size_t refined = 0;
  bool pass = true;
  std::vector<TensorVerdict> tensors;

  std::string summary() const;           // one line
  std::vector<std::string> failing() const;  // names of failing tensors
};

/// Recomputes the scalar objective from the tensors' current values. When
/// the hash is non-null, every data-dependent routing decision (relu sign,
/// max winner, pool offset) must be folded into it; null means the caller
/// only needs the value.
using EvalFn = std::function<double(RoutingHash*)>;

/// Zeroes the relevant grads, runs the forward at current values, and
/// fills the grads of every checked tensor.
using BackwardFn = std::function<void()>;

/// Central-difference comparison of analytic gradients. An element whose
/// +/-step probes change any routing decision sits on a non-differentiable
/// boundary and is excluded rather than judged. An element that fails while
/// the routing stays fixed is re-measured at step/10 before the verdict:
/// the h^2 truncation term can dominate in high-curvature regions (a
/// batchnorm channel running close to degenerate variance), and shrinking
/// the step collapses truncation error while a wrong gradient stays wrong.
CheckResult check_gradients(const std::string& unit,
                            const std::vector<CheckedTensor>& tensors,
                            const EvalFn& eval, const BackwardFn& backward,
                            const CheckOptions& opts = {});

/// Named check units: "layer:<op>", "block:<kind>", "net:<variant>", or
/// the groups "layers", "blocks", "nets", "all". Unknown names throw
/// ConfigError. `width` sets the feature width of net-level units.
std::vector<std::string> unit_names();
std::vector<CheckResult> run_units(const std::string& name, int width,
                                   std::uint64_t seed,
                                   const CheckOptions& opts = {});

}  // namespace cdfnet::gradcheck
