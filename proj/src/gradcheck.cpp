#include "cdfnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <utility>

#include "cdfnet/blocks.hpp"
#include "cdfnet/errors.hpp"
#include "cdfnet/loss.hpp"
#include "cdfnet/network.hpp"

namespace cdfnet::gradcheck {

std::string CheckResult::summary() const {
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "%-24s %s  max rel err %.3e  (%zu checked, %zu excluded",
                unit.c_str(), pass ? "ok  " : "FAIL", max_rel_err, checked,
                excluded);
  std::string out = buf;
  if (refined > 0) {
    std::snprintf(buf, sizeof(buf), ", %zu step-refined", refined);
    out += buf;
  }
  return out + ")";
}

std::vector<std::string> CheckResult::failing() const {
  std::vector<std::string> out;
  for (const auto& t : tensors)
    if (!t.pass) out.push_back(t.name);
  return out;
}

CheckResult check_gradients(const std::string& unit,
                            const std::vector<CheckedTensor>& tensors,
                            const EvalFn& eval, const BackwardFn& backward,
                            const CheckOptions& opts) {
  CheckResult res;
  res.unit = unit;

  backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(tensors.size());
  for (const auto& t : tensors) analytic.push_back(t.grad->data);

  RoutingHash base;
  eval(&base);

  const double h = opts.step;
  Rng pick(opts.seed);
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    const auto& ct = tensors[ti];
    TensorVerdict v;
    v.name = ct.name;
    const std::size_t n = ct.value->data.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (opts.max_per_tensor > 0 && n > opts.max_per_tensor) {
      pick.shuffle(order);
      order.resize(opts.max_per_tensor);
    }
    for (std::size_t i : order) {
      double* slot = &ct.value->data[i];
      const double saved = *slot;
      *slot = saved + h;
      const double fp = eval(nullptr);
      *slot = saved - h;
      const double fm = eval(nullptr);
      *slot = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[ti][i];
      double rel =
          std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      if (rel > opts.tolerance) {
        // Probe again watching the discrete routing. If either nudge flips
        // a decision the objective has a kink inside the probe window and
        // the difference quotient is meaningless there.
        RoutingHash hp, hm;
        *slot = saved + h;
        eval(&hp);
        *slot = saved - h;
        eval(&hm);
        *slot = saved;
        if (hp.state != base.state || hm.state != base.state) {
          ++v.excluded;
          continue;
        }
        // Smooth in the window yet off by more than the tolerance: the
        // quotient itself may be the problem. Truncation error grows as
        // h^2 times the third derivative, which gets large where a
        // batchnorm channel runs near-degenerate variance. Re-measure
        // with a tenth of the step; truncation drops a hundredfold while
        // a genuinely wrong gradient keeps its error at any step.
        RoutingHash hp2, hm2;
        const double h2 = h / 10.0;
        *slot = saved + h2;
        const double fp2 = eval(&hp2);
        *slot = saved - h2;
        const double fm2 = eval(&hm2);
        *slot = saved;
        if (hp2.state != base.state || hm2.state != base.state) {
          ++v.excluded;
          continue;
        }
        const double fd2 = (fp2 - fm2) / (2.0 * h2);
        rel = std::abs(a - fd2) /
              std::max({1.0, std::abs(a), std::abs(fd2)});
        ++v.refined;
      }
      ++v.checked;
      if (rel > v.max_rel_err) v.max_rel_err = rel;
      if (rel > opts.tolerance) v.pass = false;
    }
    res.checked += v.checked;
    res.excluded += v.excluded;
    res.refined += v.refined;
    res.max_rel_err = std::max(res.max_rel_err, v.max_rel_err);
    if (!v.pass) res.pass = false;
    res.tensors.push_back(std::move(v));
  }
  return res;
}

namespace {

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

void zero(Tensor<double>& t) { std::fill(t.data.begin(), t.data.end(), 0.0); }

Tensor<double> randu(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  rng.fill_uniform(t, lo, hi);
  return t;
}

void fill_composite(CompositeParams<double>& p, Rng& rng) {
  rng.fill_uniform(p.conv.weight.value, -0.5, 0.5);
  rng.fill_uniform(p.conv.bias.value, -0.2, 0.2);
  rng.fill_uniform(p.bn.gamma.value, 0.5, 1.5);
  rng.fill_uniform(p.bn.beta.value, -0.2, 0.2);
}

void zero_composite(CompositeParams<double>& p) {
  zero(p.conv.weight.grad);
  zero(p.conv.bias.grad);
  zero(p.bn.gamma.grad);
  zero(p.bn.beta.grad);
}

void add_composite(std::vector<CheckedTensor>& v, const std::string& prefix,
                   CompositeParams<double>& p) {
  v.push_back({prefix + ".conv.weight", &p.conv.weight.value,
               &p.conv.weight.grad});
  v.push_back({prefix + ".conv.bias", &p.conv.bias.value, &p.conv.bias.grad});
  v.push_back({prefix + ".bn.gamma", &p.bn.gamma.value, &p.bn.gamma.grad});
  v.push_back({prefix + ".bn.beta", &p.bn.beta.value, &p.bn.beta.grad});
}

void hash_block(RoutingHash* h, const DenseBlockParams<double>& p,
                const DenseBlockCache<double>& cache) {
  if (!h) return;
  h->add_sign_mask(cache.c1.pre_act);
  if (p.kind == BlockKind::kCompetitive) h->add_argindex(cache.m1);
  h->add_sign_mask(cache.c2.pre_act);
  if (p.kind == BlockKind::kCompetitive) h->add_argindex(cache.m2);
  h->add_sign_mask(cache.c3.pre_act);
}

CheckResult unit_conv(std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, 11));
  Tensor<double> x = randu(Shape(2, 3, 5, 5), rng);
  auto p = Conv2dParams<double>::make(3, 4, 3);
  rng.fill_uniform(p.weight.value, -0.5, 0.5);
  rng.fill_uniform(p.bias.value, -0.2, 0.2);
  Tensor<double> co = randu(Shape(2, 4, 5, 5), rng);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash*) { return dot(conv2d_forward(x, p), co); };
  auto backward = [&]() {
    zero(p.weight.grad);
    zero(p.bias.grad);
    gx = conv2d_backward(x, p, co);
  };
  return check_gradients("layer:conv",
                         {{"x", &x, &gx},
                          {"weight", &p.weight.value, &p.weight.grad},
                          {"bias", &p.bias.value, &p.bias.grad}},
                         eval, backward, opts);
}

CheckResult unit_bn(std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, 12));
  Tensor<double> x = randu(Shape(2, 3, 4, 4), rng);
  auto p = BatchNormParams<double>::make(3);
  rng.fill_uniform(p.gamma.value, 0.5, 1.5);
  rng.fill_uniform(p.beta.value, -0.5, 0.5);
  Tensor<double> co = randu(x.shape, rng);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash*) {
    return dot(batchnorm_forward(x, p, Mode::kTrain), co);
  };
  auto backward = [&]() {
    zero(p.gamma.grad);
    zero(p.beta.grad);
    BatchNormCache<double> cache;
    batchnorm_forward(x, p, Mode::kTrain, &cache);
    gx = batchnorm_backward(p, cache, co);
  };
  return check_gradients("layer:bn",
                         {{"x", &x, &gx},
                          {"gamma", &p.gamma.value, &p.gamma.grad},
                          {"beta", &p.beta.value, &p.beta.grad}},
                         eval, backward, opts);
}

CheckResult unit_relu(std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, 13));
  Tensor<double> x = randu(Shape(2, 3, 6, 6), rng);
  Tensor<double> co = randu(x.shape, rng);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash* h) {
    auto y = relu_forward(x);
    if (h) h->add_sign_mask(x);
    return dot(y, co);
  };
  auto backward = [&]() { gx = relu_backward(x, co); };
  return check_gradients("layer:relu", {{"x", &x, &gx}}, eval, backward, opts);
}

CheckResult unit_maxout(std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, 14));
  const Shape s(2, 3, 4, 4);
  Tensor<double> a = randu(s, rng), b = randu(s, rng), c = randu(s, rng);
  Tensor<double> co = randu(s, rng);
  Tensor<double> ga = Tensor<double>::zeros(s), gb = ga, gc = ga;
  auto eval = [&](RoutingHash* h) {
    auto [y, arg] = maxout_forward<double>({&a, &b, &c});
    if (h) h->add_argindex(arg);
    return dot(y, co);
  };
  auto backward = [&]() {
    auto [y, arg] = maxout_forward<double>({&a, &b, &c});
    (void)y;
    auto gs = maxout_backward(arg, co, 3);
    ga = gs[0];
    gb = gs[1];
    gc = gs[2];
  };
  return check_gradients(
      "layer:maxout", {{"a", &a, &ga}, {"b", &b, &gb}, {"c", &c, &gc}}, eval,
      backward, opts);
}

CheckResult unit_pool(std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, 15));
  Tensor<double> x = randu(Shape(2, 2, 6, 6), rng);
  Tensor<double> co = randu(Shape(2, 2, 3, 3), rng);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash* h) {
    auto [y, idx] = maxpool2x2_forward(x);
    if (h) h->add_pool(idx);
    return dot(y, co);
  };
  auto backward = [&]() {
    auto [y, idx] = maxpool2x2_forward(x);
    (void)y;
    gx = maxpool2x2_backward(idx, co);
  };
  return check_gradients("layer:pool", {{"x", &x, &gx}}, eval, backward, opts);
}

CheckResult unit_unpool(std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, 16));
  // Routing comes from an auxiliary plane that is not under test, so the
  // scatter pattern is constant and only the values carry gradient.
  Tensor<double> aux = randu(Shape(2, 2, 6, 6), rng);
  auto pooled = maxpool2x2_forward(aux);
  const PoolIndices& idx = pooled.second;
  Tensor<double> x = randu(Shape(2, 2, 3, 3), rng);
  Tensor<double> co = randu(Shape(2, 2, 6, 6), rng);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash*) { return dot(max_unpool2x2(x, idx), co); };
  auto backward = [&]() { gx = max_unpool2x2_backward(idx, co); };
  return check_gradients("layer:unpool", {{"x", &x, &gx}}, eval, backward,
                         opts);
}

CheckResult unit_softmax(std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, 17));
  Tensor<double> x = randu(Shape(2, 4, 3, 3), rng, -2.0, 2.0);
  Tensor<double> co = randu(x.shape, rng);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash*) { return dot(softmax_channels(x), co); };
  auto backward = [&]() {
    auto probs = softmax_channels(x);
    gx = softmax_backward(probs, co);
  };
  return check_gradients("layer:softmax", {{"x", &x, &gx}}, eval, backward,
                         opts);
}

CheckResult unit_composite(std::uint64_t seed, const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, 18));
  Tensor<double> x = randu(Shape(2, 3, 6, 6), rng);
  auto p = CompositeParams<double>::make(3, 4, 3);
  fill_composite(p, rng);
  Tensor<double> co = randu(Shape(2, 4, 6, 6), rng);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash* h) {
    CompositeCache<double> cache;
    auto y = composite_forward(x, p, Mode::kTrain, &cache);
    if (h) h->add_sign_mask(cache.pre_act);
    return dot(y, co);
  };
  auto backward = [&]() {
    zero_composite(p);
    CompositeCache<double> cache;
    composite_forward(x, p, Mode::kTrain, &cache);
    gx = composite_backward(p, cache, co);
  };
  std::vector<CheckedTensor> tensors{{"x", &x, &gx}};
  add_composite(tensors, "h", p);
  return check_gradients("layer:composite", tensors, eval, backward, opts);
}

CheckResult unit_block(BlockKind kind, std::uint64_t seed,
                       const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, kind == BlockKind::kCompetitive ? 21 : 22));
  const int c_in = 3, c_out = 4, growth = 2;
  auto p = DenseBlockParams<double>::make(kind, c_in, c_out, growth);
  fill_composite(p.h1, rng);
  fill_composite(p.h2, rng);
  fill_composite(p.h3, rng);
  Tensor<double> x = randu(Shape(2, c_in, 6, 6), rng);
  Tensor<double> co = randu(Shape(2, c_out, 6, 6), rng);
  Tensor<double> gx = Tensor<double>::zeros(x.shape);
  auto eval = [&](RoutingHash* h) {
    DenseBlockCache<double> cache;
    auto y = dense_block_forward(x, p, Mode::kTrain, &cache);
    hash_block(h, p, cache);
    return dot(y, co);
  };
  auto backward = [&]() {
    zero_composite(p.h1);
    zero_composite(p.h2);
    zero_composite(p.h3);
    DenseBlockCache<double> cache;
    dense_block_forward(x, p, Mode::kTrain, &cache);
    gx = dense_block_backward(p, cache, co);
  };
  std::vector<CheckedTensor> tensors{{"x", &x, &gx}};
  add_composite(tensors, "h1", p.h1);
  add_composite(tensors, "h2", p.h2);
  add_composite(tensors, "h3", p.h3);
  const char* name = kind == BlockKind::kCompetitive ? "block:competitive"
                                                     : "block:vanilla";
  return check_gradients(name, tensors, eval, backward, opts);
}

CheckResult unit_join(bool competitive, std::uint64_t seed,
                      const CheckOptions& opts) {
  Rng rng(Rng::derive(seed, competitive ? 23 : 24));
  const int c_dec = 2, c_skip = 3;
  Tensor<double> aux = randu(Shape(1, c_dec, 8, 8), rng);
  auto pooled = maxpool2x2_forward(aux);
  const PoolIndices& idx = pooled.second;
  Tensor<double> decoded = randu(Shape(1, c_dec, 4, 4), rng);
  Tensor<double> skip = randu(Shape(1, c_skip, 8, 8), rng);
  Tensor<double> gd = Tensor<double>::zeros(decoded.shape);
  Tensor<double> gs = Tensor<double>::zeros(skip.shape);
  std::vector<CheckedTensor> tensors{{"decoded", &decoded, &gd},
                                     {"skip", &skip, &gs}};
  if (competitive) {
    auto p = CubParams<double>::make(c_dec, c_skip);
    rng.fill_uniform(p.joint.weight.value, -0.5, 0.5);
    rng.fill_uniform(p.joint.bias.value, -0.2, 0.2);
    Tensor<double> co = randu(Shape(1, c_skip, 8, 8), rng);
    auto eval = [&](RoutingHash* h) {
      CubCache<double> cache;
      auto y = cub_forward(decoded, idx, skip, p, &cache);
      if (h) h->add_argindex(cache.m);
      return dot(y, co);
    };
    auto backward = [&]() {
      zero(p.joint.weight.grad);
      zero(p.joint.bias.grad);
      CubCache<double> cache;
      cub_forward(decoded, idx, skip, p, &cache);
      auto g = cub_backward(p, cache, co);
      gd = std::move(g.first);
      gs = std::move(g.second);
    };
    tensors.push_back(
        {"joint.weight", &p.joint.weight.value, &p.joint.weight.grad});
    tensors.push_back({"joint.bias", &p.joint.bias.value, &p.joint.bias.grad});
    return check_gradients("block:join-competitive", tensors, eval, backward,
                           opts);
  }
  Tensor<double> co = randu(Shape(1, c_dec + c_skip, 8, 8), rng);
  auto eval = [&](RoutingHash*) {
    return dot(unpool_concat_forward(decoded, idx, skip), co);
  };
  auto backward = [&]() {
    auto g = unpool_concat_backward(idx, c_dec, c_skip, co);
    gd = std::move(g.first);
    gs = std::move(g.second);
  };
  return check_gradients("block:join-concat", tensors, eval, backward, opts);
}

CheckResult unit_net(const std::string& vname, int width, std::uint64_t seed,
                     CheckOptions opts) {
  opts.tolerance = opts.net_tolerance;
  auto spec = VariantSpec::parse(vname);
  auto model = Model<double>::build(spec, 1, 2, width, Rng::derive(seed, 31));
  Rng rng(Rng::derive(seed, 32));
  Tensor<double> x = randu(Shape(1, 1, 16, 16), rng, 0.0, 1.0);
  LabelMap labels(1, 16, 16);
  for (auto& l : labels.data)
    l = static_cast<std::uint32_t>(rng.uniform_int(2));
  const std::vector<double> wts{1.0, 1.0};
  Tensor<double> gx = Tensor<double>::zeros(x.shape);

  ParamStore<double> store;
  model.collect(store);

  auto eval = [&](RoutingHash* h) {
    ModelCache<double> cache;
    auto logits = model.forward(x, Mode::kTrain, &cache);
    if (h) {
      const std::uint64_t d = routing_digest(model, cache);
      h->add_u32(static_cast<std::uint32_t>(d));
      h->add_u32(static_cast<std::uint32_t>(d >> 32));
    }
    return composite_loss(logits, labels, wts).total;
  };
  auto backward = [&]() {
    model.zero_grads();
    ModelCache<double> cache;
    auto logits = model.forward(x, Mode::kTrain, &cache);
    Tensor<double> gl(logits.shape);
    composite_loss(logits, labels, wts, &gl);
    gx = model.backward(cache, gl);
  };

  std::vector<CheckedTensor> tensors{{"input", &x, &gx}};
  for (const auto& r : store.refs())
    if (r.grad != nullptr) tensors.push_back({r.name, r.value, r.grad});
  return check_gradients("net:" + spec.name, tensors, eval, backward, opts);
}

using UnitFn =
    CheckResult (*)(int width, std::uint64_t seed, const CheckOptions& opts);

struct UnitEntry {
  const char* name;
  UnitFn fn;
};

const UnitEntry kUnits[] = {
    {"layer:conv",
     [](int, std::uint64_t s, const CheckOptions& o) { return unit_conv(s, o); }},
    {"layer:bn",
     [](int, std::uint64_t s, const CheckOptions& o) { return unit_bn(s, o); }},
    {"layer:relu",
     [](int, std::uint64_t s, const CheckOptions& o) { return unit_relu(s, o); }},
    {"layer:maxout",
     [](int, std::uint64_t s, const CheckOptions& o) {
       return unit_maxout(s, o);
     }},
    {"layer:pool",
     [](int, std::uint64_t s, const CheckOptions& o) { return unit_pool(s, o); }},
    {"layer:unpool",
     [](int, std::uint64_t s, const CheckOptions& o) {
       return unit_unpool(s, o);
     }},
    {"layer:softmax",
     [](int, std::uint64_t s, const CheckOptions& o) {
       return unit_softmax(s, o);
     }},
    {"layer:composite",
     [](int, std::uint64_t s, const CheckOptions& o) {
       return unit_composite(s, o);
     }},
    {"block:competitive",
     [](int, std::uint64_t s, const CheckOptions& o) {
       return unit_block(BlockKind::kCompetitive, s, o);
     }},
    {"block:vanilla",
     [](int, std::uint64_t s, const CheckOptions& o) {
       return unit_block(BlockKind::kVanilla, s, o);
     }},
    {"block:join-competitive",
     [](int, std::uint64_t s, const CheckOptions& o) {
       return unit_join(true, s, o);
     }},
    {"block:join-concat",
     [](int, std::uint64_t s, const CheckOptions& o) {
       return unit_join(false, s, o);
     }},
    {"net:bl0",
     [](int w, std::uint64_t s, const CheckOptions& o) {
       return unit_net("bl0", w, s, o);
     }},
    {"net:bl1",
     [](int w, std::uint64_t s, const CheckOptions& o) {
       return unit_net("bl1", w, s, o);
     }},
    {"net:bl2",
     [](int w, std::uint64_t s, const CheckOptions& o) {
       return unit_net("bl2", w, s, o);
     }},
    {"net:cdfnet",
     [](int w, std::uint64_t s, const CheckOptions& o) {
       return unit_net("cdfnet", w, s, o);
     }},
};

}  // namespace

std::vector<std::string> unit_names() {
  std::vector<std::string> out;
  for (const auto& u : kUnits) out.emplace_back(u.name);
  out.insert(out.end(), {"layers", "blocks", "nets", "all"});
  return out;
}

std::vector<CheckResult> run_units(const std::string& name, int width,
                                   std::uint64_t seed,
                                   const CheckOptions& opts) {
  std::vector<CheckResult> out;
  auto run_prefix = [&](const char* prefix) {
    for (const auto& u : kUnits)
      if (std::string(u.name).rfind(prefix, 0) == 0)
        out.push_back(u.fn(width, seed, opts));
  };
  if (name == "all") {
    run_prefix("layer:");
    run_prefix("block:");
    run_prefix("net:");
  } else if (name == "layers") {
    run_prefix("layer:");
  } else if (name == "blocks") {
    run_prefix("block:");
  } else if (name == "nets") {
    run_prefix("net:");
  } else {
    for (const auto& u : kUnits) {
      if (name == u.name) {
        out.push_back(u.fn(width, seed, opts));
        return out;
      }
    }
    std::string known;
    for (const auto& n : unit_names()) known += n + " ";
    throw ConfigError("unknown gradcheck unit '" + name + "'; known units: " +
                      known);
  }
  return out;
}

}  // namespace cdfnet::gradcheck
