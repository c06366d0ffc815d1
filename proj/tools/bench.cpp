// Times the production kernels against the serial references on a few
// realistic shapes and reports the speedup plus the largest result
// difference, so kernel changes stay honest on both counts.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cdfnet/layers.hpp"
#include "cdfnet/network.hpp"
#include "cdfnet/tensor.hpp"
#include "ref/serial_kernels.hpp"

using namespace cdfnet;

namespace {

double now() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Repeats f until ~0.3 s passes, returns seconds per call.
double time_call(const std::function<void()>& f) {
  f();  // warm up
  int reps = 1;
  for (;;) {
    const double t0 = now();
    for (int i = 0; i < reps; ++i) f();
    const double dt = now() - t0;
    if (dt > 0.3) return dt / reps;
    reps = dt < 0.01 ? reps * 10 : reps * 2;
  }
}

double max_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs((double)a.data[i] - (double)b.data[i]));
  return m;
}

void report(const char* name, double serial_s, double parallel_s,
            double diff) {
  std::printf("%-24s %10.3f ms %10.3f ms %7.2fx   max|diff| %.3g\n", name,
              serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s, diff);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP; both columns are serial\n");
#endif
  std::printf("%-24s %13s %13s %9s\n", "kernel", "serial", "parallel",
              "speedup");

  Rng rng(7);

  {  // 3x3 convolution at an encoder-ish shape
    Tensor<float> x(Shape(4, 16, 64, 64));
    rng.fill_uniform(x, -1.0, 1.0);
    Conv2dParams<float> p = Conv2dParams<float>::make(16, 16, 3);
    rng.fill_uniform(p.weight.value, -0.2, 0.2);
    rng.fill_uniform(p.bias.value, -0.2, 0.2);
    std::vector<float> bias(p.bias.value.data);
    Tensor<float> ys, yp;
    const double ts =
        time_call([&] { ys = serial::conv2d_reference(x, p.weight.value, bias); });
    const double tp = time_call([&] { yp = conv2d_forward(x, p); });
    report("conv2d 3x3 16->16", ts, tp, max_diff(ys, yp));
  }

  {  // batch normalization, train mode
    Tensor<float> x(Shape(4, 16, 64, 64));
    rng.fill_uniform(x, -2.0, 2.0);
    BatchNormParams<float> p = BatchNormParams<float>::make(16);
    std::vector<float> gamma(p.gamma.value.data), beta(p.beta.value.data);
    Tensor<float> ys, yp;
    const double ts = time_call(
        [&] { ys = serial::batchnorm_reference(x, gamma, beta, p.epsilon); });
    BatchNormParams<float> scratch = BatchNormParams<float>::make(16);
    const double tp = time_call(
        [&] { yp = batchnorm_forward(x, scratch, Mode::kTrain); });
    report("batchnorm train", ts, tp, max_diff(ys, yp));
  }

  {  // 2x2 max pooling
    Tensor<float> x(Shape(4, 16, 64, 64));
    rng.fill_uniform(x, -1.0, 1.0);
    Tensor<float> ys, yp;
    std::vector<std::uint32_t> off;
    const double ts =
        time_call([&] { serial::maxpool2x2_reference(x, ys, off); });
    PoolIndices idx;
    const double tp = time_call([&] {
      auto r = maxpool2x2_forward(x);
      yp = std::move(r.first);
      idx = std::move(r.second);
    });
    report("maxpool 2x2", ts, tp, max_diff(ys, yp));
  }

  {  // elementwise max over three inputs
    Tensor<float> a(Shape(4, 16, 64, 64)), b(a.shape), c(a.shape);
    rng.fill_uniform(a, -1.0, 1.0);
    rng.fill_uniform(b, -1.0, 1.0);
    rng.fill_uniform(c, -1.0, 1.0);
    std::vector<const Tensor<float>*> inputs = {&a, &b, &c};
    Tensor<float> ys;
    std::vector<std::uint8_t> win;
    const double ts =
        time_call([&] { serial::max_reference(inputs, ys, win); });
    Tensor<float> yp;
    const double tp = time_call([&] {
      auto r = elementwise_max(inputs);
      yp = std::move(r.first);
    });
    report("elementwise max (3)", ts, tp, max_diff(ys, yp));
  }

  {  // whole-model forward, the shape training actually runs
    Model<float> m =
        Model<float>::build(VariantSpec::parse("cdfnet"), 1, 5, 8, 1);
    Tensor<float> x(Shape(4, 1, 64, 64));
    rng.fill_uniform(x, 0.0, 1.0);
    Tensor<float> y;
    const double tf =
        time_call([&] { y = m.forward(x, Mode::kEval); });
    std::printf("%-24s %27.3f ms  (batch of 4 at 64x64, width 8)\n",
                "cdfnet forward eval", tf * 1e3);
  }
  return 0;
}
