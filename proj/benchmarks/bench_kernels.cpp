#include <benchmark/benchmark.h>

#include "mitl/kernels.hpp"
#include "mitl/rng.hpp"

using namespace mitl;

namespace {

Tensor random_tensor(int n, int c, int h, int w, uint64_t seed) {
    Tensor t(n, c, h, w);
    Rng rng(seed);
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}

// args: N, Cin, Cout, H, k, stride, pad
void bench_conv_forward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int cin = static_cast<int>(state.range(1));
    const int cout = static_cast<int>(state.range(2));
    const int h = static_cast<int>(state.range(3));
    const int k = static_cast<int>(state.range(4));
    const int stride = static_cast<int>(state.range(5));
    const int pad = static_cast<int>(state.range(6));

    Tensor x = random_tensor(n, cin, h, h, 1);
    Tensor w = random_tensor(cout, cin, k, k, 2);
    Tensor b;
    Tensor y;
    for (auto _ : state) {
        conv2d_forward(x, w, b, stride, pad, y);
        benchmark::DoNotOptimize(y.data());
    }
    const int ho = conv_out_dim(h, k, stride, pad);
    const double macs = 1.0 * n * cout * cin * k * k * ho * ho;
    state.counters["GMAC/s"] =
        benchmark::Counter(macs * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

void bench_conv_backward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int cin = static_cast<int>(state.range(1));
    const int cout = static_cast<int>(state.range(2));
    const int h = static_cast<int>(state.range(3));
    const int k = static_cast<int>(state.range(4));
    const int stride = static_cast<int>(state.range(5));
    const int pad = static_cast<int>(state.range(6));

    Tensor x = random_tensor(n, cin, h, h, 1);
    Tensor w = random_tensor(cout, cin, k, k, 2);
    const int ho = conv_out_dim(h, k, stride, pad);
    Tensor gy = random_tensor(n, cout, ho, ho, 3);
    Tensor gx, gw, gb;
    for (auto _ : state) {
        conv2d_backward(x, w, gy, stride, pad, &gx, &gw, &gb);
        benchmark::DoNotOptimize(gx.data());
    }
    const double macs = 2.0 * n * cout * cin * k * k * ho * ho; // gx + gw passes
    state.counters["GMAC/s"] =
        benchmark::Counter(macs * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

void bench_bn_forward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int c = static_cast<int>(state.range(1));
    const int h = static_cast<int>(state.range(2));
    Tensor x = random_tensor(n, c, h, h, 1);
    Tensor gamma(c, 1, 1, 1), beta(c, 1, 1, 1), rm(c, 1, 1, 1), rv(c, 1, 1, 1);
    gamma.fill(1.0f);
    rv.fill(1.0f);
    Tensor y;
    BatchNormCache<float> cache;
    for (auto _ : state) {
        bn_forward_train(x, gamma, beta, rm, rv, 0.1, 1e-5, y, cache);
        benchmark::DoNotOptimize(y.data());
    }
    state.counters["Gelem/s"] = benchmark::Counter(
        static_cast<double>(x.size()) * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

} // namespace

// Shapes drawn from the default network at 64x64 input.
BENCHMARK(bench_conv_forward)->Args({1, 3, 16, 64, 3, 1, 1})->Name("conv_fwd/stem_3x16x64");
BENCHMARK(bench_conv_forward)->Args({1, 16, 16, 64, 3, 1, 1})->Name("conv_fwd/stage0_16x16x64");
BENCHMARK(bench_conv_forward)->Args({1, 64, 128, 8, 3, 1, 1})->Name("conv_fwd/stage3_64x128x8");
BENCHMARK(bench_conv_forward)->Args({1, 192, 64, 16, 3, 1, 1})->Name("conv_fwd/dec1_192x64x16");
BENCHMARK(bench_conv_forward)->Args({1, 48, 16, 64, 3, 1, 1})->Name("conv_fwd/dec3_48x16x64");
BENCHMARK(bench_conv_forward)->Args({1, 16, 32, 64, 3, 2, 1})->Name("conv_fwd/down_16x32x64s2");
BENCHMARK(bench_conv_forward)->Args({24, 16, 16, 64, 3, 1, 1})->Name("conv_fwd/batch24_stage0");
BENCHMARK(bench_conv_backward)->Args({1, 16, 16, 64, 3, 1, 1})->Name("conv_bwd/stage0_16x16x64");
BENCHMARK(bench_conv_backward)->Args({1, 192, 64, 16, 3, 1, 1})->Name("conv_bwd/dec1_192x64x16");
BENCHMARK(bench_conv_backward)->Args({1, 16, 32, 64, 3, 2, 1})->Name("conv_bwd/down_16x32x64s2");
BENCHMARK(bench_bn_forward)->Args({24, 16, 64})->Name("bn_fwd/batch24_16x64");

BENCHMARK_MAIN();
