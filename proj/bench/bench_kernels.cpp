#include <omp.h>

#include <benchmark/benchmark.h>

#include "motionmask/kernels.hpp"
#include "motionmask/rng.hpp"

using namespace motionmask;

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t(rows, cols);
    for (double& v : t.flat()) {
        v = rng.normal();
    }
    return t;
}

using Binary = Tensor (*)(const Tensor&, const Tensor&);
using Unary = Tensor (*)(const Tensor&);

// Square operands of side n, so every product is n^3 multiply-adds.
void run_binary(benchmark::State& state, Binary kernel) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Tensor a = random_tensor(n, n, 1);
    const Tensor b = random_tensor(n, n, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(kernel(a, b));
    }
    state.counters["threads"] = omp_get_max_threads();
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

// Codebook search shape: n latents against 64 entries of width 32.
void run_distances(benchmark::State& state, Binary kernel) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Tensor x = random_tensor(n, 32, 3);
    const Tensor c = random_tensor(64, 32, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(kernel(x, c));
    }
    state.counters["threads"] = omp_get_max_threads();
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

void run_softmax(benchmark::State& state, Unary kernel) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Tensor x = random_tensor(n, n, 5);
    for (auto _ : state) {
        benchmark::DoNotOptimize(kernel(x));
    }
    state.counters["threads"] = omp_get_max_threads();
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}

} // namespace

BENCHMARK_CAPTURE(run_binary, matmul_parallel, &kernels::matmul)->RangeMultiplier(2)->Range(16, 256);
BENCHMARK_CAPTURE(run_binary, matmul_serial, &reference::matmul)->RangeMultiplier(2)->Range(16, 256);
BENCHMARK_CAPTURE(run_binary, matmul_nt_parallel, &kernels::matmul_nt)->RangeMultiplier(2)->Range(16, 256);
BENCHMARK_CAPTURE(run_binary, matmul_nt_serial, &reference::matmul_nt)->RangeMultiplier(2)->Range(16, 256);
BENCHMARK_CAPTURE(run_binary, matmul_tn_parallel, &kernels::matmul_tn)->RangeMultiplier(2)->Range(16, 256);
BENCHMARK_CAPTURE(run_binary, matmul_tn_serial, &reference::matmul_tn)->RangeMultiplier(2)->Range(16, 256);
BENCHMARK_CAPTURE(run_distances, distances_parallel, &kernels::squared_distances)->Range(64, 4096);
BENCHMARK_CAPTURE(run_distances, distances_serial, &reference::squared_distances)->Range(64, 4096);
BENCHMARK_CAPTURE(run_softmax, softmax_parallel, &kernels::softmax_rows)->Range(16, 512);
BENCHMARK_CAPTURE(run_softmax, softmax_serial, &reference::softmax_rows)->Range(16, 512);

BENCHMARK_MAIN();
