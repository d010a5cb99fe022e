// SPDX-License-Identifier: Apache-2.0
//
// Compares the parallel kernels against the serial reference implementations
// they are tested against. Run with --benchmark_filter=matmul etc.
#include <benchmark/benchmark.h>

#include "hydra/adapter.hpp"
#include "hydra/matrix.hpp"

namespace {

hydra::Matrix random_matrix(int rows, int cols, std::uint64_t seed) {
    hydra::RngState rng(seed);
    return hydra::seeded_gaussian(rows, cols, 0.0, 1.0, rng);
}

void bm_matmul(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const hydra::Matrix a = random_matrix(n, n, 1);
    const hydra::Matrix b = random_matrix(n, n, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(hydra::matmul(a, b));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}

void bm_matmul_serial(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const hydra::Matrix a = random_matrix(n, n, 1);
    const hydra::Matrix b = random_matrix(n, n, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(hydra::ref::matmul(a, b));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}

void bm_axpy(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const hydra::Matrix x = random_matrix(n, n, 3);
    const hydra::Matrix y = random_matrix(n, n, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(hydra::axpy(0.5, x, y));
    }
}

void bm_axpy_serial(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const hydra::Matrix x = random_matrix(n, n, 3);
    const hydra::Matrix y = random_matrix(n, n, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(hydra::ref::axpy(0.5, x, y));
    }
}

void bm_gaussian(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    for (auto _ : state) {
        hydra::RngState rng(7);
        benchmark::DoNotOptimize(hydra::seeded_gaussian(n, n, 0.0, 1.0, rng));
    }
}

void bm_gaussian_serial(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    for (auto _ : state) {
        hydra::RngState rng(7);
        benchmark::DoNotOptimize(hydra::ref::seeded_gaussian(n, n, 0.0, 1.0, rng));
    }
}

void bm_adapted_forward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    hydra::RngState rng(11);
    hydra::HydraAdapter ad =
        hydra::HydraAdapter::init(n, n, 8, 4, 8.0, hydra::GateMode::LearnableLogits, rng);
    for (hydra::Matrix& b : ad.heads) b = hydra::seeded_gaussian(n, 8, 0.0, 0.3, rng);
    const hydra::Matrix w0 = random_matrix(n, n, 12);
    const hydra::Matrix x = random_matrix(n, 32, 13);
    for (auto _ : state) {
        benchmark::DoNotOptimize(hydra::adapted_forward(x, w0, ad));
    }
}

}  // namespace

BENCHMARK(bm_matmul)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_axpy)->Arg(128)->Arg(512);
BENCHMARK(bm_axpy_serial)->Arg(128)->Arg(512);
BENCHMARK(bm_gaussian)->Arg(128)->Arg(512);
BENCHMARK(bm_gaussian_serial)->Arg(128)->Arg(512);
BENCHMARK(bm_adapted_forward)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
