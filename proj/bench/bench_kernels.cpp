// Serial reference vs OpenMP kernels, plus the rollout sampler end to end.

#include <vector>

#include <benchmark/benchmark.h>

#include "ktr/kernels.hpp"
#include "ktr/policy.hpp"
#include "ktr/rng.hpp"
#include "ktr/synthenv.hpp"

namespace k = ktr::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
    ktr::Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_values(n * n, 1);
    const auto b = random_values(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Kernel(a, b, c, n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <auto Kernel>
void BM_matmul_tn(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_values(n * n, 3);
    const auto b = random_values(n * n, 4);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Kernel(a, b, c, n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <auto Kernel>
void BM_log_softmax(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const std::size_t cols = 64;
    const auto a = random_values(rows * cols, 5);
    std::vector<double> out(rows * cols);
    for (auto _ : state) {
        Kernel(a, out, rows, cols);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * cols));
}

void BM_sample_group(benchmark::State& state) {
    const ktr::env::EnvConfig env;
    ktr::policy::ModelConfig mc;
    const ktr::policy::PolicyModel model(mc, env.frame_vocab);
    const auto task = ktr::env::generate_task(1, ktr::env::Family::Temporal, env);
    std::uint64_t seed = 0;
    for (auto _ : state) {
        auto r = ktr::policy::sample_rollouts(model, task, {8, 1.0, false}, ++seed);
        benchmark::DoNotOptimize(r.data());
    }
}

}  // namespace

BENCHMARK(BM_matmul<k::serial::matmul>)->Name("matmul/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_matmul<k::parallel::matmul>)->Name("matmul/parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_matmul<k::serial::matmul_nt>)->Name("matmul_nt/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_matmul<k::parallel::matmul_nt>)->Name("matmul_nt/parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_matmul_tn<k::serial::matmul_tn_accumulate>)->Name("matmul_tn/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_matmul_tn<k::parallel::matmul_tn_accumulate>)->Name("matmul_tn/parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_log_softmax<k::serial::log_softmax_rows>)->Name("log_softmax/serial")->RangeMultiplier(4)->Range(64, 4096);
BENCHMARK(BM_log_softmax<k::parallel::log_softmax_rows>)->Name("log_softmax/parallel")->RangeMultiplier(4)->Range(64, 4096);
BENCHMARK(BM_sample_group)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
