#include <benchmark/benchmark.h>

#include <random>

#include "kvfold/kernels.hpp"

namespace {

template <typename T>
kvfold::Tensor<T> random(std::vector<std::size_t> shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    kvfold::Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(d(rng));
    return t;
}

template <typename T>
void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random<T>({n, n}, 1), b = random<T>({n, n}, 2);
    const auto mode = sizeof(T) == 8 ? kvfold::Precision::native_f64 : kvfold::Precision::native_f32;
    for (auto _ : state) benchmark::DoNotOptimize(kvfold::matmul(a, b, mode));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK_TEMPLATE(BM_Matmul, float)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK_TEMPLATE(BM_Matmul, double)->Arg(64)->Arg(128)->Arg(256);

void BM_MatmulBf16(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random<float>({n, n}, 1), b = random<float>({n, n}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(kvfold::matmul(a, b, kvfold::Precision::emulated_bf16));
}
BENCHMARK(BM_MatmulBf16)->Arg(128);

void BM_SoftmaxRows(benchmark::State& state) {
    const auto cols = static_cast<std::size_t>(state.range(0));
    const auto x = random<float>({64, cols}, 3);
    for (auto _ : state) benchmark::DoNotOptimize(kvfold::softmax_rows(x, {}, kvfold::Precision::native_f32));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(64 * cols));
}
BENCHMARK(BM_SoftmaxRows)->Arg(256)->Arg(4096);

void BM_Rope(benchmark::State& state) {
    const auto x = random<float>({256, 8, 64}, 4);
    std::vector<std::int64_t> pos(256);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(10000 + i);
    for (auto _ : state) benchmark::DoNotOptimize(kvfold::rope_apply(x, pos, 10000.0, kvfold::Precision::native_f32));
}
BENCHMARK(BM_Rope);

void BM_RmsNormRows(benchmark::State& state) {
    const auto x = random<float>({256, 512}, 5);
    const std::vector<float> gain(512, 1.0f);
    for (auto _ : state) {
        benchmark::DoNotOptimize(kvfold::rms_norm_rows(x, std::span<const float>(gain), 1e-5, kvfold::Precision::native_f32));
    }
}
BENCHMARK(BM_RmsNormRows);

}  // namespace
