#include <benchmark/benchmark.h>

#include <random>

#include "kvfold/fold.hpp"

namespace {

kvfold::ModelConfig bench_config() {
    kvfold::ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 8;
    c.n_kv_heads = 2;
    c.d_head = 32;
    c.d_model = 256;
    c.d_ff = 512;
    c.vocab_size = 512;
    c.max_position = 16384;
    return c;
}

std::vector<kvfold::TokenId> random_tokens(std::size_t n) {
    std::mt19937_64 rng(9);
    std::vector<kvfold::TokenId> t(n);
    for (auto& v : t) v = static_cast<kvfold::TokenId>(rng() % 512);
    return t;
}

// One fold step of 64 tokens over a prefix of state.range(0) cached rows.
void BM_FoldStep(benchmark::State& state) {
    const auto c = bench_config();
    const kvfold::Model<float> model(c, kvfold::make_synthetic_weights<float>(c, 1));
    const auto prefix_len = static_cast<std::size_t>(state.range(0));
    const auto toks = random_tokens(prefix_len + 64);
    auto base = kvfold::FoldState<float>::initial(model, kvfold::FoldAccumulate{});
    if (prefix_len > 0) {
        base = kvfold::fold_run<float>(
            model, kvfold::chunk_sequence(std::span<const kvfold::TokenId>(toks).first(prefix_len), 256),
            kvfold::FoldAccumulate{});
    }
    const std::span<const kvfold::TokenId> chunk = std::span<const kvfold::TokenId>(toks).subspan(prefix_len);
    for (auto _ : state) {
        state.PauseTiming();
        auto s = base;
        state.ResumeTiming();
        benchmark::DoNotOptimize(kvfold::fold_step(model, s, chunk));
    }
}
BENCHMARK(BM_FoldStep)->Arg(0)->Arg(512)->Arg(2048)->Unit(benchmark::kMillisecond);

// Policy overhead at a fixed prefix.
void BM_FoldStepPolicy(benchmark::State& state) {
    const auto c = bench_config();
    const kvfold::Model<float> model(c, kvfold::make_synthetic_weights<float>(c, 1));
    const kvfold::CachePolicy policies[] = {kvfold::FoldAccumulate{}, kvfold::SinkWindow{4, 508},
                                            kvfold::QuantRoundTrip{4}, kvfold::AttentionPrune{256}};
    const auto& policy = policies[state.range(0)];
    const auto toks = random_tokens(1024 + 64);
    const auto base = kvfold::fold_run<float>(
        model, kvfold::chunk_sequence(std::span<const kvfold::TokenId>(toks).first(1024), 256), policy);
    const std::span<const kvfold::TokenId> chunk = std::span<const kvfold::TokenId>(toks).subspan(1024);
    state.SetLabel(kvfold::describe_policy(policy));
    for (auto _ : state) {
        state.PauseTiming();
        auto s = base;
        state.ResumeTiming();
        benchmark::DoNotOptimize(kvfold::fold_step(model, s, chunk));
    }
}
BENCHMARK(BM_FoldStepPolicy)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
