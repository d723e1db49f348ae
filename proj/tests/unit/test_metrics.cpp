#include <gtest/gtest.h>

#include <map>
#include "json.hpp"
#include <random>

#include "kvfold/metrics.hpp"
#include "unit/test_util.hpp"

namespace kvfold {
namespace {

EvalRecord rec(const std::string& w, std::size_t depth, Condition c, double nll) {
    return EvalRecord{w, depth + 1, depth, c, nll, 10};
}

TEST(DriftAdvantage, HandBuiltRecord) {
    const std::vector<EvalRecord> r{rec("a", 3, Condition::full, 1.0), rec("a", 3, Condition::isolated, 1.4),
                                    rec("a", 3, Condition::kv_fold, 1.1)};
    const auto curve = drift_advantage(r);
    ASSERT_EQ(curve.depths, std::vector<std::size_t>{3});
    EXPECT_NEAR(curve.drift[0], 0.1, 1e-15);
    EXPECT_NEAR(curve.advantage[0], 0.3, 1e-15);
    EXPECT_EQ(curve.n_windows, 1u);
}

TEST(DriftAdvantage, EqualNllGivesZeroDrift) {
    std::vector<EvalRecord> r;
    for (std::size_t d = 0; d < 5; ++d) {
        r.push_back(rec("w", d, Condition::full, 2.0 + d));
        r.push_back(rec("w", d, Condition::isolated, 3.0));
        r.push_back(rec("w", d, Condition::kv_fold, 2.0 + d));
    }
    for (double v : drift_advantage(r).drift) EXPECT_EQ(v, 0.0);
}

TEST(DriftAdvantage, MeanOverWindowsMatchesDirectAveraging) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.5, 5.0);
    std::vector<EvalRecord> r;
    std::map<std::size_t, std::vector<double>> drift, adv;
    const std::size_t windows = 7, depths = 12;
    for (std::size_t w = 0; w < windows; ++w) {
        for (std::size_t d = 0; d < depths; ++d) {
            const double f = u(rng), i = u(rng), k = u(rng);
            r.push_back(rec("w" + std::to_string(w), d, Condition::kv_fold, k));
            r.push_back(rec("w" + std::to_string(w), d, Condition::full, f));
            r.push_back(rec("w" + std::to_string(w), d, Condition::isolated, i));
            drift[d].push_back(k - f);
            adv[d].push_back(i - k);
        }
    }
    std::shuffle(r.begin(), r.end(), rng);
    const auto curve = drift_advantage(r);
    EXPECT_EQ(curve.n_windows, windows);
    ASSERT_EQ(curve.depths.size(), depths);
    for (std::size_t d = 0; d < depths; ++d) {
        EXPECT_EQ(curve.depths[d], d);
        double sd = 0, sa = 0;
        for (double v : drift[d]) sd += v;
        for (double v : adv[d]) sa += v;
        EXPECT_NEAR(curve.drift[d], sd / windows, 1e-12);
        EXPECT_NEAR(curve.advantage[d], sa / windows, 1e-12);
    }
}

TEST(DriftAdvantage, MissingConditionRejected) {
    const std::vector<EvalRecord> r{rec("a", 0, Condition::full, 1.0), rec("a", 0, Condition::kv_fold, 1.0)};
    EXPECT_THROW(drift_advantage(r), Error);
}

TEST(Plateau, ConstantDrift) {
    DepthCurve c;
    for (std::size_t d = 0; d < 64; ++d) {
        c.depths.push_back(d);
        c.drift.push_back(d < 7 ? 1.0 : 0.04);
        c.advantage.push_back(0.0);
    }
    const auto p = plateau_stats(c);
    EXPECT_NEAR(p.plateau_mean, 0.04, 1e-15);
    EXPECT_EQ(p.plateau_span, 0.0);
    EXPECT_EQ(p.n_depths, 57u);
}

TEST(Plateau, MatchesBruteRecomputation) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 0.1);
    for (int t = 0; t < 50; ++t) {
        DepthCurve c;
        for (std::size_t d = 0; d < 40; ++d) {
            c.depths.push_back(d);
            c.drift.push_back(n(rng));
            c.advantage.push_back(n(rng));
        }
        const std::size_t d_min = rng() % 40;
        double sum = 0, lo = 1e9, hi = -1e9;
        for (std::size_t d = d_min; d < 40; ++d) {
            sum += c.drift[d];
            lo = std::min(lo, c.drift[d]);
            hi = std::max(hi, c.drift[d]);
        }
        const auto p = plateau_stats(c, d_min);
        EXPECT_NEAR(p.plateau_mean, sum / static_cast<double>(40 - d_min), 1e-12);
        EXPECT_DOUBLE_EQ(p.plateau_span, hi - lo);
    }
}

TEST(Plateau, NoQualifyingDepth) {
    DepthCurve c{{0, 1, 2}, {0, 0, 0}, {0, 0, 0}, 1};
    EXPECT_THROW(plateau_stats(c, 7), Error);
}

TEST(MemoryModel, PublishedTotals) {
    EXPECT_EQ(kv_bytes_per_token(32, 8, 128, 2), 131072u);
    const double gb = static_cast<double>(kv_bytes_per_token(32, 8, 128, 2) * 131072) / kBytesPerGB;
    EXPECT_NEAR(gb, 17.18, 0.01);
    EXPECT_EQ(kv_bytes_per_token(1, 1, 2, 1), 4u);
    EXPECT_EQ(attention_scores_bytes(1, 1, 1, 1), 1u);
    EXPECT_NEAR(static_cast<double>(attention_scores_bytes(32, 131072, 131072, 2)), 1.1e12, 0.05 * 1.1e12);
    EXPECT_NEAR(static_cast<double>(attention_scores_bytes(32, 256, 131072, 2)), 2.1e9, 0.05 * 2.1e9);
}

TEST(MemoryModel, AccountingStruct) {
    MemoryAccounting a{32, 32, 8, 128, 2, 131072, 256, 1024};
    EXPECT_EQ(a.bytes_per_token(), 131072u);
    EXPECT_EQ(a.fold_cache_bytes(), 131072ull * 131072ull);
    EXPECT_EQ(a.full_scores_bytes(), attention_scores_bytes(32, 131072, 131072, 2));
    EXPECT_EQ(a.chunk_scores_bytes(), attention_scores_bytes(32, 256, 131072, 2));
    EXPECT_EQ(a.streaming_cache_bytes(), 1024ull * 131072ull);
    // Streaming cache about 0.13 GB regardless of T.
    EXPECT_NEAR(static_cast<double>(*a.streaming_cache_bytes()) / kBytesPerGB, 0.13, 0.01);

    const auto j = nlohmann::json::parse(to_json(a));
    EXPECT_EQ(j["kv_bytes_per_token"], 131072);
    EXPECT_NEAR(j["fold_cache_gb"].get<double>(), 17.18, 0.01);
    EXPECT_NE(to_csv(a).find("fold_cache,17179869184,"), std::string::npos);
}

TEST(MemoryModel, MeanCacheRows) {
    // Chunks of 2 over 6 tokens: prefixes 0, 2, 4 rows.
    MemoryAccounting a{1, 1, 1, 1, 1, 6, 2, std::nullopt};
    EXPECT_DOUBLE_EQ(a.mean_cache_rows(), 2.0);
}

TEST(MemoryModel, MeasuredBytesLinearForFold) {
    const auto c = testing::tiny_config(3, 4, 2, 8, 32);
    auto model = testing::synthetic_model<float>(c);
    const auto slope = kv_bytes_per_token(c, sizeof(float));
    auto state = FoldState<float>::initial(model, FoldAccumulate{});
    EXPECT_EQ(measured_cache_bytes(state.cache), 0u);
    const auto tokens = testing::random_tokens(100, c.vocab_size, 1);
    for (std::size_t s = 0; s < 100; s += 20) {
        fold_step(model, state, std::span<const TokenId>(tokens).subspan(s, 20));
        EXPECT_EQ(measured_cache_bytes(state.cache), slope * (s + 20));
    }
}

TEST(MemoryModel, MeasuredBytesConstantForSinkWindow) {
    const auto c = testing::tiny_config(2, 4, 2, 8, 32);
    auto model = testing::synthetic_model<float>(c);
    auto state = FoldState<float>::initial(model, SinkWindow{4, 28});
    const auto tokens = testing::random_tokens(160, c.vocab_size, 1);
    for (std::size_t s = 0; s < 160; s += 16) {
        fold_step(model, state, std::span<const TokenId>(tokens).subspan(s, 16));
        if (s + 16 >= 32) EXPECT_EQ(measured_cache_bytes(state.cache), kv_bytes_per_token(c, 4) * 32);
    }
}

TEST(CurveOutput, JsonAndCsv) {
    DepthCurve c{{0, 1}, {0.0, 0.5}, {1.0, 0.25}, 3};
    const auto j = nlohmann::json::parse(to_json(c, PlateauStats{0.5, 0.0, 1}));
    EXPECT_EQ(j["n_windows"], 3);
    EXPECT_EQ(j["drift"][1], 0.5);
    EXPECT_EQ(j["plateau"]["n_depths"], 1);
    EXPECT_EQ(to_csv(c), "depth,drift,advantage\n0,0,1\n1,0.5,0.25\n");
}

}  // namespace
}  // namespace kvfold
