#include <gtest/gtest.h>

#include "kvfold/model.hpp"
#include "oracle/reference_model.hpp"
#include "unit/test_util.hpp"

namespace kvfold {
namespace {

using testing::max_rel_diff;
using testing::random_tokens;
using testing::synthetic_model;
using testing::tiny_config;

std::vector<double> flatten(const oracle::Matrix& m, std::size_t from = 0) {
    std::vector<double> out;
    for (std::size_t i = from; i < m.size(); ++i) out.insert(out.end(), m[i].begin(), m[i].end());
    return out;
}

template <typename T>
std::vector<LayerKV<T>> concat(const std::vector<LayerKV<T>>& a, const std::vector<LayerKV<T>>& b) {
    auto out = a;
    for (std::size_t l = 0; l < out.size(); ++l) {
        out[l].keys.append_rows(b[l].keys);
        out[l].values.append_rows(b[l].values);
        out[l].positions.insert(out[l].positions.end(), b[l].positions.begin(), b[l].positions.end());
    }
    return out;
}

TEST(ModelConfig, RejectsInconsistentArchitecture) {
    auto c = tiny_config();
    c.d_model += 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config();
    c.n_kv_heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config();
    c.vocab_size = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config(2, 4, 2, 8);
    c.d_head = 7;
    c.d_model = 28;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Weights, ShapeMismatchRejected) {
    const auto c = tiny_config();
    auto w = make_synthetic_weights<double>(c, 1);
    w.layers[1].wk = Tensor<double>::matrix(c.d_model, 3);
    EXPECT_THROW(Model<double>(c, w), ShapeError);
}

TEST(Forward, FullSequenceMatchesReference) {
    const auto c = tiny_config(3, 4, 2, 8, 50);
    auto model = synthetic_model<double>(c, 3);
    const auto tokens = random_tokens(40, c.vocab_size, 1);
    const auto got = model.forward(tokens);
    const auto want = oracle::reference_forward(c, model.weights(), tokens);
    EXPECT_LE(max_rel_diff(got.logits.data(), flatten(want.logits)), 1e-10);
}

TEST(Forward, SingleTokenTwoWordVocab) {
    const auto c = tiny_config(1, 2, 1, 4, 2);
    auto model = synthetic_model<double>(c, 5);
    const std::vector<TokenId> tok{1};
    const auto got = model.forward_chunk(tok, {}, 0);
    const auto want = oracle::reference_forward(c, model.weights(), tok);
    ASSERT_EQ(got.logits.shape(), (std::vector<std::size_t>{1, 2}));
    EXPECT_LE(max_rel_diff(got.logits.data(), flatten(want.logits)), 1e-12);
}

TEST(Forward, GroupedQueryEqualsReplicatedMultiHead) {
    // A GQA model must equal the MHA model whose K/V projections repeat each
    // kv head for every query head in its group.
    const auto gqa_cfg = tiny_config(2, 4, 2, 8, 40);
    const auto w = make_synthetic_weights<double>(gqa_cfg, 21);
    auto mha_cfg = gqa_cfg;
    mha_cfg.n_kv_heads = mha_cfg.n_heads;
    auto mha_w = w;
    const std::size_t dh = gqa_cfg.d_head, group = gqa_cfg.group_size();
    for (auto& l : mha_w.layers) {
        auto widen = [&](const Tensor<double>& src) {
            Tensor<double> out = Tensor<double>::matrix(gqa_cfg.d_model, std::size_t{gqa_cfg.n_heads} * dh);
            for (std::size_t r = 0; r < gqa_cfg.d_model; ++r)
                for (std::size_t h = 0; h < gqa_cfg.n_heads; ++h)
                    for (std::size_t d = 0; d < dh; ++d) out(r, h * dh + d) = src(r, (h / group) * dh + d);
            return out;
        };
        l.wk = widen(l.wk);
        l.wv = widen(l.wv);
    }
    const auto tokens = random_tokens(24, gqa_cfg.vocab_size, 2);
    const auto a = Model<double>(gqa_cfg, w).forward(tokens);
    const auto b = Model<double>(mha_cfg, mha_w).forward(tokens);
    EXPECT_LE(max_rel_diff(a.logits.data(), b.logits.data()), 1e-12);
    // And the MHA model matches the reference's standard multi-head path.
    const auto ref = oracle::reference_forward(mha_cfg, mha_w, tokens);
    EXPECT_LE(max_rel_diff(b.logits.data(), flatten(ref.logits)), 1e-10);
}

TEST(Forward, NewKvPositionsAreTheChunkPositions) {
    const auto c = tiny_config();
    auto model = synthetic_model<double>(c);
    const auto tokens = random_tokens(5, c.vocab_size, 3);
    const auto res = model.forward_chunk(tokens, {}, 17);
    ASSERT_EQ(res.new_kv.size(), c.n_layers);
    for (const auto& l : res.new_kv) {
        EXPECT_EQ(l.positions, (std::vector<std::int64_t>{17, 18, 19, 20, 21}));
        EXPECT_EQ(l.keys.shape(), (std::vector<std::size_t>{5, c.n_kv_heads, c.d_head}));
    }
}

template <typename T>
void check_split_equivalence(double tol) {
    const auto c = tiny_config(3, 4, 2, 8, 60);
    auto model = synthetic_model<T>(c, 9);
    const auto tokens = random_tokens(48, c.vocab_size, 4);
    const auto full = model.forward(tokens);
    for (std::size_t split : {1u, 7u, 16u, 47u}) {
        const std::span<const TokenId> all(tokens);
        const auto first = model.forward_chunk(all.first(split), {}, 0);
        const auto second = model.forward_chunk(all.subspan(split), first.new_kv, static_cast<std::int64_t>(split));
        std::vector<T> want(full.logits.data().begin() + static_cast<std::ptrdiff_t>(split * c.vocab_size),
                            full.logits.data().end());
        EXPECT_LE(max_rel_diff(second.logits.data(), want), tol) << "split " << split;
        // The KV of the split run equals the unsplit KV.
        const auto joined = concat(first.new_kv, second.new_kv);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            EXPECT_LE(max_rel_diff(joined[l].keys.data(), full.new_kv[l].keys.data()), tol);
            EXPECT_LE(max_rel_diff(joined[l].values.data(), full.new_kv[l].values.data()), tol);
        }
    }
}

TEST(Forward, SplitAtAnyBoundaryEqualsUnsplitF64) { check_split_equivalence<double>(1e-10); }
TEST(Forward, SplitAtAnyBoundaryEqualsUnsplitF32) { check_split_equivalence<float>(1e-5); }

TEST(Forward, Errors) {
    const auto c = tiny_config(2, 4, 2, 8, 64, 32);
    auto model = synthetic_model<double>(c);
    const auto tokens = random_tokens(8, c.vocab_size, 5);
    EXPECT_THROW(model.forward_chunk(tokens, {}, 25), PositionError);
    EXPECT_THROW(model.forward_chunk(std::span<const TokenId>{}, {}, 0), ShapeError);
    const auto first = model.forward_chunk(tokens, {}, 0);
    // Prefix positions must precede the chunk.
    EXPECT_THROW(model.forward_chunk(tokens, first.new_kv, 4), PositionError);
    // Layer count must match.
    std::vector<LayerKV<double>> short_prefix(first.new_kv.begin(), first.new_kv.begin() + 1);
    EXPECT_THROW(model.forward_chunk(tokens, short_prefix, 8), ShapeError);
    const std::vector<TokenId> bad{64};
    EXPECT_THROW(model.forward_chunk(bad, {}, 0), ShapeError);
}

TEST(Forward, EmulatedBf16StaysCloseToF32) {
    const auto c = tiny_config();
    const auto w = make_synthetic_weights<float>(c, 4);
    const auto tokens = random_tokens(16, c.vocab_size, 6);
    const auto f32 = Model<float>(c, w, Precision::native_f32).forward(tokens);
    const auto bf = Model<float>(c, w, Precision::emulated_bf16).forward(tokens);
    const double diff = max_rel_diff(bf.logits.data(), f32.logits.data());
    EXPECT_GT(diff, 0.0);
    EXPECT_LT(diff, 0.1);
    EXPECT_EQ(round_emulated_bf16(bf.logits), bf.logits);
}

TEST(Forward, PrecisionMustMatchScalarType) {
    const auto c = tiny_config();
    EXPECT_THROW(Model<double>(c, make_synthetic_weights<double>(c, 1), Precision::native_f32), ConfigError);
    EXPECT_THROW(Model<float>(c, make_synthetic_weights<float>(c, 1), Precision::native_f64), ConfigError);
}

TEST(GreedyDecode, ZeroTokens) {
    const auto c = tiny_config();
    auto model = synthetic_model<double>(c);
    const auto tokens = random_tokens(4, c.vocab_size, 7);
    const auto fwd = model.forward(tokens);
    EXPECT_TRUE(greedy_decode(model, fwd.new_kv, fwd.logits.row(3), 4, 0).empty());
}

TEST(GreedyDecode, ConstantArgmaxModel) {
    // Every layer writes nothing to the residual stream and every embedding is
    // e_0, so the final hidden state is constant and lm_head row 0 decides.
    const auto c = tiny_config(2, 2, 1, 4, 16);
    auto w = make_synthetic_weights<double>(c, 1);
    for (std::size_t t = 0; t < c.vocab_size; ++t)
        for (std::size_t j = 0; j < c.d_model; ++j) w.token_embedding(t, j) = j == 0 ? 1.0 : 0.0;
    for (auto& l : w.layers) {
        l.wo = Tensor<double>::matrix(l.wo.dim(0), l.wo.dim(1));
        l.w_down = Tensor<double>::matrix(l.w_down.dim(0), l.w_down.dim(1));
    }
    w.lm_head = Tensor<double>::matrix(c.d_model, c.vocab_size);
    const TokenId v = 11;
    w.lm_head(0, static_cast<std::size_t>(v)) = 1.0;
    Model<double> model(c, w);
    const std::vector<TokenId> prompt{3, 4, 5};
    const auto fwd = model.forward(prompt);
    const auto out = greedy_decode(model, fwd.new_kv, fwd.logits.row(2), 3, 6);
    EXPECT_EQ(out, std::vector<TokenId>(6, v));
    // Ties resolve to the lowest id: an all-zero lm_head always yields 0.
    w.lm_head = Tensor<double>::matrix(c.d_model, c.vocab_size);
    Model<double> flat(c, w);
    const auto fwd2 = flat.forward(prompt);
    EXPECT_EQ(greedy_decode(flat, fwd2.new_kv, fwd2.logits.row(2), 3, 4), std::vector<TokenId>(4, 0));
}

TEST(GreedyDecode, MatchesFullReforwardOracle) {
    const auto c = tiny_config(3, 4, 2, 8, 32);
    auto model = synthetic_model<double>(c, 17);
    auto seq = random_tokens(12, c.vocab_size, 8);
    const auto fwd = model.forward(seq);
    const auto decoded = greedy_decode(model, fwd.new_kv, fwd.logits.row(11), 12, 10);
    ASSERT_EQ(decoded.size(), 10u);
    for (int step = 0; step < 10; ++step) {
        const auto ref = oracle::reference_forward(c, model.weights(), seq);
        const auto& last = ref.logits.back();
        const auto next = static_cast<TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
        EXPECT_EQ(decoded[static_cast<std::size_t>(step)], next) << "step " << step;
        seq.push_back(next);
    }
}

TEST(GreedyDecode, StopTokenEndsEarly) {
    const auto c = tiny_config(1, 2, 1, 4, 16);
    auto model = synthetic_model<double>(c, 2);
    const std::vector<TokenId> prompt{1, 2};
    const auto fwd = model.forward(prompt);
    const auto free_run = greedy_decode(model, fwd.new_kv, fwd.logits.row(1), 2, 5);
    const auto stopped = greedy_decode(model, fwd.new_kv, fwd.logits.row(1), 2, 5, free_run[2]);
    const auto first_hit = std::find(free_run.begin(), free_run.end(), free_run[2]) - free_run.begin();
    EXPECT_EQ(stopped, std::vector<TokenId>(free_run.begin(), free_run.begin() + first_hit));
}

TEST(GreedyDecode, EmptyCacheAndOverflow) {
    const auto c = tiny_config(1, 2, 1, 4, 16, 8);
    auto model = synthetic_model<double>(c, 2);
    std::vector<double> logits(16, 0.0);
    EXPECT_THROW(greedy_decode<double>(model, {}, logits, 0, 3), ShapeError);
    const std::vector<TokenId> prompt{1, 2, 3, 4, 5, 6};
    const auto fwd = model.forward(prompt);
    EXPECT_THROW(greedy_decode(model, fwd.new_kv, fwd.logits.row(5), 6, 5), PositionError);
}

}  // namespace
}  // namespace kvfold
