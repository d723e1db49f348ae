#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "kvfold/weights_io.hpp"
#include "unit/test_util.hpp"

namespace kvfold {
namespace {

const std::string kGolden = std::string(KVFOLD_TEST_DATA_DIR) + "/golden_tiny.kvfw";

std::vector<std::uint8_t> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t find_name(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    const auto it = std::search(bytes.begin(), bytes.end(), name.begin(), name.end());
    return static_cast<std::size_t>(it - bytes.begin());
}

TEST(WeightFile, EncodeDecodeIsBitExact) {
    auto c = testing::tiny_config(2, 4, 2, 8, 40);
    c.norm_eps = static_cast<float>(c.norm_eps);  // the header stores f32
    const auto w = make_synthetic_weights<float>(c, 99);
    const auto bytes = encode_weights(c, w);
    const auto loaded = decode_weights<float>(bytes);
    EXPECT_EQ(loaded.config, c);
    EXPECT_EQ(loaded.weights.token_embedding, w.token_embedding);
    EXPECT_EQ(loaded.weights.lm_head, w.lm_head);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        EXPECT_EQ(loaded.weights.layers[l].wq, w.layers[l].wq);
        EXPECT_EQ(loaded.weights.layers[l].w_down, w.layers[l].w_down);
        EXPECT_EQ(loaded.weights.layers[l].attn_norm, w.layers[l].attn_norm);
    }
    // Re-encoding what was loaded reproduces the file.
    EXPECT_EQ(encode_weights(loaded.config, loaded.weights), bytes);
}

TEST(WeightFile, SaveAndLoadThroughDisk) {
    const auto c = testing::tiny_config(1, 2, 1, 4, 8);
    const auto w = make_synthetic_weights<float>(c, 3);
    const auto path = (std::filesystem::temp_directory_path() / "kvfold_roundtrip.kvfw").string();
    save_weights(path, c, w);
    const auto as_double = load_weights<double>(path);
    EXPECT_EQ(as_double.weights.lm_head, tensor_cast<double>(w.lm_head));
    std::filesystem::remove(path);
}

TEST(WeightFile, GoldenFileFromIndependentWriter) {
    const auto info = validate_weight_file(kGolden);
    EXPECT_EQ(info.config.n_layers, 1u);
    EXPECT_EQ(info.config.n_heads, 2u);
    EXPECT_EQ(info.config.n_kv_heads, 1u);
    EXPECT_EQ(info.config.d_model, 4u);
    EXPECT_EQ(info.config.d_head, 2u);
    EXPECT_EQ(info.config.d_ff, 3u);
    EXPECT_EQ(info.config.vocab_size, 5u);
    EXPECT_EQ(info.config.max_position, 16u);
    EXPECT_EQ(info.config.rope_theta, 10000.0);
    EXPECT_EQ(info.config.norm_eps, static_cast<double>(1e-5f));

    const auto loaded = load_weights<float>(kGolden);
    // Element i of the k-th tensor in directory order holds k + i / 64.
    const auto& w = loaded.weights;
    EXPECT_EQ(w.token_embedding(0, 0), 0.0f);
    EXPECT_EQ(w.token_embedding(4, 3), 19.0f / 64.0f);
    EXPECT_EQ(w.layers[0].attn_norm[2], 1.0f + 2.0f / 64.0f);
    EXPECT_EQ(w.layers[0].wq(1, 3), 2.0f + 7.0f / 64.0f);
    EXPECT_EQ(w.layers[0].w_down(2, 1), 9.0f + 9.0f / 64.0f);
    EXPECT_EQ(w.final_norm[3], 10.0f + 3.0f / 64.0f);
    EXPECT_EQ(w.lm_head(3, 4), 11.0f + 19.0f / 64.0f);
    // The engine accepts it as a model.
    Model<float> model(loaded.config, loaded.weights);
    EXPECT_EQ(model.config().vocab_size, 5u);
}

class CorruptWeightFile : public ::testing::Test {
protected:
    std::vector<std::uint8_t> bytes = read_all(kGolden);
};

TEST_F(CorruptWeightFile, BadMagic) {
    bytes[0] = 'X';
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, WrongVersion) {
    bytes[4] = 2;
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, Truncated) {
    bytes.resize(bytes.size() - 3);
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
    bytes.resize(20);
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, InconsistentHeader) {
    // d_model (5th u32 after magic+version) no longer equals n_heads * d_head.
    bytes[8 + 3 * 4] = 6;
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, UnknownTensorName) {
    const auto at = find_name(bytes, "lm_head");
    bytes[at + 6] = 'e';
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, RenamedToExistingName) {
    // "attn.wk" -> "attn.wv" makes wv appear twice.
    const auto at = find_name(bytes, "layer.0.attn.wk");
    bytes[at + 14] = 'v';
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, WrongShape) {
    // First dim of token_embedding: after the name and dtype and rank.
    const auto at = find_name(bytes, "token_embedding") + std::strlen("token_embedding") + 1 + 4;
    bytes[at] = 6;
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, UnsupportedDtype) {
    const auto at = find_name(bytes, "final_norm") + std::strlen("final_norm");
    bytes[at] = 1;
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, NonFiniteValue) {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(bytes.data() + bytes.size() - 4, &nan, 4);
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, OffsetOutsideFile) {
    const auto at = find_name(bytes, "lm_head") + std::strlen("lm_head") + 1 + 4 + 16;
    bytes[at + 5] = 0x7f;
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST_F(CorruptWeightFile, OverlappingPayloads) {
    // Point final_norm at lm_head's payload.
    const auto lm = find_name(bytes, "lm_head") + std::strlen("lm_head") + 1 + 4 + 16;
    const auto fn = find_name(bytes, "final_norm") + std::strlen("final_norm") + 1 + 4 + 8;
    std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(lm), bytes.begin() + static_cast<std::ptrdiff_t>(lm + 8),
              bytes.begin() + static_cast<std::ptrdiff_t>(fn));
    EXPECT_THROW(validate_weight_file(bytes), FormatError);
}

TEST(WeightFile, MissingFile) {
    EXPECT_THROW(load_weights<float>("/nonexistent/model.kvfw"), FormatError);
}

}  // namespace
}  // namespace kvfold
