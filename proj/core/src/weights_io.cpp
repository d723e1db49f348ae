#include "kvfold/weights_io.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "binary_io.hpp"

namespace kvfold {

namespace {

constexpr std::size_t kPayloadAlignment = 32;


// Payload spans in canonical order, matching required_tensors().
std::vector<std::span<const float>> payloads(const Weights<float>& w) {
    std::vector<std::span<const float>> out;
    out.push_back(w.token_embedding.data());
    for (const auto& l : w.layers) {
        out.push_back(l.attn_norm);
        out.push_back(l.wq.data());
        out.push_back(l.wk.data());
        out.push_back(l.wv.data());
        out.push_back(l.wo.data());
        out.push_back(l.mlp_norm);
        out.push_back(l.w_gate.data());
        out.push_back(l.w_up.data());
        out.push_back(l.w_down.data());
    }
    out.push_back(w.final_norm);
    out.push_back(w.lm_head.data());
    return out;
}

ModelConfig read_header(detail::ByteReader& in) {
    in.expect_magic("KVFW");
    const std::uint32_t version = in.u32();
    if (version != kWeightFormatVersion) {
        throw FormatError(in.what() + ": unsupported version " + std::to_string(version));
    }
    ModelConfig c;
    c.n_layers = in.u32();
    c.n_heads = in.u32();
    c.n_kv_heads = in.u32();
    c.d_model = in.u32();
    c.d_head = in.u32();
    c.d_ff = in.u32();
    c.vocab_size = in.u32();
    c.max_position = in.u32();
    c.rope_theta = in.f32();
    c.norm_eps = in.f32();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(in.what() + ": invalid header: " + e.what());
    }
    return c;
}

}  // namespace

std::vector<std::pair<std::string, std::vector<std::uint64_t>>> required_tensors(const ModelConfig& c) {
    const std::uint64_t dm = c.d_model, q = std::uint64_t{c.n_heads} * c.d_head, kv = c.kv_width();
    std::vector<std::pair<std::string, std::vector<std::uint64_t>>> out;
    out.emplace_back("token_embedding", std::vector<std::uint64_t>{c.vocab_size, dm});
    for (std::uint32_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        out.emplace_back(p + "attn_norm", std::vector<std::uint64_t>{dm});
        out.emplace_back(p + "attn.wq", std::vector<std::uint64_t>{dm, q});
        out.emplace_back(p + "attn.wk", std::vector<std::uint64_t>{dm, kv});
        out.emplace_back(p + "attn.wv", std::vector<std::uint64_t>{dm, kv});
        out.emplace_back(p + "attn.wo", std::vector<std::uint64_t>{q, dm});
        out.emplace_back(p + "mlp_norm", std::vector<std::uint64_t>{dm});
        out.emplace_back(p + "mlp.w_gate", std::vector<std::uint64_t>{dm, c.d_ff});
        out.emplace_back(p + "mlp.w_up", std::vector<std::uint64_t>{dm, c.d_ff});
        out.emplace_back(p + "mlp.w_down", std::vector<std::uint64_t>{c.d_ff, dm});
    }
    out.emplace_back("final_norm", std::vector<std::uint64_t>{dm});
    out.emplace_back("lm_head", std::vector<std::uint64_t>{dm, c.vocab_size});
    return out;
}

std::vector<std::uint8_t> encode_weights(const ModelConfig& c, const Weights<float>& w) {
    c.validate();
    w.validate(c);
    const auto names = required_tensors(c);
    const auto data = payloads(w);

    detail::ByteWriter out;
    out.magic("KVFW");
    out.u32(kWeightFormatVersion);
    for (std::uint32_t v : {c.n_layers, c.n_heads, c.n_kv_heads, c.d_model, c.d_head, c.d_ff,
                            c.vocab_size, c.max_position}) {
        out.u32(v);
    }
    out.f32(static_cast<float>(c.rope_theta));
    out.f32(static_cast<float>(c.norm_eps));
    out.u32(static_cast<std::uint32_t>(names.size()));
    std::vector<std::size_t> offset_slots;
    for (const auto& [name, shape] : names) {
        out.str(name);
        out.u8(kDtypeF32);
        out.u32(static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) out.u64(d);
        offset_slots.push_back(out.size());
        out.u64(0);
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
        out.pad_to(kPayloadAlignment);
        out.patch_u64(offset_slots[i], out.size());
        for (float v : data[i]) out.f32(v);
    }
    return out.buffer();
}

void save_weights(const std::string& path, const ModelConfig& c, const Weights<float>& w) {
    detail::write_file(path, encode_weights(c, w));
}

WeightFileInfo validate_weight_file(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes.data(), bytes.size(), "weight file");
    WeightFileInfo info;
    info.config = read_header(in);

    const auto required = required_tensors(info.config);
    std::map<std::string, std::vector<std::uint64_t>> want(required.begin(), required.end());

    const std::uint32_t count = in.u32();
    if (count != required.size()) {
        throw FormatError("weight file: directory has " + std::to_string(count) +
                          " tensors, expected " + std::to_string(required.size()));
    }
    std::map<std::string, bool> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorEntry e;
        e.name = in.str();
        e.dtype = in.u8();
        const std::uint32_t rank = in.u32();
        if (rank == 0 || rank > 4) throw FormatError("weight file: tensor '" + e.name + "' has rank " + std::to_string(rank));
        for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(in.u64());
        e.offset = in.u64();
        auto it = want.find(e.name);
        if (it == want.end()) throw FormatError("weight file: unknown tensor '" + e.name + "'");
        if (seen[e.name]) throw FormatError("weight file: duplicate tensor '" + e.name + "'");
        seen[e.name] = true;
        if (e.dtype != kDtypeF32) {
            throw FormatError("weight file: tensor '" + e.name + "' has unsupported dtype " +
                              std::to_string(e.dtype));
        }
        if (e.shape != it->second) throw FormatError("weight file: tensor '" + e.name + "' has wrong shape");
        info.tensors.push_back(std::move(e));
    }
    const std::size_t directory_end = in.pos();

    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    for (const auto& e : info.tensors) {
        std::uint64_t n = 1;
        for (auto d : e.shape) n *= d;
        const std::uint64_t len = n * 4;
        if (e.offset < directory_end || e.offset > bytes.size() || len > bytes.size() - e.offset) {
            throw FormatError("weight file: payload of '" + e.name + "' lies outside the file");
        }
        for (std::uint64_t k = 0; k < n; ++k) {
            detail::ByteReader value(bytes.data() + e.offset + 4 * k, 4, "weight file");
            if (!std::isfinite(value.f32())) {
                throw FormatError("weight file: tensor '" + e.name + "' holds a non-finite value");
            }
        }
        ranges.emplace_back(e.offset, e.offset + len);
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i].first < ranges[i - 1].second) throw FormatError("weight file: payloads overlap");
    }
    return info;
}

WeightFileInfo validate_weight_file(const std::string& path) {
    const auto bytes = detail::read_file(path);
    return validate_weight_file(std::span<const std::uint8_t>(bytes));
}

template <typename T>
LoadedWeights<T> decode_weights(std::span<const std::uint8_t> bytes) {
    const WeightFileInfo info = validate_weight_file(bytes);
    std::map<std::string, const TensorEntry*> by_name;
    for (const auto& e : info.tensors) by_name[e.name] = &e;

    auto fetch = [&](const std::string& name) {
        const TensorEntry& e = *by_name.at(name);
        std::uint64_t n = 1;
        for (auto d : e.shape) n *= d;
        std::vector<T> values(n);
        detail::ByteReader in(bytes.data() + e.offset, n * 4, "weight file");
        for (auto& v : values) v = static_cast<T>(in.f32());
        std::vector<std::size_t> shape(e.shape.begin(), e.shape.end());
        return Tensor<T>(std::move(shape), std::move(values));
    };
    auto fetch_vec = [&](const std::string& name) { return fetch(name).storage(); };

    const ModelConfig& c = info.config;
    LoadedWeights<T> out{c, {}};
    out.weights.token_embedding = fetch("token_embedding");
    for (std::uint32_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        out.weights.layers.push_back({fetch_vec(p + "attn_norm"), fetch(p + "attn.wq"),
                                      fetch(p + "attn.wk"), fetch(p + "attn.wv"),
                                      fetch(p + "attn.wo"), fetch_vec(p + "mlp_norm"),
                                      fetch(p + "mlp.w_gate"), fetch(p + "mlp.w_up"),
                                      fetch(p + "mlp.w_down")});
    }
    out.weights.final_norm = fetch_vec("final_norm");
    out.weights.lm_head = fetch("lm_head");
    out.weights.validate(c);
    return out;
}

template <typename T>
LoadedWeights<T> load_weights(const std::string& path) {
    const auto bytes = detail::read_file(path);
    return decode_weights<T>(std::span<const std::uint8_t>(bytes));
}

template LoadedWeights<float> decode_weights<float>(std::span<const std::uint8_t>);
template LoadedWeights<double> decode_weights<double>(std::span<const std::uint8_t>);
template LoadedWeights<float> load_weights<float>(const std::string&);
template LoadedWeights<double> load_weights<double>(const std::string&);

}  // namespace kvfold
