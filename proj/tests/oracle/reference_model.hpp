#pragma once

// Straight-line transformer used as an oracle: whole sequence at once, plain
// loops in double, no cache, no library kernels. Each query sees exactly the
// keys its visibility predicate allows, so the same code serves as the
// full-attention, masked-attention and MHA oracle.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "kvfold/model.hpp"

namespace kvfold::oracle {

using Matrix = std::vector<std::vector<double>>;

struct ReferenceOutput {
    Matrix logits;                    // [tokens][vocab]
    std::vector<double> mass;         // attention received per key, summed over layers/heads/queries
};

inline Matrix to_matrix(const Tensor<double>& t) {
    Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t(i, j);
    return m;
}

inline std::vector<double> vec_mat(const std::vector<double>& x, const Tensor<double>& w) {
    std::vector<double> out(w.dim(1), 0.0);
    for (std::size_t j = 0; j < w.dim(1); ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < w.dim(0); ++k) acc += x[k] * w(k, j);
        out[j] = acc;
    }
    return out;
}

inline std::vector<double> rms(const std::vector<double>& x, const std::vector<double>& gain, double eps) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double denom = std::sqrt(ss / static_cast<double>(x.size()) + eps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / denom * gain[i];
    return out;
}

// Rotate each head's channel pairs in place.
inline void rotate(std::vector<double>& x, std::size_t heads, std::size_t d_head, std::int64_t pos,
                   double theta) {
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < d_head / 2; ++i) {
            const double angle = static_cast<double>(pos) *
                                 std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
            const double a = x[h * d_head + 2 * i], b = x[h * d_head + 2 * i + 1];
            x[h * d_head + 2 * i] = a * std::cos(angle) - b * std::sin(angle);
            x[h * d_head + 2 * i + 1] = a * std::sin(angle) + b * std::cos(angle);
        }
    }
}

using Visibility = std::function<bool(std::size_t query, std::size_t key)>;

inline Visibility causal() {
    return [](std::size_t q, std::size_t k) { return k <= q; };
}

inline ReferenceOutput reference_forward(const ModelConfig& c, const Weights<double>& w,
                                         const std::vector<TokenId>& tokens,
                                         const std::vector<std::int64_t>& positions,
                                         const Visibility& visible) {
    const std::size_t n = tokens.size(), dm = c.d_model, dh = c.d_head;
    const std::size_t heads = c.n_heads, kv_heads = c.n_kv_heads, group = heads / kv_heads;
    Matrix h(n);
    for (std::size_t i = 0; i < n; ++i) {
        h[i].resize(dm);
        for (std::size_t j = 0; j < dm; ++j) h[i][j] = w.token_embedding(static_cast<std::size_t>(tokens[i]), j);
    }
    ReferenceOutput out;
    out.mass.assign(n, 0.0);
    for (const auto& lw : w.layers) {
        Matrix q(n), k(n), v(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto x = rms(h[i], lw.attn_norm, c.norm_eps);
            q[i] = vec_mat(x, lw.wq);
            k[i] = vec_mat(x, lw.wk);
            v[i] = vec_mat(x, lw.wv);
            rotate(q[i], heads, dh, positions[i], c.rope_theta);
            rotate(k[i], kv_heads, dh, positions[i], c.rope_theta);
        }
        Matrix attn(n, std::vector<double>(heads * dh, 0.0));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t hd = 0; hd < heads; ++hd) {
                const std::size_t g = hd / group;
                std::vector<double> weight(n, 0.0);
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    if (!visible(i, j)) continue;
                    double s = 0.0;
                    for (std::size_t d = 0; d < dh; ++d) s += q[i][hd * dh + d] * k[j][g * dh + d];
                    weight[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
                    total += weight[j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    if (weight[j] == 0.0) continue;
                    const double p = weight[j] / total;
                    out.mass[j] += p;
                    for (std::size_t d = 0; d < dh; ++d) attn[i][hd * dh + d] += p * v[j][g * dh + d];
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto o = vec_mat(attn[i], lw.wo);
            for (std::size_t j = 0; j < dm; ++j) h[i][j] += o[j];
            const auto x = rms(h[i], lw.mlp_norm, c.norm_eps);
            const auto gate = vec_mat(x, lw.w_gate);
            const auto up = vec_mat(x, lw.w_up);
            std::vector<double> act(gate.size());
            for (std::size_t j = 0; j < act.size(); ++j) act[j] = gate[j] / (1.0 + std::exp(-gate[j])) * up[j];
            const auto down = vec_mat(act, lw.w_down);
            for (std::size_t j = 0; j < dm; ++j) h[i][j] += down[j];
        }
    }
    out.logits.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.logits[i] = vec_mat(rms(h[i], w.final_norm, c.norm_eps), w.lm_head);
    return out;
}

inline ReferenceOutput reference_forward(const ModelConfig& c, const Weights<double>& w,
                                         const std::vector<TokenId>& tokens) {
    std::vector<std::int64_t> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i);
    return reference_forward(c, w, tokens, positions, causal());
}

}  // namespace kvfold::oracle
