#include "kvfold/metrics.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace kvfold {

DepthCurve drift_advantage(std::span<const EvalRecord> records) {
    // depth -> window -> per-condition NLL
    std::map<std::size_t, std::map<std::string, std::array<std::optional<double>, 3>>> table;
    std::set<std::string> windows;
    for (const auto& r : records) {
        table[r.depth][r.window_id][static_cast<std::size_t>(r.condition)] = r.nll;
        windows.insert(r.window_id);
    }
    DepthCurve curve;
    curve.n_windows = windows.size();
    for (const auto& [depth, per_window] : table) {
        double drift = 0.0, advantage = 0.0;
        for (const auto& [window, nll] : per_window) {
            for (std::size_t c = 0; c < 3; ++c) {
                if (!nll[c]) {
                    throw Error("drift_advantage: window '" + window + "' has no " +
                                std::string(to_string(static_cast<Condition>(c))) + " record at depth " +
                                std::to_string(depth));
                }
            }
            const double full = *nll[0], iso = *nll[1], kvf = *nll[2];
            drift += kvf - full;
            advantage += iso - kvf;
        }
        const auto n = static_cast<double>(per_window.size());
        curve.depths.push_back(depth);
        curve.drift.push_back(drift / n);
        curve.advantage.push_back(advantage / n);
    }
    return curve;
}

PlateauStats plateau_stats(const DepthCurve& curve, std::size_t d_min) {
    PlateauStats s;
    double lo = 0.0, hi = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < curve.depths.size(); ++i) {
        if (curve.depths[i] < d_min) continue;
        const double d = curve.drift[i];
        if (s.n_depths == 0) lo = hi = d;
        lo = std::min(lo, d);
        hi = std::max(hi, d);
        sum += d;
        ++s.n_depths;
    }
    if (s.n_depths == 0) throw Error("plateau_stats: no depth >= " + std::to_string(d_min));
    s.plateau_mean = sum / static_cast<double>(s.n_depths);
    s.plateau_span = hi - lo;
    return s;
}

std::uint64_t kv_bytes_per_token(std::uint64_t n_layers, std::uint64_t n_kv_heads, std::uint64_t d_head,
                                 std::uint64_t bytes_per_element) {
    return n_layers * n_kv_heads * d_head * 2 * bytes_per_element;
}

std::uint64_t kv_bytes_per_token(const ModelConfig& c, std::uint64_t bytes_per_element) {
    return kv_bytes_per_token(c.n_layers, c.n_kv_heads, c.d_head, bytes_per_element);
}

std::uint64_t attention_scores_bytes(std::uint64_t heads, std::uint64_t rows, std::uint64_t cols,
                                     std::uint64_t bytes_per_element) {
    return heads * rows * cols * bytes_per_element;
}

std::uint64_t MemoryAccounting::bytes_per_token() const {
    return kv_bytes_per_token(n_layers, n_kv_heads, d_head, bytes_per_element);
}
std::uint64_t MemoryAccounting::fold_cache_bytes() const { return bytes_per_token() * total_tokens; }
std::uint64_t MemoryAccounting::full_scores_bytes() const {
    return attention_scores_bytes(n_heads, total_tokens, total_tokens, bytes_per_element);
}
std::uint64_t MemoryAccounting::chunk_scores_bytes() const {
    return attention_scores_bytes(n_heads, chunk_size, total_tokens, bytes_per_element);
}
std::optional<std::uint64_t> MemoryAccounting::streaming_cache_bytes() const {
    if (!streaming_capacity) return std::nullopt;
    return bytes_per_token() * std::min(*streaming_capacity, total_tokens);
}
double MemoryAccounting::mean_cache_rows() const {
    if (chunk_size == 0 || total_tokens == 0) return 0.0;
    // Chunk t (0-based) sees t*C cached rows before its own C.
    const std::uint64_t n = (total_tokens + chunk_size - 1) / chunk_size;
    double sum = 0.0;
    for (std::uint64_t t = 0; t < n; ++t) sum += static_cast<double>(t * chunk_size);
    return sum / static_cast<double>(n);
}

std::string to_json(const DepthCurve& curve, std::optional<PlateauStats> plateau) {
    nlohmann::ordered_json j;
    j["n_windows"] = curve.n_windows;
    j["depths"] = curve.depths;
    j["drift"] = curve.drift;
    j["advantage"] = curve.advantage;
    if (plateau) {
        j["plateau"] = {{"mean", plateau->plateau_mean},
                        {"span", plateau->plateau_span},
                        {"n_depths", plateau->n_depths}};
    }
    return j.dump();
}

std::string to_csv(const DepthCurve& curve) {
    std::ostringstream os;
    os.precision(17);
    os << "depth,drift,advantage\n";
    for (std::size_t i = 0; i < curve.depths.size(); ++i) {
        os << curve.depths[i] << ',' << curve.drift[i] << ',' << curve.advantage[i] << '\n';
    }
    return os.str();
}

std::string to_json(const MemoryAccounting& a) {
    nlohmann::ordered_json j;
    j["n_layers"] = a.n_layers;
    j["n_heads"] = a.n_heads;
    j["n_kv_heads"] = a.n_kv_heads;
    j["d_head"] = a.d_head;
    j["bytes_per_element"] = a.bytes_per_element;
    j["T"] = a.total_tokens;
    j["C"] = a.chunk_size;
    j["kv_bytes_per_token"] = a.bytes_per_token();
    j["fold_cache_bytes"] = a.fold_cache_bytes();
    j["fold_cache_gb"] = static_cast<double>(a.fold_cache_bytes()) / kBytesPerGB;
    j["full_scores_bytes"] = a.full_scores_bytes();
    j["chunk_scores_bytes"] = a.chunk_scores_bytes();
    j["mean_cache_rows"] = a.mean_cache_rows();
    if (auto s = a.streaming_cache_bytes()) {
        j["streaming_capacity"] = *a.streaming_capacity;
        j["streaming_cache_bytes"] = *s;
        j["streaming_cache_gb"] = static_cast<double>(*s) / kBytesPerGB;
    }
    return j.dump();
}

std::string to_csv(const MemoryAccounting& a) {
    std::ostringstream os;
    os.precision(17);
    os << "quantity,bytes,gb\n";
    auto row = [&](const char* name, std::uint64_t b) {
        os << name << ',' << b << ',' << static_cast<double>(b) / kBytesPerGB << '\n';
    };
    row("kv_bytes_per_token", a.bytes_per_token());
    row("fold_cache", a.fold_cache_bytes());
    row("full_scores", a.full_scores_bytes());
    row("chunk_scores", a.chunk_scores_bytes());
    if (auto s = a.streaming_cache_bytes()) row("streaming_cache", *s);
    return os.str();
}

}  // namespace kvfold
