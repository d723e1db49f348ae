#include "kvfold_cli/cli.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "kvfold/corpus.hpp"
#include "kvfold/fold.hpp"
#include "kvfold/metrics.hpp"
#include "kvfold/needle.hpp"
#include "kvfold/tokenizer.hpp"
#include "kvfold/weights_io.hpp"

namespace kvfold::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string_view to_string(Command c) noexcept {
    switch (c) {
        case Command::drift: return "drift";
        case Command::needle: return "needle";
        case Command::multi_needle: return "multi-needle";
        case Command::stream_compare: return "stream-compare";
        case Command::accounting: return "accounting";
    }
    return "?";
}

Command parse_command(std::string_view name) {
    for (auto c : {Command::drift, Command::needle, Command::multi_needle, Command::stream_compare,
                   Command::accounting}) {
        if (to_string(c) == name) return c;
    }
    throw ConfigError("unknown command '" + std::string(name) + "'");
}

CachePolicy RunConfig::cache_policy() const {
    CachePolicy p;
    if (policy == "kv-fold") p = FoldAccumulate{};
    else if (policy == "sink-window") p = SinkWindow{sinks, window};
    else if (policy == "quant") p = QuantRoundTrip{bits};
    else if (policy == "decay") p = UniformDecay{gamma};
    else if (policy == "prune") p = AttentionPrune{keep};
    else throw ConfigError("unknown policy '" + policy + "'");
    validate_policy(p);
    return p;
}

namespace {

bool is_needle_command(Command c) {
    return c == Command::needle || c == Command::multi_needle || c == Command::stream_compare;
}

// Positions a run needs beyond the haystack: the question plus the decode.
std::size_t positions_needed(const RunConfig& c) {
    if (!is_needle_command(c.command)) return c.T;
    std::size_t longest_question = 0;
    for (auto key : kNeedleKeys) longest_question = std::max(longest_question, question_text(key).size());
    return c.T + longest_question + c.decode_tokens;
}

}  // namespace

void RunConfig::resolve() {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (heads == 0) fail("--heads must be >= 1");
    if (d_model != 0) {
        if (d_model % heads != 0) fail("--d-model must be a multiple of --heads");
        d_head = d_model / heads;
    } else {
        d_model = heads * d_head;
    }
    if (d_ff == 0) d_ff = 2 * d_model;
    if (T == 0 || C == 0) fail("T and C must be >= 1");
    if (command != Command::accounting && C > T) fail("C must not exceed T");
    if (windows == 0 || trials == 0) fail("--windows and --trials must be >= 1");
    if (jobs == 0) fail("--jobs must be >= 1");
    parse_precision(precision);
    (void)cache_policy();
    if ((command == Command::needle || command == Command::stream_compare) && distances.empty()) {
        fail("--distances needs at least one value");
    }
    if (command == Command::multi_needle && K == 0) fail("--K must be >= 1");
    if (is_needle_command(command) && vocab < kByteVocab && model_path.empty()) {
        fail("needle runs use byte tokens: --vocab must be >= 256");
    }
    if (!text_file.empty() && !token_file.empty()) fail("--text and --tokens are mutually exclusive");
    if (max_position == 0) max_position = static_cast<std::uint32_t>(positions_needed(*this));
    if (model_path.empty() && positions_needed(*this) > max_position) {
        fail("run needs " + std::to_string(positions_needed(*this)) + " positions but --max-position is " +
             std::to_string(max_position));
    }
}

nlohmann::ordered_json header_json(const RunConfig& c) {
    json cfg;
    cfg["command"] = to_string(c.command);
    cfg["model_path"] = c.model_path;
    cfg["layers"] = c.layers;
    cfg["heads"] = c.heads;
    cfg["kv_heads"] = c.kv_heads;
    cfg["d_model"] = c.d_model;
    cfg["d_head"] = c.d_head;
    cfg["d_ff"] = c.d_ff;
    cfg["vocab"] = c.vocab;
    cfg["max_position"] = c.max_position;
    cfg["precision"] = c.precision;
    cfg["T"] = c.T;
    cfg["C"] = c.C;
    cfg["windows"] = c.windows;
    cfg["token_file"] = c.token_file;
    cfg["text_file"] = c.text_file;
    cfg["isolated_absolute"] = c.isolated_absolute;
    cfg["policy"] = c.policy;
    cfg["sinks"] = c.sinks;
    cfg["window"] = c.window;
    cfg["bits"] = c.bits;
    cfg["gamma"] = c.gamma;
    cfg["keep"] = c.keep;
    cfg["trials"] = c.trials;
    cfg["distances"] = c.distances;
    cfg["K"] = c.K;
    cfg["decode_tokens"] = c.decode_tokens;
    cfg["bytes"] = c.bytes;

    json seeds;
    seeds["model_seed"] = c.model_seed;
    seeds["data_seed"] = c.data_seed;
    std::vector<std::uint64_t> derived;
    const std::size_t n = c.command == Command::drift ? c.windows : c.trials;
    if (c.command != Command::accounting) {
        for (std::size_t i = 0; i < n; ++i) derived.push_back(c.data_seed + i);
    }
    seeds[c.command == Command::drift ? "window_seeds" : "trial_seeds"] = derived;

    json h;
    h["type"] = "header";
    h["version"] = kVersion;
    h["command"] = to_string(c.command);
    h["config"] = cfg;
    h["seeds"] = seeds;
    if (c.command != Command::accounting) h["policy"] = describe_policy(c.cache_policy());
    if (is_needle_command(c.command)) h["needle_keys"] = kNeedleKeys;
    return h;
}

RunConfig config_from_header(const nlohmann::json& h) {
    if (!h.is_object() || h.value("type", "") != "header" || !h.contains("config") || !h.contains("seeds")) {
        throw ConfigError("not a kvfold output header");
    }
    const auto& j = h.at("config");
    RunConfig c;
    try {
        c.command = parse_command(j.at("command").get<std::string>());
        j.at("model_path").get_to(c.model_path);
        j.at("layers").get_to(c.layers);
        j.at("heads").get_to(c.heads);
        j.at("kv_heads").get_to(c.kv_heads);
        j.at("d_model").get_to(c.d_model);
        j.at("d_head").get_to(c.d_head);
        j.at("d_ff").get_to(c.d_ff);
        j.at("vocab").get_to(c.vocab);
        j.at("max_position").get_to(c.max_position);
        j.at("precision").get_to(c.precision);
        j.at("T").get_to(c.T);
        j.at("C").get_to(c.C);
        j.at("windows").get_to(c.windows);
        j.at("token_file").get_to(c.token_file);
        j.at("text_file").get_to(c.text_file);
        j.at("isolated_absolute").get_to(c.isolated_absolute);
        j.at("policy").get_to(c.policy);
        j.at("sinks").get_to(c.sinks);
        j.at("window").get_to(c.window);
        j.at("bits").get_to(c.bits);
        j.at("gamma").get_to(c.gamma);
        j.at("keep").get_to(c.keep);
        j.at("trials").get_to(c.trials);
        j.at("distances").get_to(c.distances);
        j.at("K").get_to(c.K);
        j.at("decode_tokens").get_to(c.decode_tokens);
        j.at("bytes").get_to(c.bytes);
        h.at("seeds").at("model_seed").get_to(c.model_seed);
        h.at("seeds").at("data_seed").get_to(c.data_seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("header: ") + e.what());
    }
    return c;
}

namespace {

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "% .6e", v);
    return buf;
}

std::string gb(std::uint64_t bytes) { return fixed(static_cast<double>(bytes) / kBytesPerGB, 2) + " GB"; }

// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
template <typename F>
void parallel_for(std::size_t n, unsigned jobs, F&& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < std::min<std::size_t>(jobs, n); ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

struct Output {
    fs::path jsonl;
    std::string header;

    fs::path side(const std::string& suffix) const {
        auto p = jsonl;
        p.replace_extension();
        p += suffix;
        return p;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw Error("write failed for '" + path.string() + "'");
}

std::string jsonl(const Output& o, const std::vector<json>& records) {
    std::string s = o.header + "\n";
    for (const auto& r : records) s += r.dump() + "\n";
    return s;
}

template <typename T>
Model<T> make_model(const RunConfig& c, Precision p) {
    if (!c.model_path.empty()) {
        auto loaded = load_weights<T>(c.model_path);
        if (positions_needed(c) > loaded.config.max_position) {
            throw ConfigError("run needs " + std::to_string(positions_needed(c)) +
                              " positions; the model supports " + std::to_string(loaded.config.max_position));
        }
        return Model<T>(loaded.config, std::move(loaded.weights), p);
    }
    ModelConfig mc;
    mc.n_layers = c.layers;
    mc.n_heads = c.heads;
    mc.n_kv_heads = c.kv_heads;
    mc.d_model = c.d_model;
    mc.d_head = c.d_head;
    mc.d_ff = c.d_ff;
    mc.vocab_size = c.vocab;
    mc.max_position = c.max_position;
    mc.validate();
    return Model<T>(mc, make_synthetic_weights<T>(mc, c.model_seed), p);
}

std::uint64_t element_bytes(const RunConfig& c, std::size_t scalar_size) {
    return parse_precision(c.precision) == Precision::emulated_bf16 ? 2 : scalar_size;
}

// ---- drift -----------------------------------------------------------------

template <typename T>
std::vector<std::vector<TokenId>> drift_windows(const RunConfig& c, const Model<T>& model) {
    std::vector<std::vector<TokenId>> out;
    if (c.token_file.empty() && c.text_file.empty()) {
        for (std::size_t w = 0; w < c.windows; ++w) {
            SyntheticCorpusSpec spec;
            spec.seed = c.data_seed + w;
            spec.vocab_size = model.config().vocab_size;
            out.push_back(synthetic_tokens(spec, c.T));
        }
        return out;
    }
    std::vector<TokenId> all;
    if (!c.token_file.empty()) {
        all = read_token_file(c.token_file);
    } else {
        if (model.config().vocab_size < kByteVocab) throw ConfigError("--text needs a vocab of at least 256");
        all = read_text_file_as_bytes(c.text_file);
    }
    if (all.size() < c.windows * c.T) {
        throw ConfigError("input holds " + std::to_string(all.size()) + " tokens; " +
                          std::to_string(c.windows) + " windows of " + std::to_string(c.T) + " need more");
    }
    for (std::size_t w = 0; w < c.windows; ++w) {
        const auto begin = all.begin() + static_cast<std::ptrdiff_t>(w * c.T);
        out.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(c.T));
    }
    return out;
}

template <typename T>
void run_drift(const RunConfig& c, const Model<T>& model, const Output& o, std::ostream& out) {
    const auto windows = drift_windows(c, model);
    const auto policy = c.cache_policy();
    const bool fold_only = std::holds_alternative<FoldAccumulate>(policy);
    std::vector<std::vector<EvalRecord>> per_window(windows.size());
    parallel_for(windows.size(), c.jobs, [&](std::size_t w) {
        auto records = eval_three_conditions(model, windows[w], c.C, "w" + std::to_string(w),
                                             EvalOptions{c.isolated_absolute});
        if (!fold_only) {
            const auto nll = fold_nll(model, windows[w], c.C, policy);
            for (auto& r : records) {
                if (r.condition != Condition::kv_fold) continue;
                r.nll = nll[r.depth].nll;
                r.tokens_scored = nll[r.depth].tokens_scored;
            }
        }
        per_window[w] = std::move(records);
    });

    std::vector<EvalRecord> all;
    std::vector<json> lines;
    for (const auto& recs : per_window) {
        for (const auto& r : recs) {
            all.push_back(r);
            json j;
            j["window_id"] = r.window_id;
            j["chunk_index"] = r.chunk_index;
            j["depth"] = r.depth;
            j["condition"] = to_string(r.condition);
            j["nll"] = r.nll;
            j["tokens_scored"] = r.tokens_scored;
            lines.push_back(std::move(j));
        }
    }
    write_text(o.jsonl, jsonl(o, lines));

    const auto curve = drift_advantage(all);
    std::optional<PlateauStats> plateau;
    if (!curve.depths.empty() && curve.depths.back() >= kDefaultPlateauStart) plateau = plateau_stats(curve);
    write_text(o.side(".curve.csv"), "# " + o.header + "\n" + to_csv(curve));
    json curve_file;
    curve_file["header"] = json::parse(o.header);
    curve_file["curve"] = json::parse(to_json(curve, plateau));
    write_text(o.side(".curve.json"), curve_file.dump() + "\n");

    out << "drift: T=" << c.T << " C=" << c.C << " windows=" << windows.size()
        << " policy=" << describe_policy(policy) << " precision=" << c.precision << "\n";
    out << "depth  drift          advantage\n";
    double worst = 0.0;
    for (std::size_t i = 0; i < curve.depths.size(); ++i) {
        out << curve.depths[i] << (curve.depths[i] < 10 ? "      " : curve.depths[i] < 100 ? "     " : "    ")
            << sci(curve.drift[i]) << "  " << sci(curve.advantage[i]) << "\n";
        worst = std::max(worst, std::abs(curve.drift[i]));
    }
    out << "depths: " << curve.depths.size() << "  max |drift|: " << sci(worst) << "\n";
    if (plateau) {
        out << "plateau (depth >= " << kDefaultPlateauStart << "): mean " << sci(plateau->plateau_mean)
            << "  span " << sci(plateau->plateau_span) << "\n";
    }
}

// ---- needle runs -----------------------------------------------------------

struct TrialResult {
    std::uint64_t seed = 0;
    std::size_t K = 0;
    std::vector<NeedleOutcome> outcomes;
};

std::optional<std::string> filler_text(const RunConfig& c) {
    if (c.text_file.empty()) return std::nullopt;
    const auto bytes = read_text_file_as_bytes(c.text_file);
    std::string s;
    for (auto b : bytes) s.push_back(static_cast<char>(b));
    return s;
}

template <typename T>
std::vector<TrialResult> run_needles(const RunConfig& c, const Model<T>& model, const CachePolicy& policy,
                                     const std::optional<std::string>& filler) {
    std::vector<TrialResult> results(c.trials);
    parallel_for(c.trials, c.jobs, [&](std::size_t t) {
        const std::uint64_t seed = c.data_seed + t;
        std::optional<std::string_view> f;
        if (filler) f = *filler;
        const auto trial = c.command == Command::multi_needle ? build_multi_trial(c.T, c.C, c.K, seed, f)
                                                               : build_trial(c.T, c.C, c.distances, seed, f);
        results[t] = TrialResult{seed, trial.needles.size(), run_trial(model, trial, policy, c.decode_tokens)};
    });
    return results;
}

// Decoded output is raw bytes; map each to the code point of the same value so
// the JSONL stays valid UTF-8 without losing anything.
std::string bytes_as_utf8(std::string_view raw) {
    std::string s;
    for (unsigned char b : raw) {
        if (b < 0x80) {
            s.push_back(static_cast<char>(b));
        } else {
            s.push_back(static_cast<char>(0xC0 | (b >> 6)));
            s.push_back(static_cast<char>(0x80 | (b & 0x3F)));
        }
    }
    return s;
}

json outcome_json(const RunConfig& c, std::size_t trial_id, const TrialResult& r, const NeedleOutcome& o,
                  const CachePolicy& policy) {
    json j;
    j["trial_id"] = trial_id;
    j["T"] = c.T;
    j["C"] = c.C;
    j["K"] = r.K;
    j["distance"] = o.needle.distance;
    j["policy"] = describe_policy(policy);
    j["resident"] = o.resident;
    j["reachable"] = o.reachable;
    j["decoded"] = bytes_as_utf8(o.decoded);
    j["exact_match"] = o.exact_match;
    j["seed"] = r.seed;
    return j;
}

struct Tally {
    std::size_t n = 0, resident = 0, reachable = 0, exact = 0;
};

std::map<std::size_t, Tally> tally(const std::vector<TrialResult>& results) {
    std::map<std::size_t, Tally> by_distance;
    for (const auto& r : results) {
        for (const auto& o : r.outcomes) {
            auto& t = by_distance[o.needle.distance];
            ++t.n;
            t.resident += o.resident;
            t.reachable += o.reachable;
            t.exact += o.exact_match;
        }
    }
    return by_distance;
}

template <typename T>
void run_needle(const RunConfig& c, const Model<T>& model, const Output& o, std::ostream& out) {
    const auto policy = c.cache_policy();
    const auto results = run_needles(c, model, policy, filler_text(c));
    std::vector<json> lines;
    for (std::size_t t = 0; t < results.size(); ++t) {
        for (const auto& oc : results[t].outcomes) lines.push_back(outcome_json(c, t, results[t], oc, policy));
    }
    write_text(o.jsonl, jsonl(o, lines));

    out << to_string(c.command) << ": T=" << c.T << " C=" << c.C << " chunks=" << c.T / c.C
        << " trials=" << c.trials << " policy=" << describe_policy(policy) << "\n";
    out << "distance  resident  reachable  exact\n";
    for (const auto& [d, t] : tally(results)) {
        out << d << "  " << t.resident << "/" << t.n << "  " << t.reachable << "/" << t.n << "  " << t.exact << "/"
            << t.n << "\n";
    }
}

template <typename T>
void run_stream_compare(const RunConfig& c, const Model<T>& model, const Output& o, std::ostream& out) {
    std::vector<CachePolicy> policies{FoldAccumulate{}, SinkWindow{c.sinks, c.window}};
    const auto configured = c.cache_policy();
    if (std::find(policies.begin(), policies.end(), configured) == policies.end()) policies.push_back(configured);
    const auto filler = filler_text(c);
    const auto per_token = kv_bytes_per_token(model.config(), element_bytes(c, sizeof(T)));

    std::vector<json> lines;
    std::vector<std::map<std::size_t, Tally>> tallies;
    for (const auto& policy : policies) {
        const auto results = run_needles(c, model, policy, filler);
        for (std::size_t t = 0; t < results.size(); ++t) {
            for (const auto& oc : results[t].outcomes) lines.push_back(outcome_json(c, t, results[t], oc, policy));
        }
        tallies.push_back(tally(results));
    }
    write_text(o.jsonl, jsonl(o, lines));

    out << "stream-compare: T=" << c.T << " C=" << c.C << " chain depth=" << c.T / c.C << " trials=" << c.trials
        << "\n";
    out << "policy";
    for (auto d : c.distances) out << "  d=" << d << " (exact, resident)";
    out << "  cache after haystack\n";
    for (std::size_t i = 0; i < policies.size(); ++i) {
        out << describe_policy(policies[i]);
        for (auto d : c.distances) {
            const auto& t = tallies[i].at(d);
            out << "  " << t.exact << "/" << t.n << ", " << t.resident << "/" << t.n;
        }
        std::uint64_t rows = c.T;
        if (const auto* sw = std::get_if<SinkWindow>(&policies[i])) rows = std::min<std::uint64_t>(rows, sw->capacity());
        out << "  " << rows << " rows, " << gb(rows * per_token) << "\n";
    }
}

// ---- accounting ------------------------------------------------------------

void run_accounting(const RunConfig& c, const Output& o, std::ostream& out) {
    MemoryAccounting a;
    a.n_layers = c.layers;
    a.n_heads = c.heads;
    a.n_kv_heads = c.kv_heads;
    a.d_head = c.d_head;
    a.bytes_per_element = c.bytes;
    a.total_tokens = c.T;
    a.chunk_size = c.C;
    a.streaming_capacity = c.sinks + c.window;
    write_text(o.jsonl, o.header + "\n" + to_json(a) + "\n");
    write_text(o.side(".csv"), "# " + o.header + "\n" + to_csv(a));

    out << "accounting: layers=" << c.layers << " heads=" << c.heads << " kv_heads=" << c.kv_heads
        << " d_head=" << c.d_head << " bytes=" << c.bytes << " T=" << c.T << " C=" << c.C << "\n";
    out << "KV bytes per token: " << a.bytes_per_token() << "\n";
    out << "KV-Fold cache at T=" << c.T << ": " << a.fold_cache_bytes() << " bytes (" << gb(a.fold_cache_bytes())
        << ")\n";
    out << "sink-window cache (capacity " << *a.streaming_capacity << "): " << *a.streaming_cache_bytes()
        << " bytes (" << gb(*a.streaming_cache_bytes()) << ")\n";
    out << "full attention scores [H,T,T]: " << a.full_scores_bytes() << " bytes (" << gb(a.full_scores_bytes())
        << ")\n";
    out << "per-chunk scores [H,C,T]: " << a.chunk_scores_bytes() << " bytes (" << gb(a.chunk_scores_bytes())
        << ")\n";
    out << "mean cache rows per chunk: " << fixed(a.mean_cache_rows(), 1) << "\n";
}

template <typename T>
void run_model_command(const RunConfig& c, Precision p, const Output& o, std::ostream& out) {
    const auto model = make_model<T>(c, p);
    switch (c.command) {
        case Command::drift: run_drift(c, model, o, out); break;
        case Command::needle:
        case Command::multi_needle: run_needle(c, model, o, out); break;
        case Command::stream_compare: run_stream_compare(c, model, o, out); break;
        case Command::accounting: break;
    }
}

fs::path default_output(const RunConfig& c) {
    if (!c.out.empty()) return c.out;
    std::string dir = c.out_dir;
    if (dir.empty()) {
        const char* env = std::getenv("KVFOLD_OUT_DIR");
        dir = env && *env ? env : ".";
    }
    return fs::path(dir) / (std::string(to_string(c.command)) + ".jsonl");
}

}  // namespace

std::string run(RunConfig config, std::ostream& out) {
    config.resolve();
    Output o{default_output(config), header_json(config).dump()};
    if (config.command == Command::accounting) {
        run_accounting(config, o, out);
    } else {
        const auto p = parse_precision(config.precision);
        if (p == Precision::native_f64) run_model_command<double>(config, p, o, out);
        else run_model_command<float>(config, p, o, out);
    }
    out << "wrote " << o.jsonl.string() << "\n";
    return o.jsonl.string();
}

namespace {

void add_options(CLI::App& app, RunConfig& c) {
    app.add_option("--model", c.model_path, "KVFW weight file (default: synthetic model)");
    app.add_flag("--synthetic", "use a seeded synthetic model (the default)");
    app.add_option("--layers", c.layers, "layers")->capture_default_str();
    app.add_option("--heads", c.heads, "query heads")->capture_default_str();
    app.add_option("--kv-heads", c.kv_heads, "key/value heads")->capture_default_str();
    app.add_option("--d-model", c.d_model, "model width (default heads * d-head)");
    app.add_option("--d-head", c.d_head, "head width")->capture_default_str();
    app.add_option("--d-ff", c.d_ff, "MLP width (default 2 * d-model)");
    app.add_option("--vocab", c.vocab, "vocabulary size")->capture_default_str();
    app.add_option("--max-position", c.max_position, "context limit (default: what the run needs)");
    app.add_option("--model-seed", c.model_seed, "synthetic weight seed")->capture_default_str();
    app.add_option("--precision", c.precision, "f32, f64 or bf16")
        ->check(CLI::IsMember({"f32", "f64", "bf16"}))
        ->capture_default_str();
    app.add_option("-T,--T", c.T, "tokens per window or haystack")->capture_default_str();
    app.add_option("-C,--C", c.C, "chunk size")->capture_default_str();
    app.add_option("--windows", c.windows, "drift windows")->capture_default_str();
    app.add_option("--seed", c.data_seed, "data seed; window/trial i uses seed + i")->capture_default_str();
    app.add_option("--tokens", c.token_file, "token id file for drift windows");
    app.add_option("--text", c.text_file, "text file: drift windows or needle filler");
    app.add_flag("--isolated-absolute", c.isolated_absolute, "isolated chunks keep absolute positions");
    app.add_option("--policy", c.policy, "kv-fold, sink-window, quant, decay or prune")
        ->check(CLI::IsMember({"kv-fold", "sink-window", "quant", "decay", "prune"}))
        ->capture_default_str();
    app.add_option("--sinks", c.sinks, "sink-window: sink tokens")->capture_default_str();
    app.add_option("--window", c.window, "sink-window: recent tokens")->capture_default_str();
    app.add_option("--bits", c.bits, "quant: 4 or 8")->capture_default_str();
    app.add_option("--gamma", c.gamma, "decay factor in (0, 1]")->capture_default_str();
    app.add_option("--keep", c.keep, "prune: older rows kept")->capture_default_str();
    app.add_option("--trials", c.trials, "needle trials")->capture_default_str();
    app.add_option("--distances", c.distances, "needle distances in chunks, comma separated")->delimiter(',');
    app.add_option("-K,--K", c.K, "multi-needle count")->capture_default_str();
    app.add_option("--decode-tokens", c.decode_tokens, "greedy tokens per answer")->capture_default_str();
    app.add_option("--bytes", c.bytes, "accounting: bytes per element")->capture_default_str();
    app.add_option("--out", c.out, "main output file (JSONL)");
    app.add_option("--out-dir", c.out_dir, "output directory (default $KVFOLD_OUT_DIR or .)");
    app.add_option("--jobs", c.jobs, "parallel trials/windows")->capture_default_str();
}

}  // namespace

int main_entry(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"KV-Fold chunked inference experiments", "kvfold"};
    app.set_version_flag("--version", kVersion);
    app.set_config("--config", "", "flat key=value file; command-line flags override it");
    app.require_subcommand(1);
    RunConfig config;
    add_options(app, config);

    std::map<CLI::App*, Command> commands;
    const std::pair<const char*, Command> subs[] = {
        {"drift", Command::drift},
        {"needle", Command::needle},
        {"multi-needle", Command::multi_needle},
        {"stream-compare", Command::stream_compare},
        {"accounting", Command::accounting}};
    const char* help[] = {"per-depth drift and advantage against full and isolated attention",
                          "single-needle retrieval at given distances",
                          "K needles at evenly spaced chunks",
                          "needle grid under kv-fold and sink-window",
                          "analytical KV cache and attention-score memory"};
    for (std::size_t i = 0; i < std::size(subs); ++i) {
        commands[app.add_subcommand(subs[i].first, help[i])->fallthrough()] = subs[i].second;
    }
    std::string replay_from;
    auto* replay = app.add_subcommand("replay", "re-run the configuration stored in an output header")->fallthrough();
    replay->add_option("header_file", replay_from, "output file whose first line is a header")->required();

    std::vector<std::string> storage{"kvfold"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 1;
    }

    try {
        if (replay->parsed()) {
            std::ifstream f(replay_from);
            std::string first;
            if (!f || !std::getline(f, first)) throw ConfigError("cannot read header from '" + replay_from + "'");
            json header;
            try {
                header = json::parse(first);
            } catch (const nlohmann::json::exception&) {
                throw ConfigError("first line of '" + replay_from + "' is not JSON");
            }
            auto replayed = config_from_header(header);
            replayed.out = config.out;
            replayed.out_dir = config.out_dir;
            replayed.jobs = config.jobs;
            run(std::move(replayed), out);
            return 0;
        }
        for (const auto& [sub, cmd] : commands) {
            if (sub->parsed()) config.command = cmd;
        }
        run(config, out);
        return 0;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace kvfold::cli
