#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvfold/cache.hpp"
#include "kvfold/model.hpp"

namespace kvfold::cli {

inline constexpr const char* kVersion = "0.1.0";

enum class Command { drift, needle, multi_needle, stream_compare, accounting };

std::string_view to_string(Command c) noexcept;
Command parse_command(std::string_view name);

struct RunConfig {
    Command command = Command::drift;

    // Model: a KVFW file, or a seeded synthetic model.
    std::string model_path;
    std::uint32_t layers = 2;
    std::uint32_t heads = 4;
    std::uint32_t kv_heads = 2;
    std::uint32_t d_model = 0;  // 0: heads * d_head
    std::uint32_t d_head = 16;
    std::uint32_t d_ff = 0;     // 0: 2 * d_model
    std::uint32_t vocab = 256;
    std::uint32_t max_position = 0;  // 0: large enough for the run
    std::uint64_t model_seed = 0;
    std::string precision = "f64";

    // Sequence.
    std::size_t T = 2048;
    std::size_t C = 64;
    std::size_t windows = 1;
    std::uint64_t data_seed = 1;
    std::string token_file;  // whitespace-separated ids
    std::string text_file;   // raw bytes: drift windows, or needle filler
    bool isolated_absolute = false;

    // Cache policy.
    std::string policy = "kv-fold";
    std::size_t sinks = 4;
    std::size_t window = 1020;
    int bits = 8;
    double gamma = 1.0;
    std::size_t keep = 1024;

    // Needle runs.
    std::size_t trials = 1;
    std::vector<std::size_t> distances{1};
    std::size_t K = 4;
    std::size_t decode_tokens = 30;

    // Accounting.
    std::uint32_t bytes = 2;

    // Not part of the header: they never change results.
    std::string out;
    std::string out_dir;
    unsigned jobs = 1;

    CachePolicy cache_policy() const;
    // Fills in derived defaults and checks ranges. Throws ConfigError.
    void resolve();
};

// Header object: everything that determines the output, plus seeds and the
// artifact version. Paths and --jobs are left out.
nlohmann::ordered_json header_json(const RunConfig& config);
RunConfig config_from_header(const nlohmann::json& header);

// Executes the run, writes the artifact files and prints a summary to `out`.
// Returns the path of the main JSONL file.
std::string run(RunConfig config, std::ostream& out);

// Full command line entry: 0 success, 1 config error, 2 runtime error.
int main_entry(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kvfold::cli
