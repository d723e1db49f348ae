#include "kvfold/tokenizer.hpp"

#include <fstream>
#include <iterator>

#include "binary_io.hpp"

namespace kvfold {

std::vector<TokenId> byte_tokenize(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char ch : text) ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(ch)));
    return ids;
}

std::string byte_detokenize(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id < 0 || id >= static_cast<TokenId>(kByteVocab)) {
            throw Error("byte_detokenize: token id " + std::to_string(id) + " is not a byte");
        }
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

std::string byte_detokenize_lossy(std::span<const TokenId> ids) {
    std::string out;
    for (TokenId id : ids) {
        if (id >= 0 && id < static_cast<TokenId>(kByteVocab)) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
    }
    return out;
}

std::vector<TokenId> read_token_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open token file '" + path + "'");
    std::vector<TokenId> ids;
    long long v = 0;
    while (in >> v) {
        if (v < 0 || v > INT32_MAX) throw FormatError("token file: id " + std::to_string(v) + " out of range");
        ids.push_back(static_cast<TokenId>(v));
    }
    if (!in.eof()) throw FormatError("token file '" + path + "': non-numeric content");
    return ids;
}

std::vector<TokenId> read_text_file_as_bytes(const std::string& path) {
    const auto bytes = detail::read_file(path);
    return std::vector<TokenId>(bytes.begin(), bytes.end());
}

}  // namespace kvfold
