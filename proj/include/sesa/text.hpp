#ifndef SESA_TEXT_HPP
#define SESA_TEXT_HPP

// Whitespace tokenizer and learned embedding table standing in for the CLIP
// text encoder. Downstream code only sees c_t as an opaque [L x d] matrix.

#include "sesa/common.hpp"
#include "sesa/tensor.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace sesa {

struct TextEmbedding {
    std::vector<int64_t> tokens;
    Tensor embeddings;  // [L x d_text]
    std::vector<std::string> token_strings;
};

inline std::vector<std::string> tokenize_whitespace(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

// lowercase, strip surrounding punctuation; used for vocab lookup and tagging
inline std::string normalize_token(const std::string& tok) {
    size_t b = 0, e = tok.size();
    while (b < e && !std::isalnum(static_cast<unsigned char>(tok[b]))) b++;
    while (e > b && !std::isalnum(static_cast<unsigned char>(tok[e - 1]))) e--;
    std::string out = tok.substr(b, e - b);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return out;
}

struct TextEncoderConfig {
    int64_t d_text = 16;
    int64_t max_tokens = 16;
    int64_t hash_buckets = 48;  // ids beyond the known list hash here
};

// small fixed vocabulary; everything else falls into deterministic hash buckets
inline const std::vector<std::string>& known_words() {
    static const std::vector<std::string> words = {
        "a",    "an",    "the",   "hand",  "hands",  "holding", "waving",  "shaking",
        "cup",  "person", "left", "right", "open",   "closed",  "fingers", "palm",
        "at",   "in",     "on",   "with",  "beach",  "table",   "three",   "four",
        "five", "small",  "large", "raised", "pointing", "grabbing", "fist", "up",
    };
    return words;
}

struct TextEncoder {
    TextEncoderConfig cfg;
    Tensor table;  // [V x d_text]; V = known words + hash buckets

    static TextEncoder create(const TextEncoderConfig& cfg, Rng& rng) {
        TextEncoder te;
        te.cfg = cfg;
        int64_t v = static_cast<int64_t>(known_words().size()) + cfg.hash_buckets;
        te.table = Tensor::randn(Shape{v, cfg.d_text}, rng, 0.5, true);
        return te;
    }

    int64_t token_id(const std::string& norm) const {
        const auto& kw = known_words();
        auto it = std::find(kw.begin(), kw.end(), norm);
        if (it != kw.end()) return static_cast<int64_t>(it - kw.begin());
        return static_cast<int64_t>(kw.size()) +
               static_cast<int64_t>(fnv1a(norm) % static_cast<uint64_t>(cfg.hash_buckets));
    }

    TextEmbedding encode(const std::string& prompt) const {
        TextEmbedding out;
        auto toks = tokenize_whitespace(prompt);
        if (toks.empty()) throw EmptyPrompt("cannot encode an empty prompt");
        if (toks.size() > static_cast<size_t>(cfg.max_tokens)) {
            std::cerr << "[text] prompt truncated to " << cfg.max_tokens << " tokens\n";
            toks.resize(static_cast<size_t>(cfg.max_tokens));
        }
        for (const auto& t : toks) {
            out.token_strings.push_back(t);
            out.tokens.push_back(token_id(normalize_token(t)));
        }
        out.embeddings = gather_rows(table, out.tokens);
        return out;
    }
};

}  // namespace sesa

#endif  // SESA_TEXT_HPP
