#ifndef SESA_ENHANCE_HPP
#define SESA_ENHANCE_HPP

// Hand structure attention enhancement: tag hand-related prompt tokens,
// build the additive bias matrix, and apply biased cross-attention.

#include "sesa/common.hpp"
#include "sesa/tensor.hpp"
#include "sesa/text.hpp"

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace sesa {

enum class PosTag { VERB, NOUN, OTHER };

enum class IndexRule { Union, Intersection };

struct TaggedPrompt {
    std::vector<std::string> tokens;
    std::vector<PosTag> tags;
    std::set<int64_t> index_list;
};

struct BiasSpec {
    double alpha = 2.0;  // best-performing bias value
    std::set<int64_t> index_list;
};

// Dependency-free rule tagger: closed verb list plus "-ing" suffix heuristic,
// small noun lexicon, OTHER for the rest. Pluggable behind TaggedPrompt.
inline const std::set<std::string>& verb_lexicon() {
    static const std::set<std::string> verbs = {
        "hold",  "holds",  "held",   "shake", "shakes", "shook",  "wave",  "waves",
        "grab",  "grabs",  "grip",   "grips", "point",  "points", "reach", "reaches",
        "carry", "carries", "touch", "touches", "catch", "catches", "throw", "throws",
        "clap",  "claps",  "write",  "writes", "draw",  "draws",  "open",  "opens",
        "close", "closes", "lift",   "lifts", "pick",   "picks",  "pour",  "pours",
        "cut",   "cuts",   "eat",    "eats",  "drink",  "drinks", "smile", "smiles",
        "stand", "stands", "sit",    "sits",  "walk",   "walks",  "run",   "runs",
        "look",  "looks",  "appear", "appears", "wrap", "wraps",  "raise", "raises",
        "is",    "are",    "be",     "wear",  "wears",
    };
    return verbs;
}

inline const std::set<std::string>& noun_lexicon() {
    static const std::set<std::string> nouns = {
        "hand", "hands", "cup",  "person", "umbrella", "finger", "fingers", "palm",
        "fist", "beach", "table", "camera", "handle",  "arm",    "arms",    "wrist",
    };
    return nouns;
}

inline PosTag tag_token(const std::string& norm) {
    if (verb_lexicon().count(norm)) return PosTag::VERB;
    if (norm.size() > 4 && norm.compare(norm.size() - 3, 3, "ing") == 0) return PosTag::VERB;
    if (noun_lexicon().count(norm)) return PosTag::NOUN;
    return PosTag::OTHER;
}

// I = { i : tag_i == VERB } combined with { i : token_i contains "hand" }.
// Union by default; the intersection reading is selectable.
inline TaggedPrompt tag_hand_tokens(const std::string& prompt,
                                    IndexRule rule = IndexRule::Union) {
    TaggedPrompt out;
    out.tokens = tokenize_whitespace(prompt);
    if (out.tokens.empty()) throw EmptyPrompt("tag_hand_tokens on empty prompt");
    for (size_t i = 0; i < out.tokens.size(); i++) {
        std::string norm = normalize_token(out.tokens[i]);
        PosTag tag = tag_token(norm);
        out.tags.push_back(tag);
        bool is_verb = tag == PosTag::VERB;
        bool has_hand = norm.find("hand") != std::string::npos;
        bool in = (rule == IndexRule::Union) ? (is_verb || has_hand) : (is_verb && has_hand);
        if (in) out.index_list.insert(static_cast<int64_t>(i));
    }
    return out;
}

// B[q,k] = alpha if k in I else 0, for every query row
inline Tensor build_bias(const BiasSpec& spec, int64_t q_count, int64_t k_count) {
    for (int64_t i : spec.index_list)
        if (i < 0 || i >= k_count)
            throw IndexOutOfRange("bias index " + std::to_string(i) + " >= key count " +
                                  std::to_string(k_count));
    std::vector<double> d(static_cast<size_t>(q_count * k_count), 0.0);
    for (int64_t q = 0; q < q_count; q++)
        for (int64_t k : spec.index_list) d[static_cast<size_t>(q * k_count + k)] = spec.alpha;
    return Tensor(Shape{q_count, k_count}, std::move(d));
}

struct CrossAttentionWeights {
    Tensor wq;  // [C x d]
    Tensor wk;  // [d_text x d]
    Tensor wv;  // [d_text x d]
};

struct CrossAttentionResult {
    Tensor output;  // [q x d]
    Tensor map;     // M_cross [q x L]
};

// M_cross = softmax(Q K^T / sqrt(d) + B); output = M_cross V.
// Q from the layer input, K and V from the text embedding.
inline CrossAttentionResult biased_cross_attention(const Tensor& phi, const TextEmbedding& c_t,
                                                   const CrossAttentionWeights& w,
                                                   const std::optional<BiasSpec>& spec) {
    if (phi.rank() != 2) throw ShapeMismatch("cross attention input must be [q x C]");
    Tensor q = matmul(phi, w.wq);
    Tensor k = matmul(c_t.embeddings, w.wk);
    Tensor v = matmul(c_t.embeddings, w.wv);
    double scale = 1.0 / std::sqrt(static_cast<double>(w.wk.dim(1)));
    Tensor logits = mul_scalar(matmul(q, transpose(k)), scale);
    std::optional<Tensor> bias;
    if (spec && spec->alpha != 0.0 && !spec->index_list.empty())
        bias = build_bias(*spec, logits.dim(0), logits.dim(1));
    CrossAttentionResult res;
    res.map = softmax_rows(logits, bias);
    res.output = matmul(res.map, v);
    return res;
}

// mean over queries of the attention mass on the tagged key set
inline double attention_mass(const Tensor& m_cross, const std::set<int64_t>& index_list) {
    if (m_cross.rank() != 2) throw ShapeMismatch("attention_mass expects [q x k]");
    const int64_t q = m_cross.dim(0), k = m_cross.dim(1);
    for (int64_t i : index_list)
        if (i < 0 || i >= k) throw IndexOutOfRange("attention_mass index " + std::to_string(i));
    if (index_list.empty() || q == 0) return 0.0;
    double acc = 0.0;
    for (int64_t r = 0; r < q; r++)
        for (int64_t c : index_list) acc += m_cross.at(r * k + c);
    return acc / static_cast<double>(q);
}

}  // namespace sesa

#endif  // SESA_ENHANCE_HPP
