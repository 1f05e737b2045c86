#pragma once

// Value-level model operations: greedy decoding and the full
// image + conversation -> grounded text + masks prediction.

#include "medseg/chat.hpp"
#include "medseg/model.hpp"
#include "medseg/protocol.hpp"

#include <span>
#include <string>
#include <vector>

namespace medseg {

template <class T>
struct VisualTokens {
    ag::Matrix<T> tokens; // num_patches x d_vision
};

template <class T>
struct ProjectedTokens {
    ag::Matrix<T> tokens; // num_patches x d_model
};

template <class T>
struct HiddenTokens {
    ag::Matrix<T> states; // seq_len x d_model
    ag::Matrix<T> logits; // seq_len x vocab_size
    Eigen::Index num_patches = 0;
};

template <class T>
VisualTokens<T> encode_image(const Model<T>& m, const ImageGrid& image) {
    ag::Graph<T> g(m.params());
    return {g.value(m.encode_image(g, image))};
}

template <class T>
ProjectedTokens<T> project_visual(const Model<T>& m, const VisualTokens<T>& s_v) {
    ag::Graph<T> g(m.params());
    return {g.value(m.project_visual(g, g.input(s_v.tokens)))};
}

template <class T>
HiddenTokens<T> llm_forward(const Model<T>& m, const ProjectedTokens<T>& alpha_v, std::span<const TokenId> ids) {
    ag::Graph<T> g(m.params());
    auto states = m.llm_states(g, g.input(alpha_v.tokens), ids);
    auto logits = m.lm_logits(g, states);
    return {g.value(states), g.value(logits), alpha_v.tokens.rows()};
}

/// State rows at every [SEG] id, in textual order.
template <class T>
ag::Matrix<T> extract_seg_states(const HiddenTokens<T>& h, std::span<const TokenId> ids) {
    std::vector<Eigen::Index> rows;
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] == token::seg) rows.push_back(h.num_patches + static_cast<Eigen::Index>(t));
    }
    ag::Matrix<T> out(static_cast<Eigen::Index>(rows.size()), h.states.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = h.states.row(rows[i]);
    return out;
}

template <class T>
ag::Matrix<T> project_prompt(const Model<T>& m, const ag::Matrix<T>& states) {
    ag::Graph<T> g(m.params());
    return g.value(m.project_prompt(g, g.input(states)));
}

/// Grounding features as plain values, for inspection.
template <class T>
ag::Matrix<T> ground_encode(const Model<T>& m, const ImageGrid& image) {
    ag::Graph<T> g(m.params());
    return g.value(m.ground_encode(g, image).coarse);
}

template <class T>
LogitMask decode_mask(const Model<T>& m, const ImageGrid& image, const ag::Matrix<T>& prompt) {
    ag::Graph<T> g(m.params());
    auto f = m.ground_encode(g, image);
    const auto& v = g.value(m.decode_mask(g, f, g.input(prompt)));
    LogitMask out(image.height, image.width);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = static_cast<float>(v(static_cast<Eigen::Index>(i), 0));
    return out;
}

template <class T>
ag::Matrix<T> visual_prefix(const Model<T>& m, const ImageGrid& image) {
    ag::Graph<T> g(m.params());
    return g.value(m.project_visual(g, m.encode_image(g, image)));
}

struct Generation {
    std::vector<TokenId> ids; // without the closing </s>
    bool finished = false;    // </s> was produced within the budget
};

/// Greedy decoding; ties go to the lowest id. Stops at </s>, at the token
/// budget, or when the sequence would exceed max_seq.
template <class T>
Generation generate_from_prefix(const Model<T>& m, const ag::Matrix<T>& alpha_v, std::span<const TokenId> prefix,
                                int max_new_tokens) {
    const int max_seq = m.config().gcu.max_seq;
    if (alpha_v.rows() + static_cast<Eigen::Index>(prefix.size()) > max_seq) {
        throw SequenceTooLong("prompt of " + std::to_string(alpha_v.rows() + static_cast<Eigen::Index>(prefix.size())) +
                              " positions exceeds max_seq " + std::to_string(max_seq));
    }
    Generation out;
    std::vector<TokenId> seq(prefix.begin(), prefix.end());
    for (int step = 0; step < max_new_tokens; ++step) {
        if (alpha_v.rows() + static_cast<Eigen::Index>(seq.size()) > max_seq) break;
        ag::Graph<T> g(m.params());
        auto states = m.llm_states(g, g.input(alpha_v), seq);
        auto last = g.slice_rows(states, g.rows(states) - 1, 1);
        const auto& logits = g.value(m.lm_logits(g, last));
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < logits.cols(); ++j) {
            if (logits(0, j) > logits(0, best)) best = j;
        }
        if (best == token::eos) {
            out.finished = true;
            break;
        }
        out.ids.push_back(static_cast<TokenId>(best));
        seq.push_back(static_cast<TokenId>(best));
    }
    return out;
}

template <class T>
std::vector<TokenId> generate(const Model<T>& m, const ImageGrid& image, std::span<const TokenId> prefix, int max_new_tokens) {
    if (max_new_tokens <= 0) return {};
    return generate_from_prefix(m, visual_prefix(m, image), prefix, max_new_tokens).ids;
}

struct Prediction {
    std::vector<TokenId> ids;
    std::string text;
    GroundedText grounded;
    std::vector<LogitMask> logits;
    std::vector<BinaryMask> masks;
};

inline constexpr int kDefaultMaxNewTokens = 64;

/// generate -> display text -> strict parse -> one decoded mask per [SEG].
/// `prefix` must end with the user turn being answered.
template <class T>
Prediction predict(const Model<T>& m, const Tokenizer& tok, const ImageGrid& image, const Conversation& prefix,
                   int max_new_tokens = kDefaultMaxNewTokens) {
    const auto prompt = encode_prompt(tok, prefix);
    const auto alpha = visual_prefix(m, image);
    auto gen = generate_from_prefix(m, alpha, prompt, max_new_tokens);
    if (!gen.finished) {
        throw GenerationBudgetExceeded("no </s> within " + std::to_string(max_new_tokens) + " new tokens");
    }
    Prediction out;
    out.ids = std::move(gen.ids);
    out.text = tok.display(out.ids);
    out.grounded = parse_grounded(out.text);

    std::vector<Eigen::Index> rows;
    for (std::size_t t = 0; t < out.ids.size(); ++t) {
        if (out.ids[t] == token::seg) rows.push_back(alpha.rows() + static_cast<Eigen::Index>(prompt.size() + t));
    }
    if (rows.size() != out.grounded.slot_count()) {
        throw MalformedMarkup("generated text has " + std::to_string(rows.size()) + " [SEG] ids but " +
                              std::to_string(out.grounded.slot_count()) + " parsed slots");
    }
    if (rows.empty()) return out;

    std::vector<TokenId> full = prompt;
    full.insert(full.end(), out.ids.begin(), out.ids.end());
    ag::Graph<T> g(m.params());
    auto states = m.llm_states(g, g.input(alpha), full);
    auto prompts = m.project_prompt(g, g.gather_rows(states, rows));
    auto f = m.ground_encode(g, image);
    for (Eigen::Index k = 0; k < g.rows(prompts); ++k) {
        const auto& v = g.value(m.decode_mask(g, f, g.slice_rows(prompts, k, 1)));
        LogitMask lm(image.height, image.width);
        for (std::size_t i = 0; i < lm.values.size(); ++i) lm.values[i] = static_cast<float>(v(static_cast<Eigen::Index>(i), 0));
        out.masks.push_back(binarize(lm));
        out.logits.push_back(std::move(lm));
    }
    return out;
}

} // namespace medseg
