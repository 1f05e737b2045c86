#pragma once

// Flattening of multi-round conversations into one token sequence:
//
//   <s> <image> user : q1 assistant : a1 </s> user : q2 assistant : a2 </s>
//
// The visual prefix is prepended separately as embeddings; <image> only marks
// where it sits. Role names are ordinary vocabulary words.

#include "medseg/errors.hpp"
#include "medseg/protocol.hpp"
#include "medseg/tokenizer.hpp"

#include <string>
#include <vector>

namespace medseg {

struct EncodedConversation {
    std::vector<TokenId> ids;
    /// Next-token target per position, -1 where unsupervised. Only assistant
    /// answer tokens and their closing </s> are supervised.
    std::vector<int> targets;
    /// Text positions holding [SEG] in assistant answers, in order.
    std::vector<std::size_t> seg_positions;
};

namespace detail {

inline void push_role(const Tokenizer& tok, std::vector<TokenId>& ids, Role r) {
    ids.push_back(tok.vocab().id(to_string(r)));
    ids.push_back(tok.vocab().id(":"));
}

inline void push_text(const Tokenizer& tok, std::vector<TokenId>& ids, const GroundedText& content) {
    const auto enc = tok.encode(serialize_grounded(content));
    ids.insert(ids.end(), enc.begin(), enc.end());
}

} // namespace detail

inline EncodedConversation encode_conversation(const Tokenizer& tok, const Conversation& conv) {
    EncodedConversation out;
    out.ids = {token::bos, token::img};
    std::vector<bool> supervised(2, false);
    for (std::size_t i = 0; i < conv.turns.size(); ++i) {
        const auto& turn = conv.turns[i];
        const Role expected = i % 2 == 0 ? Role::user : Role::assistant;
        if (turn.role != expected) throw InvalidArgument("conversation turns must alternate user/assistant");
        detail::push_role(tok, out.ids, turn.role);
        supervised.resize(out.ids.size(), false);
        detail::push_text(tok, out.ids, turn.content);
        if (turn.role == Role::assistant) {
            out.ids.push_back(token::eos);
            supervised.resize(out.ids.size(), true);
        } else {
            supervised.resize(out.ids.size(), false);
        }
    }
    out.targets.assign(out.ids.size(), -1);
    for (std::size_t t = 0; t + 1 < out.ids.size(); ++t) {
        if (supervised[t + 1]) out.targets[t] = out.ids[t + 1];
    }
    for (std::size_t t = 0; t < out.ids.size(); ++t) {
        if (out.ids[t] == token::seg && supervised[t]) out.seg_positions.push_back(t);
    }
    return out;
}

/// Ids for a conversation ending in a user turn, followed by "assistant :"
/// so generation continues with the answer.
inline std::vector<TokenId> encode_prompt(const Tokenizer& tok, const Conversation& prefix) {
    if (prefix.turns.empty() || prefix.turns.back().role != Role::user) {
        throw InvalidArgument("prompt conversation must end with a user turn");
    }
    auto ids = encode_conversation(tok, prefix).ids;
    detail::push_role(tok, ids, Role::assistant);
    return ids;
}

} // namespace medseg
