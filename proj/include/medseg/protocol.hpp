#pragma once

// Grounded-text wire format, conversations and dataset samples.
//
// An assistant turn is a sequence of plain text and segmentation slots. A slot
// is written either as `<p> phrase </p> [SEG]` or as a bare `[SEG]`; each slot
// is paired with exactly one mask.

#include "medseg/errors.hpp"
#include "medseg/grid.hpp"

#include <cctype>
#include <cstddef>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace medseg {

inline constexpr std::string_view kPhraseOpen = "<p>";
inline constexpr std::string_view kPhraseClose = "</p>";
inline constexpr std::string_view kSegMarker = "[SEG]";

struct PlainText {
    std::string text;
    friend bool operator==(const PlainText&, const PlainText&) = default;
};

struct SegSpan {
    std::string phrase; // empty for a bare slot
    std::size_t slot_index = 0;
    friend bool operator==(const SegSpan&, const SegSpan&) = default;
};

using Chunk = std::variant<PlainText, SegSpan>;

struct GroundedText {
    std::vector<Chunk> chunks;

    std::size_t slot_count() const {
        std::size_t n = 0;
        for (const auto& c : chunks) {
            n += std::holds_alternative<SegSpan>(c) ? 1 : 0;
        }
        return n;
    }

    std::vector<SegSpan> spans() const {
        std::vector<SegSpan> out;
        for (const auto& c : chunks) {
            if (const auto* s = std::get_if<SegSpan>(&c)) {
                out.push_back(*s);
            }
        }
        return out;
    }

    friend bool operator==(const GroundedText&, const GroundedText&) = default;
};

enum class ParseMode { strict, lenient };

namespace detail {

inline bool starts_at(std::string_view text, std::size_t pos, std::string_view token) {
    return text.substr(pos, token.size()) == token;
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline bool contains_marker(std::string_view s) {
    return s.find(kPhraseOpen) != std::string_view::npos || s.find(kPhraseClose) != std::string_view::npos ||
           s.find(kSegMarker) != std::string_view::npos;
}

} // namespace detail

/// Parses one assistant turn. Strict mode rejects unbalanced or nested phrase
/// markers; lenient mode keeps them as plain text.
inline GroundedText parse_grounded(std::string_view text, ParseMode mode = ParseMode::strict) {
    GroundedText out;
    std::string plain;
    std::size_t slot = 0;

    auto flush = [&] {
        if (!plain.empty()) {
            out.chunks.emplace_back(PlainText{std::move(plain)});
            plain.clear();
        }
    };
    auto fail_or_keep = [&](std::size_t& i, std::string_view marker, const std::string& why) {
        if (mode == ParseMode::strict) {
            throw MalformedMarkup(why + " at offset " + std::to_string(i));
        }
        plain.append(marker);
        i += marker.size();
    };

    std::size_t i = 0;
    while (i < text.size()) {
        if (detail::starts_at(text, i, kSegMarker)) {
            flush();
            out.chunks.emplace_back(SegSpan{"", slot++});
            i += kSegMarker.size();
        } else if (detail::starts_at(text, i, kPhraseOpen)) {
            const std::size_t body = i + kPhraseOpen.size();
            const std::size_t close = text.find(kPhraseClose, body);
            if (close == std::string_view::npos) {
                fail_or_keep(i, kPhraseOpen, "<p> without matching </p>");
                continue;
            }
            const std::string_view inner = text.substr(body, close - body);
            if (inner.find(kPhraseOpen) != std::string_view::npos) {
                fail_or_keep(i, kPhraseOpen, "nested <p>");
                continue;
            }
            if (inner.find(kSegMarker) != std::string_view::npos) {
                fail_or_keep(i, kPhraseOpen, "[SEG] inside phrase");
                continue;
            }
            std::size_t after = close + kPhraseClose.size();
            while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
            if (!detail::starts_at(text, after, kSegMarker)) {
                fail_or_keep(i, kPhraseOpen, "phrase not followed by [SEG]");
                continue;
            }
            flush();
            out.chunks.emplace_back(SegSpan{detail::trim(inner), slot++});
            i = after + kSegMarker.size();
        } else if (detail::starts_at(text, i, kPhraseClose)) {
            fail_or_keep(i, kPhraseClose, "</p> without opener");
        } else {
            plain.push_back(text[i]);
            ++i;
        }
    }
    flush();
    return out;
}

/// Canonical serialization; inverse of parse_grounded for canonical values.
inline std::string serialize_grounded(const GroundedText& gt) {
    std::string out;
    for (const auto& chunk : gt.chunks) {
        if (const auto* p = std::get_if<PlainText>(&chunk)) {
            out += p->text;
        } else {
            const auto& span = std::get<SegSpan>(chunk);
            if (!span.phrase.empty()) {
                out += "<p> ";
                out += span.phrase;
                out += " </p> ";
            }
            out += kSegMarker;
        }
    }
    return out;
}

/// Text with markers removed and phrases kept inline.
inline std::string plain_text(const GroundedText& gt) {
    std::string out;
    for (const auto& chunk : gt.chunks) {
        if (const auto* p = std::get_if<PlainText>(&chunk)) {
            out += p->text;
        } else if (const auto& span = std::get<SegSpan>(chunk); !span.phrase.empty()) {
            out += ' ';
            out += span.phrase;
            out += ' ';
        }
    }
    return out;
}

/// True when the value is in the canonical form that round-trips exactly:
/// slot indices dense in order, no empty or adjacent plain chunks, phrases
/// trimmed and free of markers.
inline bool is_canonical(const GroundedText& gt) {
    std::size_t slot = 0;
    bool prev_plain = false;
    for (const auto& chunk : gt.chunks) {
        if (const auto* p = std::get_if<PlainText>(&chunk)) {
            if (p->text.empty() || prev_plain || detail::contains_marker(p->text)) return false;
            prev_plain = true;
        } else {
            const auto& s = std::get<SegSpan>(chunk);
            if (s.slot_index != slot++) return false;
            if (detail::trim(s.phrase) != s.phrase || detail::contains_marker(s.phrase)) return false;
            prev_plain = false;
        }
    }
    return true;
}

enum class Role { user, assistant };

inline std::string_view to_string(Role r) { return r == Role::user ? "user" : "assistant"; }

inline Role role_from_string(std::string_view s) {
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    throw FormatError("unknown role '" + std::string(s) + "'");
}

struct Turn {
    Role role = Role::user;
    GroundedText content;
    friend bool operator==(const Turn&, const Turn&) = default;
};

struct Conversation {
    std::vector<Turn> turns;
    friend bool operator==(const Conversation&, const Conversation&) = default;
};

inline Turn make_turn(Role role, std::string_view text) { return Turn{role, parse_grounded(text)}; }

/// Total slots across assistant turns.
inline std::size_t count_seg_slots(const Conversation& c) {
    std::size_t n = 0;
    for (const auto& t : c.turns) {
        if (t.role == Role::assistant) n += t.content.slot_count();
    }
    return n;
}

struct Sample {
    std::string image_id;
    ImageGrid image;
    std::vector<BinaryMask> masks; // global slot order
    Conversation conversation;
    std::vector<std::string> class_names; // parallel to masks
};

enum class ViolationKind {
    EmptyConversation,
    RoleOrder,
    UserTurnHasSlots,
    SlotMaskCountMismatch,
    ClassNameCountMismatch,
    ShapeMismatch,
    NonBinaryMask,
    IntensityOutOfRange,
};

inline std::string_view to_string(ViolationKind k) {
    switch (k) {
    case ViolationKind::EmptyConversation: return "EmptyConversation";
    case ViolationKind::RoleOrder: return "RoleOrder";
    case ViolationKind::UserTurnHasSlots: return "UserTurnHasSlots";
    case ViolationKind::SlotMaskCountMismatch: return "SlotMaskCountMismatch";
    case ViolationKind::ClassNameCountMismatch: return "ClassNameCountMismatch";
    case ViolationKind::ShapeMismatch: return "ShapeMismatch";
    case ViolationKind::NonBinaryMask: return "NonBinaryMask";
    case ViolationKind::IntensityOutOfRange: return "IntensityOutOfRange";
    }
    return "?";
}

struct Violation {
    ViolationKind kind;
    std::string location;
    std::string message;
};

inline std::vector<Violation> validate_sample(const Sample& s) {
    std::vector<Violation> out;
    const std::string where = "sample " + s.image_id;
    const auto& turns = s.conversation.turns;

    if (turns.empty()) {
        out.push_back({ViolationKind::EmptyConversation, where, "conversation has no turns"});
    }
    for (std::size_t i = 0; i < turns.size(); ++i) {
        const Role expected = i % 2 == 0 ? Role::user : Role::assistant;
        if (turns[i].role != expected) {
            out.push_back({ViolationKind::RoleOrder, where + " turn " + std::to_string(i),
                           "expected " + std::string(to_string(expected))});
        }
        if (turns[i].role == Role::user && turns[i].content.slot_count() > 0) {
            out.push_back({ViolationKind::UserTurnHasSlots, where + " turn " + std::to_string(i),
                           "user turn contains [SEG]"});
        }
    }

    const std::size_t slots = count_seg_slots(s.conversation);
    if (slots != s.masks.size()) {
        out.push_back({ViolationKind::SlotMaskCountMismatch, where,
                       std::to_string(slots) + " slots vs " + std::to_string(s.masks.size()) + " masks"});
    }
    if (s.class_names.size() != s.masks.size()) {
        out.push_back({ViolationKind::ClassNameCountMismatch, where,
                       std::to_string(s.class_names.size()) + " class names vs " + std::to_string(s.masks.size()) +
                           " masks"});
    }
    for (std::size_t m = 0; m < s.masks.size(); ++m) {
        const auto& mask = s.masks[m];
        if (!mask.same_shape(s.image)) {
            out.push_back({ViolationKind::ShapeMismatch, where + " mask " + std::to_string(m),
                           std::to_string(mask.height) + "x" + std::to_string(mask.width) + " vs image " +
                               std::to_string(s.image.height) + "x" + std::to_string(s.image.width)});
        }
        if (!is_binary(mask)) {
            out.push_back({ViolationKind::NonBinaryMask, where + " mask " + std::to_string(m), "values outside {0,1}"});
        }
    }
    for (float v : s.image.values) {
        if (!(v >= 0.0f && v <= 1.0f)) {
            out.push_back({ViolationKind::IntensityOutOfRange, where, "image intensity outside [0,1]"});
            break;
        }
    }
    return out;
}

} // namespace medseg
