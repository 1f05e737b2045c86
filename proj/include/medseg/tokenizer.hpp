#pragma once

// Closed-vocabulary word tokenizer. Protocol markers are atomic tokens with
// fixed ids; everything else is lowercased and split on whitespace, with
// punctuation emitted as standalone tokens.

#include "medseg/errors.hpp"
#include "medseg/protocol.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace medseg {

using TokenId = int;

namespace token {
inline constexpr TokenId bos = 0;
inline constexpr TokenId eos = 1;
inline constexpr TokenId pad = 2;
inline constexpr TokenId unk = 3;
inline constexpr TokenId img = 4;
inline constexpr TokenId p_open = 5;
inline constexpr TokenId p_close = 6;
inline constexpr TokenId seg = 7;
inline constexpr TokenId num_special = 8;

inline constexpr std::array<std::string_view, num_special> special_names = {
    "<s>", "</s>", "<pad>", "<unk>", "<image>", "<p>", "</p>", "[SEG]"};
} // namespace token

/// Words known to every vocabulary: chat template words, the synthetic and
/// annotation-pipeline phrasing, and a general radiology lexicon.
inline const std::vector<std::string>& base_lexicon() {
    static const std::vector<std::string> words = {
        // template and punctuation
        "user", "assistant", ":", ",", ".", "?", "!", ";", "(", ")",
        "please", "segment", "the", "in", "medical", "image", "sure", "it", "is", "what", "possible",
        "conditions", "are", "indicated", "by", "this", "examination", "shows", "a", "an", "and", "no",
        "abnormality", "found", "yes", "there", "any", "lesion", "lesions", "of", "on", "at", "with",
        "to", "from", "for", "as", "be", "can", "could", "may", "might", "which", "where", "how", "many",
        "one", "two", "three", "four", "left", "right", "upper", "lower", "middle", "central", "side",
        "region", "regions", "area", "areas", "visible", "seen", "appears", "appear", "located",
        "describe", "detail", "details", "naming", "every", "each", "all", "finding", "findings",
        "diagnosis", "diagnostic", "describing", "caption", "previous", "was", "rejected", "reason",
        "revised", "other", "than", "identify", "infected", "not", "noted", "present", "absent",
        "normal", "abnormal", "suspicious", "benign", "malignant", "small", "large", "round", "oval",
        "irregular", "smooth", "bright", "dark", "dense", "hypodense", "hyperdense", "well", "defined",
        "ill", "margin", "margins", "size", "shape", "density", "intensity", "texture", "scan", "ct",
        "mri", "x-ray", "ultrasound", "chest", "lung", "lungs", "liver", "kidney", "spleen",
        "pancreas", "stomach", "heart", "brain", "bone", "abdomen", "abdominal", "organ", "organs",
        "tissue", "mass", "nodule", "nodules", "opacity", "opacities", "cyst", "cysts", "tumor",
        "tumors", "polyp", "effusion", "consolidation", "infection", "covid-19", "ground", "glass",
        "pneumonia", "fibrosis", "calcification", "edema", "hemorrhage", "fracture", "patient",
        "doctor", "physician", "follow-up", "recommended", "further", "evaluation", "likely",
        "consistent", "suggest", "suggests", "suggesting", "indicates", "indicate", "evidence",
        "structure", "structures", "boundary", "contains", "containing", "single", "multiple",
        "both", "near", "adjacent", "within", "inside", "outside", "also", "only", "most", "more",
        "less", "than", "show", "showing", "imaging", "study", "view", "slice", "pathological",
        "anatomical", "clinical", "assessment", "condition", "disease", "some", "has", "have",
        "does", "do", "i", "you", "we", "its", "their", "these", "those", "into", "onto", "about",
        "background", "foreground", "mask", "masks", "highlighted", "marked", "corresponding",
    };
    return words;
}

inline const std::vector<std::string>& default_lesion_classes() {
    static const std::vector<std::string> classes = {"nodule", "opacity", "cyst", "tumor"};
    return classes;
}

class Vocab {
  public:
    /// Deterministic vocabulary: specials at 0..7, then the sorted union of
    /// the base lexicon and `extra_words`.
    static Vocab build(const std::vector<std::string>& extra_words = default_lesion_classes()) {
        std::set<std::string> words(base_lexicon().begin(), base_lexicon().end());
        for (const auto& w : extra_words) {
            words.insert(lowercase(w));
        }
        Vocab v;
        for (auto name : token::special_names) v.id_to_token_.emplace_back(name);
        for (const auto& w : words) {
            if (is_special_name(w)) continue;
            v.word_to_id_.emplace(w, static_cast<TokenId>(v.id_to_token_.size()));
            v.id_to_token_.push_back(w);
        }
        return v;
    }

    static Vocab from_json(const nlohmann::json& j) {
        std::vector<std::pair<TokenId, std::string>> entries;
        for (auto it = j.begin(); it != j.end(); ++it) {
            entries.emplace_back(it.value().get<TokenId>(), it.key());
        }
        std::sort(entries.begin(), entries.end());
        Vocab v;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].first != static_cast<TokenId>(i)) {
                throw FormatError("vocabulary ids are not dense at id " + std::to_string(i));
            }
            if (i < static_cast<std::size_t>(token::num_special)) {
                if (entries[i].second != token::special_names[i]) {
                    throw FormatError("special token " + std::to_string(i) + " must be " +
                                      std::string(token::special_names[i]));
                }
            } else {
                v.word_to_id_.emplace(entries[i].second, entries[i].first);
            }
            v.id_to_token_.push_back(entries[i].second);
        }
        if (v.id_to_token_.size() < static_cast<std::size_t>(token::num_special)) {
            throw FormatError("vocabulary is missing special tokens");
        }
        return v;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (std::size_t i = 0; i < id_to_token_.size(); ++i) j[id_to_token_[i]] = static_cast<TokenId>(i);
        return j;
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    /// Id of an ordinary word; special tokens are not reachable this way.
    TokenId id(std::string_view word) const {
        auto it = word_to_id_.find(std::string(word));
        return it == word_to_id_.end() ? token::unk : it->second;
    }

    bool contains(std::string_view word) const { return word_to_id_.count(std::string(word)) > 0; }

    const std::string& token_string(TokenId id) const {
        if (id < 0 || id >= size()) {
            throw IdOutOfRange("token id " + std::to_string(id) + " outside [0," + std::to_string(size()) + ")");
        }
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.id_to_token_ == b.id_to_token_; }

  private:
    static bool is_special_name(std::string_view w) {
        return std::find(token::special_names.begin(), token::special_names.end(), w) != token::special_names.end();
    }
    static std::string lowercase(std::string_view s) {
        std::string out(s);
        std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
        return out;
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, TokenId> word_to_id_;
};

class Tokenizer {
  public:
    explicit Tokenizer(Vocab vocab) : vocab_(std::move(vocab)) {}

    const Vocab& vocab() const { return vocab_; }

    /// Protocol markers become single ids; no BOS/EOS is added.
    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> ids;
        std::string pending;
        auto flush = [&] {
            encode_words(pending, ids);
            pending.clear();
        };
        std::size_t i = 0;
        while (i < text.size()) {
            if (text.substr(i, kSegMarker.size()) == kSegMarker) {
                flush();
                ids.push_back(token::seg);
                i += kSegMarker.size();
            } else if (text.substr(i, kPhraseClose.size()) == kPhraseClose) {
                flush();
                ids.push_back(token::p_close);
                i += kPhraseClose.size();
            } else if (text.substr(i, kPhraseOpen.size()) == kPhraseOpen) {
                flush();
                ids.push_back(token::p_open);
                i += kPhraseOpen.size();
            } else {
                pending.push_back(text[i]);
                ++i;
            }
        }
        flush();
        return ids;
    }

    /// Canonical space-joined form.
    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out.push_back(' ');
            out += vocab_.token_string(ids[i]);
        }
        return out;
    }

    /// Human-facing form: punctuation attached to the preceding word and
    /// sentence starts capitalised. Encodes back to the same ids.
    std::string display(std::span<const TokenId> ids) const {
        std::string out;
        bool sentence_start = true;
        bool inside_phrase = false;
        bool glue_next = false;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::string tok = vocab_.token_string(ids[i]);
            const bool closing_punct = tok.size() == 1 && std::string_view(",.?!;:)").find(tok[0]) != std::string_view::npos;
            if (!out.empty() && !closing_punct && !glue_next) out.push_back(' ');
            glue_next = tok == "(";
            if (ids[i] == token::p_open) inside_phrase = true;
            if (ids[i] == token::p_close) inside_phrase = false;
            if (sentence_start && ids[i] >= token::num_special && !inside_phrase && !closing_punct && !tok.empty()) {
                tok[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(tok[0])));
                sentence_start = false;
            } else if (ids[i] < token::num_special && ids[i] != token::p_close) {
                sentence_start = false;
            }
            if (tok == "." || tok == "?" || tok == "!") sentence_start = true;
            out += tok;
        }
        return out;
    }

  private:
    static bool is_punct(char c) { return std::string_view(",.?!;:()").find(c) != std::string_view::npos; }

    void encode_words(const std::string& text, std::vector<TokenId>& ids) const {
        std::string word;
        auto emit = [&] {
            if (!word.empty()) {
                ids.push_back(vocab_.id(word));
                word.clear();
            }
        };
        for (char ch : text) {
            const auto c = static_cast<unsigned char>(ch);
            if (std::isspace(c)) {
                emit();
            } else if (is_punct(ch)) {
                emit();
                ids.push_back(vocab_.id(std::string(1, ch)));
            } else {
                word.push_back(static_cast<char>(std::tolower(c)));
            }
        }
        emit();
    }

    Vocab vocab_;
};

inline void save_vocab(const Vocab& v, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << v.to_json().dump(1) << '\n';
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    return Vocab::from_json(nlohmann::json::parse(f));
}

} // namespace medseg
