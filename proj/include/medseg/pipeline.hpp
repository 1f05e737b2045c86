#pragma once

// Three-stage annotation pipeline: caption generation with per-dataset
// prefixes, review with one regeneration round and manual escalation, then
// conversation generation validated against the record's masks.
//
// Every state change is an audit event applied through apply_event, so a
// record is exactly the fold of its audit trail. The same function drives
// live runs and replay; transitions it does not list are rejected.

#include "medseg/codec.hpp"
#include "medseg/dataset.hpp"
#include "medseg/errors.hpp"
#include "medseg/fileio.hpp"
#include "medseg/protocol.hpp"
#include "medseg/synth.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace medseg::pipeline {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

enum class Stage { caption, refine, conversation, done };
enum class Status { pending, generated, approved, rejected_once, regenerated, manual_required, manual_done };

inline std::string_view to_string(Stage s) {
    switch (s) {
    case Stage::caption: return "caption";
    case Stage::refine: return "refine";
    case Stage::conversation: return "conversation";
    case Stage::done: return "done";
    }
    return "?";
}

inline std::string_view to_string(Status s) {
    switch (s) {
    case Status::pending: return "pending";
    case Status::generated: return "generated";
    case Status::approved: return "approved";
    case Status::rejected_once: return "rejected_once";
    case Status::regenerated: return "regenerated";
    case Status::manual_required: return "manual_required";
    case Status::manual_done: return "manual_done";
    }
    return "?";
}

inline Stage stage_from_string(std::string_view s) {
    for (auto v : {Stage::caption, Stage::refine, Stage::conversation, Stage::done}) {
        if (to_string(v) == s) return v;
    }
    throw CorruptState("unknown stage '" + std::string(s) + "'");
}

inline Status status_from_string(std::string_view s) {
    for (auto v : {Status::pending, Status::generated, Status::approved, Status::rejected_once, Status::regenerated,
                   Status::manual_required, Status::manual_done}) {
        if (to_string(v) == s) return v;
    }
    throw CorruptState("unknown status '" + std::string(s) + "'");
}

inline constexpr int kMaxAttempts = 2;

inline const std::string kCovidCtPrefix =
    "Imagine you are a professional AI chest CT imaging assistant. The doctor needs to diagnose COVID-19, and you are "
    "tasked with analyzing the image to provide detailed, effective, and accurate diagnostic advice.";
inline const std::string kDefaultPrefix =
    "Imagine you are a professional AI medical imaging assistant. You are tasked with analyzing the image to provide "
    "detailed, effective, and accurate diagnostic advice.";
inline const std::string kDefaultPrompt = "Describe the findings in this image and name every lesion you can see.";

struct AuditEntry {
    std::int64_t timestamp = 0;
    std::string event;
    std::string actor;
    ojson data = ojson::object();

    friend bool operator==(const AuditEntry&, const AuditEntry&) = default;
};

struct AnnotationRecord {
    std::string image_id;
    std::string source;
    std::string image; // relative to the input directory
    std::vector<std::string> masks;
    std::vector<std::string> class_names;
    Stage stage = Stage::caption;
    Status status = Status::pending;
    std::string caption;
    int attempts = 0;
    std::string last_reason;
    std::optional<Conversation> conversation;
    std::vector<AuditEntry> audit;

    bool terminal() const { return stage == Stage::done || status == Status::manual_required; }

    friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

// ---- transitions ------------------------------------------------------------

namespace detail {

inline void require(bool ok, const AnnotationRecord& r, const std::string& event) {
    if (!ok) {
        throw CorruptState("record " + r.image_id + ": event '" + event + "' is not allowed in stage " +
                           std::string(to_string(r.stage)) + " / status " + std::string(to_string(r.status)));
    }
}

inline std::string str(const ojson& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_string()) throw CorruptState(std::string("audit data lacks '") + key + "'");
    return j.at(key).get<std::string>();
}

} // namespace detail

/// Applies one event and appends it to the record's audit trail.
inline void apply_event(AnnotationRecord& r, std::string image_id, AuditEntry e) {
    using detail::require;
    const auto& d = e.data;
    const std::string& ev = e.event;
    if (ev == "ingested") {
        require(r.audit.empty(), r, ev);
        r = AnnotationRecord{};
        r.image_id = image_id;
        r.source = detail::str(d, "source");
        r.image = detail::str(d, "image");
        try {
            r.masks = d.at("masks").get<std::vector<std::string>>();
            r.class_names = d.at("class_names").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& x) {
            throw CorruptState(std::string("ingested event: ") + x.what());
        }
    } else if (ev == "annotator_unavailable" || ev == "reviewer_unavailable") {
        require(!r.audit.empty() && !r.terminal(), r, ev);
    } else if (ev == "caption_generated") {
        require(r.stage == Stage::caption && r.status == Status::pending, r, ev);
        r.caption = detail::str(d, "caption");
        r.attempts = 1;
        r.status = Status::generated;
        r.stage = Stage::refine;
    } else if (ev == "approved") {
        require(r.stage == Stage::refine && (r.status == Status::generated || r.status == Status::regenerated), r, ev);
        r.status = Status::approved;
        r.stage = Stage::conversation;
    } else if (ev == "rejected") {
        require(r.stage == Stage::refine && (r.status == Status::generated || r.status == Status::regenerated), r, ev);
        r.last_reason = detail::str(d, "reason");
        r.status = r.status == Status::generated ? Status::rejected_once : Status::manual_required;
    } else if (ev == "caption_regenerated") {
        require(r.stage == Stage::refine && r.status == Status::rejected_once && r.attempts < kMaxAttempts, r, ev);
        r.caption = detail::str(d, "caption");
        r.attempts += 1;
        r.status = Status::regenerated;
    } else if (ev == "manual_caption") {
        require(r.stage == Stage::refine && r.status == Status::manual_required, r, ev);
        r.caption = detail::str(d, "caption");
        r.status = Status::manual_done;
        r.stage = Stage::conversation;
    } else if (ev == "conversation_generated" || ev == "validation_failed") {
        require(r.stage == Stage::conversation && (r.status == Status::approved || r.status == Status::manual_done), r,
                ev);
        try {
            r.conversation = conversation_from_json(d.at("conversation"));
        } catch (const nlohmann::json::exception& x) {
            throw CorruptState(std::string("conversation in audit: ") + x.what());
        } catch (const Error& x) {
            throw CorruptState(std::string("conversation in audit: ") + x.what());
        }
        if (ev == "conversation_generated") {
            r.stage = Stage::done;
        } else {
            r.status = Status::manual_required;
        }
    } else {
        throw CorruptState("unknown audit event '" + ev + "'");
    }
    r.audit.push_back(std::move(e));
}

/// Structural checks on a loaded record.
inline void check_invariants(const AnnotationRecord& r) {
    auto fail = [&](const std::string& m) { throw CorruptState("record " + r.image_id + ": " + m); };
    if (r.attempts < 0 || r.attempts > kMaxAttempts) fail("attempts out of range");
    if (r.stage == Stage::refine && r.status == Status::manual_required && r.attempts != kMaxAttempts) {
        fail("manual review requires two rejected attempts");
    }
    if (r.stage == Stage::done && (!r.conversation || r.conversation->turns.empty())) fail("done without conversation");
    if (r.stage == Stage::done && r.status == Status::manual_required) fail("both done and manual_required");
    if (r.audit.empty()) fail("empty audit trail");
}

/// Rebuilds a record from its audit trail alone.
inline AnnotationRecord replay(const std::string& image_id, const std::vector<AuditEntry>& events) {
    AnnotationRecord r;
    for (const auto& e : events) apply_event(r, image_id, e);
    return r;
}

// ---- serialization ----------------------------------------------------------

inline ojson to_json(const AuditEntry& e) {
    return {{"timestamp", e.timestamp}, {"event", e.event}, {"actor", e.actor}, {"data", e.data}};
}

inline AuditEntry audit_entry_from_json(const ojson& j) {
    try {
        AuditEntry e;
        e.timestamp = j.at("timestamp").get<std::int64_t>();
        e.event = j.at("event").get<std::string>();
        e.actor = j.at("actor").get<std::string>();
        e.data = j.at("data");
        return e;
    } catch (const nlohmann::json::exception& x) {
        throw CorruptState(std::string("audit entry: ") + x.what());
    }
}

inline ojson to_json(const AnnotationRecord& r) {
    ojson j;
    j["image_id"] = r.image_id;
    j["source"] = r.source;
    j["image"] = r.image;
    j["masks"] = r.masks;
    j["class_names"] = r.class_names;
    j["stage"] = to_string(r.stage);
    j["status"] = to_string(r.status);
    j["caption"] = r.caption;
    j["attempts"] = r.attempts;
    j["last_reason"] = r.last_reason;
    j["conversation"] = r.conversation ? conversation_to_json(*r.conversation) : ojson(nullptr);
    ojson audit = ojson::array();
    for (const auto& e : r.audit) audit.push_back(to_json(e));
    j["audit"] = audit;
    return j;
}

inline AnnotationRecord record_from_json(const ojson& j) {
    try {
        AnnotationRecord r;
        r.image_id = j.at("image_id").get<std::string>();
        r.source = j.at("source").get<std::string>();
        r.image = j.at("image").get<std::string>();
        r.masks = j.at("masks").get<std::vector<std::string>>();
        r.class_names = j.at("class_names").get<std::vector<std::string>>();
        r.stage = stage_from_string(j.at("stage").get<std::string>());
        r.status = status_from_string(j.at("status").get<std::string>());
        r.caption = j.at("caption").get<std::string>();
        r.attempts = j.at("attempts").get<int>();
        r.last_reason = j.at("last_reason").get<std::string>();
        if (!j.at("conversation").is_null()) r.conversation = conversation_from_json(j.at("conversation"));
        for (const auto& e : j.at("audit")) r.audit.push_back(audit_entry_from_json(e));
        return r;
    } catch (const nlohmann::json::exception& x) {
        throw CorruptState(std::string("state file: ") + x.what());
    } catch (const FormatError& x) {
        throw CorruptState(std::string("state file: ") + x.what());
    } catch (const MalformedMarkup& x) {
        throw CorruptState(std::string("state file: ") + x.what());
    }
}

// ---- annotator --------------------------------------------------------------

struct ImageRef {
    std::string image_id;
    fs::path image_path; // absolute or cwd-relative, may be empty for in-memory use
    std::vector<std::string> class_names;
    std::string source;
};

class AnnotatorClient {
public:
    virtual ~AnnotatorClient() = default;
    virtual std::string name() const = 0;
    virtual std::string generate_caption(const std::string& prefix, const std::string& prompt, const ImageRef& image) = 0;
    virtual Conversation generate_conversation(const std::vector<std::string>& questions, const std::string& caption) = 0;
};

namespace detail {

inline std::string article(const std::string& w) {
    if (!w.empty() && std::string("aeiou").find(w[0]) != std::string::npos) return "an " + w;
    return "a " + w;
}

inline bool is_closed_question(const std::string& q) {
    for (const char* p : {"Is ", "Are ", "Does ", "Do ", "Can ", "Was ", "Were ", "Has ", "Have "}) {
        if (q.rfind(p, 0) == 0) return true;
    }
    return false;
}

inline const std::string kCaptionLead = "The image shows ";

} // namespace detail

/// Deterministic template annotator.
///   caption:  "The image shows a nodule and a cyst."  (classes in order)
///             or the negative sentence when there are none.
///   conversation: the first question is answered with one grounded phrase
///   per lesion named in the caption; closed questions get Yes./No.; any
///   other question gets the caption as plain text.
class MockAnnotator : public AnnotatorClient {
public:
    std::string name() const override { return "mock"; }

    std::string generate_caption(const std::string&, const std::string&, const ImageRef& image) override {
        return caption_for(image.class_names);
    }

    static std::string caption_for(const std::vector<std::string>& classes) {
        if (classes.empty()) return synth::kNegativeAnswer;
        std::string out = detail::kCaptionLead;
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (i > 0) out += (i + 1 == classes.size()) ? " and " : ", ";
            out += detail::article(classes[i]);
        }
        return out + ".";
    }

    /// Lesion names in a caption written by caption_for; empty for anything else.
    static std::vector<std::string> lesions_in(const std::string& caption) {
        std::vector<std::string> out;
        if (caption.rfind(detail::kCaptionLead, 0) != 0 || caption.size() < detail::kCaptionLead.size() + 2 ||
            caption.back() != '.') {
            return out;
        }
        std::string body = caption.substr(detail::kCaptionLead.size());
        body.pop_back();
        std::vector<std::string> parts;
        std::size_t at = 0;
        while (at <= body.size()) {
            std::size_t comma = body.find(", ", at);
            std::size_t conj = body.find(" and ", at);
            std::size_t cut = std::min(comma, conj);
            parts.push_back(body.substr(at, cut == std::string::npos ? std::string::npos : cut - at));
            if (cut == std::string::npos) break;
            at = cut + (cut == comma ? 2 : 5);
        }
        for (auto& p : parts) {
            if (p.rfind("a ", 0) == 0) {
                p = p.substr(2);
            } else if (p.rfind("an ", 0) == 0) {
                p = p.substr(3);
            } else {
                return {};
            }
            if (p.empty() || medseg::detail::contains_marker(p)) return {};
            out.push_back(p);
        }
        return out;
    }

    Conversation generate_conversation(const std::vector<std::string>& questions, const std::string& caption) override {
        const auto lesions = lesions_in(caption);
        Conversation c;
        for (std::size_t i = 0; i < questions.size(); ++i) {
            c.turns.push_back(make_turn(Role::user, questions[i]));
            std::string answer;
            if (i == 0) {
                if (lesions.empty()) {
                    answer = synth::kNegativeAnswer;
                } else {
                    answer = detail::kCaptionLead;
                    for (std::size_t k = 0; k < lesions.size(); ++k) {
                        if (k > 0) answer += (k + 1 == lesions.size()) ? " and " : ", ";
                        answer += "<p> " + lesions[k] + " </p> [SEG]";
                    }
                    answer += ".";
                }
            } else if (detail::is_closed_question(questions[i])) {
                answer = lesions.empty() ? "No." : "Yes.";
            } else {
                answer = plain_text(parse_grounded(caption, ParseMode::lenient));
            }
            c.turns.push_back(make_turn(Role::assistant, answer));
        }
        return c;
    }
};

struct HttpAnnotatorOptions {
    std::string endpoint; // e.g. http://127.0.0.1:9000/annotate
    double timeout_s = 30.0;
    int retries = 3;
    double backoff_s = 0.5; // doubled after each failed attempt
};

/// Posts JSON to {endpoint}/caption and {endpoint}/conversation.
///   caption      <- {prefix, prompt, image_id, class_names, image_png_base64}
///                -> {caption: string}
///   conversation <- {questions, caption} -> {conversation: [{role, text}]}
class HttpAnnotator : public AnnotatorClient {
public:
    explicit HttpAnnotator(HttpAnnotatorOptions o) : opt_(std::move(o)) {
        const auto scheme = opt_.endpoint.find("://");
        if (scheme == std::string::npos) throw InvalidArgument("annotator endpoint must be an http(s) URL");
        const auto slash = opt_.endpoint.find('/', scheme + 3);
        base_ = opt_.endpoint.substr(0, slash);
        path_ = slash == std::string::npos ? "" : opt_.endpoint.substr(slash);
        while (!path_.empty() && path_.back() == '/') path_.pop_back();
        if (opt_.retries < 0 || !(opt_.timeout_s > 0) || opt_.backoff_s < 0) {
            throw InvalidArgument("annotator timeout/retries/backoff out of range");
        }
    }

    std::string name() const override { return "http"; }

    std::string generate_caption(const std::string& prefix, const std::string& prompt, const ImageRef& image) override {
        ojson body{{"prefix", prefix}, {"prompt", prompt}, {"image_id", image.image_id}, {"class_names", image.class_names}};
        if (!image.image_path.empty()) body["image_png_base64"] = base64_encode(fileio::read_bytes(image.image_path));
        return post("/caption", body, [](const nlohmann::json& j) {
            const auto& c = j.at("caption");
            if (!c.is_string() || c.get<std::string>().empty()) throw FormatError("caption must be a non-empty string");
            auto s = c.get<std::string>();
            if (s.find('\n') != std::string::npos) throw FormatError("caption must be one line");
            parse_grounded(s, ParseMode::lenient);
            return s;
        });
    }

    Conversation generate_conversation(const std::vector<std::string>& questions, const std::string& caption) override {
        return post("/conversation", ojson{{"questions", questions}, {"caption", caption}}, [](const nlohmann::json& j) {
            Conversation c = conversation_from_json(j.at("conversation"));
            for (std::size_t i = 0; i < c.turns.size(); ++i) {
                if (c.turns[i].role != (i % 2 == 0 ? Role::user : Role::assistant)) throw FormatError("roles must alternate");
            }
            if (c.turns.empty() || c.turns.size() % 2 != 0) throw FormatError("conversation must end with an answer");
            return c;
        });
    }

private:
    template <class F>
    auto post(const std::string& route, const ojson& body, F&& accept) -> decltype(accept(nlohmann::json{})) {
        std::string last = "no attempt made";
        double wait = opt_.backoff_s;
        for (int attempt = 0; attempt <= opt_.retries; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(std::chrono::duration<double>(wait));
                wait *= 2;
            }
            httplib::Client cli(base_);
            const auto secs = static_cast<time_t>(opt_.timeout_s);
            const auto usecs = static_cast<time_t>((opt_.timeout_s - static_cast<double>(secs)) * 1e6);
            cli.set_connection_timeout(secs, usecs);
            cli.set_read_timeout(secs, usecs);
            cli.set_write_timeout(secs, usecs);
            auto res = cli.Post(path_ + route, body.dump(), "application/json");
            if (!res) {
                last = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status != 200) {
                last = "HTTP " + std::to_string(res->status);
                if (res->status >= 400 && res->status < 500 && res->status != 429) break; // not worth retrying
                continue;
            }
            try {
                return accept(nlohmann::json::parse(res->body));
            } catch (const std::exception& e) {
                last = std::string("invalid response: ") + e.what();
            }
        }
        throw AnnotatorUnavailable(opt_.endpoint + route + ": " + last);
    }

    HttpAnnotatorOptions opt_;
    std::string base_;
    std::string path_;
};

// ---- review -----------------------------------------------------------------

struct Verdict {
    bool approve = true;
    std::string reason;
};

class ReviewProvider {
public:
    virtual ~ReviewProvider() = default;
    virtual std::string name() const = 0;
    /// May throw ReviewerUnavailable to suspend the record.
    virtual Verdict review(const AnnotationRecord& r) = 0;
    /// Caption written by a physician for a manual_required record, if any.
    virtual std::optional<std::string> manual_caption(const AnnotationRecord&) { return std::nullopt; }
};

/// Rule check plus a seeded accept probability per (image, attempt).
class AutoReviewer : public ReviewProvider {
public:
    explicit AutoReviewer(double accept_rate = 1.0, std::uint64_t seed = 0) : rate_(accept_rate), seed_(seed) {
        if (!(accept_rate >= 0 && accept_rate <= 1)) throw InvalidArgument("accept_rate must be in [0, 1]");
    }
    std::string name() const override { return "auto"; }

    Verdict review(const AnnotationRecord& r) override {
        if (r.caption.empty()) return {false, "caption is empty"};
        for (const auto& c : r.class_names) {
            if (r.caption.find(c) == std::string::npos) return {false, "caption does not mention the " + c};
        }
        if (r.class_names.empty() && r.caption.find("No abnormality") == std::string::npos) {
            return {false, "caption reports findings on a normal image"};
        }
        if (rate_ >= 1.0) return {true, ""};
        std::uint64_t h = 1469598103934665603ull ^ seed_;
        for (char ch : r.image_id + "#" + std::to_string(r.attempts)) {
            h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ull;
        }
        std::mt19937_64 g(h);
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(g);
        if (u < rate_) return {true, ""};
        return {false, "caption lacks clinical detail"};
    }

private:
    double rate_;
    std::uint64_t seed_;
};

/// Fixed verdict sequence per image (attempt 1, attempt 2). Unlisted
/// images and attempts are approved.
class ScriptedReviewer : public ReviewProvider {
public:
    using Script = std::map<std::string, std::vector<Verdict>>;
    explicit ScriptedReviewer(Script s = {}, std::map<std::string, std::string> manual = {})
        : script_(std::move(s)), manual_(std::move(manual)) {}
    std::string name() const override { return "scripted"; }

    Verdict review(const AnnotationRecord& r) override {
        auto it = script_.find(r.image_id);
        const auto k = static_cast<std::size_t>(r.attempts - 1);
        if (it == script_.end() || k >= it->second.size()) return {true, ""};
        return it->second[k];
    }
    std::optional<std::string> manual_caption(const AnnotationRecord& r) override {
        auto it = manual_.find(r.image_id);
        if (it == manual_.end()) return std::nullopt;
        return it->second;
    }

private:
    Script script_;
    std::map<std::string, std::string> manual_;
};

inline constexpr const char* kPendingReviewsName = "pending_reviews.jsonl";
inline constexpr const char* kVerdictsName = "verdicts.jsonl";

/// Human review through files. Records awaiting a decision are exported to
/// pending_reviews.jsonl (once each) and the record is suspended until a
/// line for it shows up in verdicts.jsonl:
///   {image_id, verdict: approve|reject|manual, reason, attempt?, caption?}
/// A verdict without "attempt" applies to the n-th review of that image in
/// file order. "manual" lines carry the physician's caption.
class FileQueueReviewer : public ReviewProvider {
public:
    explicit FileQueueReviewer(fs::path dir) : dir_(std::move(dir)) {}
    std::string name() const override { return "file_queue"; }

    Verdict review(const AnnotationRecord& r) override {
        std::vector<nlohmann::json> unnumbered;
        std::optional<nlohmann::json> exact;
        for (const auto& v : verdicts()) {
            if (v.value("image_id", "") != r.image_id) continue;
            const auto kind = v.value("verdict", "");
            if (kind != "approve" && kind != "reject") continue;
            if (v.contains("attempt")) {
                if (v.at("attempt").get<int>() == r.attempts) exact = v;
            } else {
                unnumbered.push_back(v);
            }
        }
        if (!exact && static_cast<int>(unnumbered.size()) >= r.attempts) exact = unnumbered[static_cast<std::size_t>(r.attempts - 1)];
        if (exact) {
            const bool ok = exact->at("verdict") == "approve";
            std::string reason = exact->value("reason", "");
            if (!ok && reason.empty()) reason = "rejected by reviewer";
            return {ok, reason};
        }
        export_once(r, "review");
        throw ReviewerUnavailable("no verdict yet for " + r.image_id + " attempt " + std::to_string(r.attempts));
    }

    std::optional<std::string> manual_caption(const AnnotationRecord& r) override {
        for (const auto& v : verdicts()) {
            if (v.value("image_id", "") == r.image_id && v.value("verdict", "") == "manual") {
                const auto c = v.value("caption", "");
                if (!c.empty()) return c;
            }
        }
        export_once(r, "manual");
        return std::nullopt;
    }

private:
    std::vector<nlohmann::json> verdicts() const {
        std::vector<nlohmann::json> out;
        const auto p = dir_ / kVerdictsName;
        if (!fs::exists(p)) return out;
        const auto lines = fileio::read_lines(p);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            try {
                auto j = nlohmann::json::parse(lines[i]);
                if (!j.is_object() || !j.contains("image_id") || !j.contains("verdict")) throw FormatError("missing keys");
                out.push_back(std::move(j));
            } catch (const std::exception& e) {
                throw FormatError(std::string(kVerdictsName) + " line " + std::to_string(i + 1) + ": " + e.what());
            }
        }
        return out;
    }

    void export_once(const AnnotationRecord& r, const std::string& kind) {
        const auto p = dir_ / kPendingReviewsName;
        if (fs::exists(p)) {
            for (const auto& line : fileio::read_lines(p)) {
                const auto j = nlohmann::json::parse(line, nullptr, false);
                if (j.is_object() && j.value("image_id", "") == r.image_id && j.value("attempt", -1) == r.attempts &&
                    j.value("kind", "") == kind) {
                    return;
                }
            }
        }
        ojson line{{"image_id", r.image_id}, {"kind", kind},          {"attempt", r.attempts},
                   {"caption", r.caption},   {"image", r.image},       {"class_names", r.class_names},
                   {"last_reason", r.last_reason}};
        fileio::append_line(p, line.dump());
    }

    fs::path dir_;
};

// ---- configuration ----------------------------------------------------------

struct PipelineConfig {
    std::string annotator_kind = "mock";
    HttpAnnotatorOptions http;
    std::string reviewer_kind = "auto";
    double accept_rate = 1.0;
    std::uint64_t reviewer_seed = 0;
    ScriptedReviewer::Script script;
    std::map<std::string, std::string> prefixes{{"covid-ct", kCovidCtPrefix}, {"default", kDefaultPrefix}};
    std::vector<std::string> question_list{synth::kReasoningQuestion, synth::kClosedQuestion};
    std::string prompt = kDefaultPrompt;

    void validate() const {
        if (annotator_kind != "mock" && annotator_kind != "http") throw InvalidArgument("annotator.kind must be mock or http");
        if (annotator_kind == "http" && http.endpoint.empty()) throw InvalidArgument("annotator.endpoint is required");
        if (reviewer_kind != "auto" && reviewer_kind != "file_queue" && reviewer_kind != "scripted") {
            throw InvalidArgument("reviewer.kind must be auto, file_queue or scripted");
        }
        if (!(accept_rate >= 0 && accept_rate <= 1)) throw InvalidArgument("reviewer.accept_rate must be in [0, 1]");
        if (question_list.empty()) throw InvalidArgument("question_list must not be empty");
    }

    /// Looks up the dataset prefix, falling back to "default".
    std::string prefix_for(const std::string& source) const {
        if (auto it = prefixes.find(source); it != prefixes.end()) return it->second;
        if (auto it = prefixes.find("default"); it != prefixes.end()) return it->second;
        return "";
    }

    ojson to_json() const {
        ojson j;
        j["annotator"] = {{"kind", annotator_kind},
                          {"endpoint", http.endpoint},
                          {"timeout_s", http.timeout_s},
                          {"retries", http.retries},
                          {"backoff_s", http.backoff_s}};
        ojson script_j = ojson::object();
        for (const auto& [id, vs] : script) {
            auto arr = ojson::array();
            for (const auto& v : vs) arr.push_back(v.approve ? "approve" : "reject:" + v.reason);
            script_j[id] = arr;
        }
        j["reviewer"] = {{"kind", reviewer_kind}, {"accept_rate", accept_rate}, {"seed", reviewer_seed}, {"script", script_j}};
        j["prefixes"] = prefixes;
        j["question_list"] = question_list;
        j["prompt"] = prompt;
        return j;
    }

    static PipelineConfig from_json(const nlohmann::json& j) {
        PipelineConfig c;
        try {
            if (j.contains("annotator")) {
                const auto& a = j.at("annotator");
                c.annotator_kind = a.value("kind", c.annotator_kind);
                c.http.endpoint = a.value("endpoint", c.http.endpoint);
                c.http.timeout_s = a.value("timeout_s", c.http.timeout_s);
                c.http.retries = a.value("retries", c.http.retries);
                c.http.backoff_s = a.value("backoff_s", c.http.backoff_s);
            }
            if (j.contains("reviewer")) {
                const auto& r = j.at("reviewer");
                c.reviewer_kind = r.value("kind", c.reviewer_kind);
                c.accept_rate = r.value("accept_rate", c.accept_rate);
                c.reviewer_seed = r.value("seed", c.reviewer_seed);
                if (r.contains("script")) {
                    for (const auto& [id, arr] : r.at("script").items()) {
                        std::vector<Verdict> vs;
                        for (const auto& v : arr) {
                            const auto s = v.get<std::string>();
                            if (s == "approve") {
                                vs.push_back({true, ""});
                            } else if (s.rfind("reject", 0) == 0) {
                                vs.push_back({false, s.size() > 7 ? s.substr(7) : "rejected by reviewer"});
                            } else {
                                throw InvalidArgument("script verdict must be approve or reject[:reason]");
                            }
                        }
                        c.script[id] = vs;
                    }
                }
            }
            if (j.contains("prefixes")) {
                for (const auto& [k, v] : j.at("prefixes").items()) c.prefixes[k] = v.get<std::string>();
            }
            if (j.contains("question_list")) c.question_list = j.at("question_list").get<std::vector<std::string>>();
            if (j.contains("prompt")) c.prompt = j.at("prompt").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw InvalidArgument(std::string("pipeline config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

inline PipelineConfig load_config(const fs::path& p) {
    try {
        return PipelineConfig::from_json(nlohmann::json::parse(fileio::read_text(p)));
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidArgument("pipeline config " + p.string() + ": " + e.what());
    }
}

inline std::unique_ptr<AnnotatorClient> make_annotator(const PipelineConfig& c) {
    if (c.annotator_kind == "http") return std::make_unique<HttpAnnotator>(c.http);
    return std::make_unique<MockAnnotator>();
}

inline std::unique_ptr<ReviewProvider> make_reviewer(const PipelineConfig& c, const fs::path& out_dir) {
    if (c.reviewer_kind == "file_queue") return std::make_unique<FileQueueReviewer>(out_dir);
    if (c.reviewer_kind == "scripted") return std::make_unique<ScriptedReviewer>(c.script);
    return std::make_unique<AutoReviewer>(c.accept_rate, c.reviewer_seed);
}

// ---- stages -----------------------------------------------------------------

using Clock = std::function<std::int64_t()>;

inline std::int64_t system_clock_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

/// Image and masks for a record; used for annotator input and validation.
using SampleLoader = std::function<Sample(const AnnotationRecord&)>;
/// Called after each applied event (persistence hook).
using EventSink = std::function<void(const AnnotationRecord&)>;

struct StageContext {
    AnnotatorClient& client;
    const PipelineConfig& config;
    Clock clock = system_clock_ms;
    EventSink sink = [](const AnnotationRecord&) {};
    std::function<fs::path(const AnnotationRecord&)> image_path = [](const AnnotationRecord&) { return fs::path{}; };

    void emit(AnnotationRecord& r, std::string event, std::string actor, ojson data = ojson::object()) const {
        apply_event(r, r.image_id, AuditEntry{clock(), std::move(event), std::move(actor), std::move(data)});
        sink(r);
    }
    ImageRef ref(const AnnotationRecord& r) const { return {r.image_id, image_path(r), r.class_names, r.source}; }
};

inline AnnotationRecord ingest(const ManifestRecord& m, const StageContext& ctx) {
    AnnotationRecord r;
    r.image_id = m.image_id;
    ctx.emit(r, "ingested", "pipeline",
             ojson{{"source", m.source.value_or("default")}, {"image", m.image}, {"masks", m.masks}, {"class_names", m.class_names}});
    return r;
}

/// Caption generation for records still pending.
inline void stage1_captions(std::vector<AnnotationRecord>& records, const StageContext& ctx) {
    const std::string actor = "annotator:" + ctx.client.name();
    for (auto& r : records) {
        if (r.stage != Stage::caption || r.status != Status::pending) continue;
        const std::string prefix = ctx.config.prefix_for(r.source);
        try {
            auto caption = ctx.client.generate_caption(prefix, ctx.config.prompt, ctx.ref(r));
            ctx.emit(r, "caption_generated", actor, ojson{{"caption", caption}, {"prefix", prefix}, {"prompt", ctx.config.prompt}});
        } catch (const AnnotatorUnavailable& e) {
            if (r.audit.back().event != "annotator_unavailable") {
                ctx.emit(r, "annotator_unavailable", actor, ojson{{"error", e.what()}});
            }
        }
    }
}

/// Review loop: one regeneration round, then manual escalation. A record
/// whose reviewer is unavailable is left where it is.
inline void stage2_refine(std::vector<AnnotationRecord>& records, const StageContext& ctx, ReviewProvider& reviewer) {
    const std::string annot = "annotator:" + ctx.client.name();
    const std::string rev = "reviewer:" + reviewer.name();
    for (auto& r : records) {
        while (r.stage == Stage::refine) {
            if (r.status == Status::generated || r.status == Status::regenerated) {
                Verdict v;
                try {
                    v = reviewer.review(r);
                } catch (const ReviewerUnavailable& e) {
                    // one audit line per suspension, not per retry
                    if (r.audit.back().event != "reviewer_unavailable") {
                        ctx.emit(r, "reviewer_unavailable", rev, ojson{{"error", e.what()}});
                    }
                    break;
                }
                if (v.approve) {
                    ctx.emit(r, "approved", rev, ojson{{"attempt", r.attempts}});
                } else {
                    ctx.emit(r, "rejected", rev, ojson{{"attempt", r.attempts}, {"reason", v.reason}});
                }
            } else if (r.status == Status::rejected_once) {
                const std::string prompt = ctx.config.prompt + " " + r.last_reason;
                const std::string prefix = ctx.config.prefix_for(r.source);
                try {
                    auto caption = ctx.client.generate_caption(prefix, prompt, ctx.ref(r));
                    ctx.emit(r, "caption_regenerated", annot, ojson{{"caption", caption}, {"prefix", prefix}, {"prompt", prompt}});
                } catch (const AnnotatorUnavailable& e) {
                    if (r.audit.back().event != "annotator_unavailable") {
                        ctx.emit(r, "annotator_unavailable", annot, ojson{{"error", e.what()}});
                    }
                    break;
                }
            } else if (r.status == Status::manual_required) {
                if (auto c = reviewer.manual_caption(r)) {
                    ctx.emit(r, "manual_caption", "physician", ojson{{"caption", *c}});
                } else {
                    break;
                }
            } else {
                throw CorruptState("record " + r.image_id + " in refine with status " + std::string(to_string(r.status)));
            }
        }
    }
}

/// Conversation generation and validation against the record's masks.
inline void stage3_conversations(std::vector<AnnotationRecord>& records, const StageContext& ctx, const SampleLoader& load) {
    const std::string actor = "annotator:" + ctx.client.name();
    for (auto& r : records) {
        if (r.stage != Stage::conversation || r.status == Status::manual_required) continue;
        Conversation conv;
        try {
            conv = ctx.client.generate_conversation(ctx.config.question_list, r.caption);
        } catch (const AnnotatorUnavailable& e) {
            if (r.audit.back().event != "annotator_unavailable") {
                ctx.emit(r, "annotator_unavailable", actor, ojson{{"error", e.what()}});
            }
            continue;
        }
        Sample s = load(r);
        s.conversation = conv;
        const auto violations = validate_sample(s);
        if (violations.empty()) {
            ctx.emit(r, "conversation_generated", actor, ojson{{"conversation", conversation_to_json(conv)}});
        } else {
            auto vs = ojson::array();
            for (const auto& v : violations) {
                vs.push_back({{"kind", to_string(v.kind)}, {"location", v.location}, {"message", v.message}});
            }
            ctx.emit(r, "validation_failed", "validator", ojson{{"conversation", conversation_to_json(conv)}, {"violations", vs}});
        }
    }
}

// ---- driver -----------------------------------------------------------------

inline constexpr const char* kStateDirName = "state";
inline constexpr const char* kAuditName = "audit.jsonl";
inline constexpr const char* kRunInfoName = "pipeline.json";
inline constexpr const char* kSummaryName = "summary.json";

struct PipelineSummary {
    std::size_t total = 0;
    std::size_t done = 0;
    std::size_t manual_required = 0;
    std::size_t in_progress = 0;
    std::map<std::string, std::size_t> by_status;

    bool complete() const { return in_progress == 0; }

    ojson to_json() const {
        return {{"total", total}, {"done", done}, {"manual_required", manual_required}, {"in_progress", in_progress}, {"by_status", by_status}};
    }
};

inline PipelineSummary summarize(const std::vector<AnnotationRecord>& records) {
    PipelineSummary s;
    s.total = records.size();
    for (const auto& r : records) {
        if (r.stage == Stage::done) {
            ++s.done;
        } else if (r.status == Status::manual_required) {
            ++s.manual_required;
        } else {
            ++s.in_progress;
        }
        ++s.by_status[std::string(to_string(r.status))];
    }
    return s;
}

inline fs::path state_path(const fs::path& out, const std::string& image_id) {
    return out / kStateDirName / (image_id + ".json");
}

inline AnnotationRecord load_state(const fs::path& p) {
    ojson j;
    try {
        j = ojson::parse(fileio::read_text(p));
    } catch (const nlohmann::json::parse_error& e) {
        throw CorruptState(p.string() + ": " + e.what());
    }
    AnnotationRecord r;
    try {
        r = record_from_json(j);
        check_invariants(r);
        // The stored fields must be exactly what the trail produces.
        if (replay(r.image_id, r.audit) != r) throw CorruptState("fields disagree with the audit trail");
    } catch (const CorruptState& e) {
        throw CorruptState(p.string() + ": " + e.what());
    }
    return r;
}

/// Reads audit.jsonl grouped per image in file order.
inline std::map<std::string, std::vector<AuditEntry>> read_audit(const fs::path& out) {
    std::map<std::string, std::vector<AuditEntry>> by_id;
    const auto p = out / kAuditName;
    if (!fs::exists(p)) return by_id;
    const auto lines = fileio::read_lines(p);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        try {
            const auto j = ojson::parse(lines[i]);
            by_id[j.at("image_id").get<std::string>()].push_back(audit_entry_from_json(j));
        } catch (const nlohmann::json::exception& e) {
            throw CorruptState(std::string(kAuditName) + " line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return by_id;
}

inline std::string audit_line(const std::string& image_id, const AuditEntry& e) {
    ojson j{{"image_id", image_id}};
    const auto body = to_json(e);
    for (const auto& [k, v] : body.items()) j[k] = v;
    return j.dump();
}

/// Rebuilds every record from audit.jsonl alone.
inline std::map<std::string, AnnotationRecord> replay_audit(const fs::path& out) {
    std::map<std::string, AnnotationRecord> out_records;
    for (const auto& [id, events] : read_audit(out)) out_records[id] = replay(id, events);
    return out_records;
}

struct RunInfo {
    fs::path input_dir;
    PipelineConfig config;
};

inline void write_run_info(const fs::path& out, const RunInfo& info) {
    ojson j{{"input_dir", fs::absolute(info.input_dir).lexically_normal().string()}, {"config", info.config.to_json()}};
    fileio::write_atomic(out / kRunInfoName, j.dump(2) + "\n");
}

inline RunInfo read_run_info(const fs::path& out) {
    const auto p = out / kRunInfoName;
    if (!fs::exists(p)) throw InvalidArgument(out.string() + " has no pipeline run to resume");
    try {
        const auto j = nlohmann::json::parse(fileio::read_text(p));
        return {j.at("input_dir").get<std::string>(), PipelineConfig::from_json(j.at("config"))};
    } catch (const nlohmann::json::exception& e) {
        throw CorruptState(p.string() + ": " + e.what());
    }
}

/// Current records of an output directory (state files in manifest order
/// when a run info file exists, otherwise sorted by id).
inline std::vector<AnnotationRecord> load_states(const fs::path& out) {
    std::vector<AnnotationRecord> recs;
    const auto dir = out / kStateDirName;
    if (!fs::exists(dir)) return recs;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) recs.push_back(load_state(f));
    return recs;
}

inline PipelineSummary pipeline_status(const fs::path& out) { return summarize(load_states(out)); }

/// Drives every record of `in_dir` as far as the annotator and reviewer
/// allow, persisting each transition. Safe to re-run: finished records are
/// left untouched and outputs are rewritten with identical bytes.
inline PipelineSummary run_pipeline(const fs::path& in_dir, const fs::path& out_dir, const PipelineConfig& config,
                                    AnnotatorClient& client, ReviewProvider& reviewer, Clock clock = system_clock_ms) {
    config.validate();
    const auto manifest = read_manifest(in_dir);
    fs::create_directories(out_dir / kStateDirName);
    {
        std::set<std::string> seen;
        for (const auto& m : manifest) {
            if (!seen.insert(m.image_id).second) throw InvalidArgument("duplicate image_id " + m.image_id);
            // masks come with the input; nothing in the pipeline produces them
            for (const auto& f : m.masks) {
                if (!fs::exists(in_dir / f)) throw IoError(m.image_id + ": mask file " + f + " not found");
            }
            if (!fs::exists(in_dir / m.image)) throw IoError(m.image_id + ": image file " + m.image + " not found");
        }
    }

    // Audit lines are appended after each state write; a crash between the
    // two leaves the log one event behind, which is repaired here.
    auto logged = read_audit(out_dir);
    std::vector<AnnotationRecord> records;
    records.reserve(manifest.size());
    for (const auto& m : manifest) {
        const auto sp = state_path(out_dir, m.image_id);
        if (!fs::exists(sp)) {
            if (logged.count(m.image_id)) throw CorruptState("audit has events for " + m.image_id + " but no state file");
            records.emplace_back();
            continue;
        }
        auto r = load_state(sp);
        if (r.image_id != m.image_id) throw CorruptState(sp.string() + ": image_id mismatch");
        const auto& have = logged[m.image_id];
        if (have.size() > r.audit.size() || !std::equal(have.begin(), have.end(), r.audit.begin())) {
            throw CorruptState("audit log disagrees with " + sp.string());
        }
        for (std::size_t k = have.size(); k < r.audit.size(); ++k) {
            fileio::append_line(out_dir / kAuditName, audit_line(r.image_id, r.audit[k]));
        }
        records.push_back(std::move(r));
    }

    StageContext ctx{client, config, std::move(clock)};
    ctx.sink = [&out_dir](const AnnotationRecord& r) {
        fileio::write_atomic(state_path(out_dir, r.image_id), to_json(r).dump(2) + "\n");
        fileio::append_line(out_dir / kAuditName, audit_line(r.image_id, r.audit.back()));
    };
    ctx.image_path = [&in_dir](const AnnotationRecord& r) { return in_dir / r.image; };
    const SampleLoader load = [&in_dir](const AnnotationRecord& r) {
        Sample s;
        s.image_id = r.image_id;
        s.image = load_image_png(in_dir / r.image);
        for (const auto& m : r.masks) s.masks.push_back(load_mask_png(in_dir / m));
        s.class_names = r.class_names;
        return s;
    };

    for (std::size_t i = 0; i < manifest.size(); ++i) {
        if (records[i].audit.empty()) records[i] = ingest(manifest[i], ctx);
    }
    stage1_captions(records, ctx);
    stage2_refine(records, ctx, reviewer);
    stage3_conversations(records, ctx, load);

    // Finished records in the dataset format, with copies of their files.
    std::vector<ManifestRecord> done;
    for (const auto& r : records) {
        if (r.stage != Stage::done) continue;
        ManifestRecord m;
        m.image_id = r.image_id;
        m.image = r.image;
        m.masks = r.masks;
        m.class_names = r.class_names;
        m.conversation = nlohmann::json::parse(conversation_to_json(*r.conversation).dump());
        m.source = r.source;
        for (const auto& rel : [&] {
                 auto v = r.masks;
                 v.push_back(r.image);
                 return v;
             }()) {
            const auto bytes = fileio::read_bytes(in_dir / rel);
            const auto dst = out_dir / rel;
            if (!fs::exists(dst) || fileio::read_bytes(dst) != bytes) fileio::write_bytes(dst, bytes);
        }
        done.push_back(std::move(m));
    }
    fileio::write_atomic(out_dir / kManifestName, manifest_text(done));
    write_run_info(out_dir, {in_dir, config});
    const auto summary = summarize(records);
    fileio::write_atomic(out_dir / kSummaryName, summary.to_json().dump(2) + "\n");
    if (!fs::exists(out_dir / kAuditName)) fileio::write_bytes(out_dir / kAuditName, std::string_view{});
    return summary;
}

/// Builds the annotator and reviewer from the configuration.
inline PipelineSummary run_pipeline(const fs::path& in_dir, const fs::path& out_dir, const PipelineConfig& config,
                                    Clock clock = system_clock_ms) {
    auto client = make_annotator(config);
    auto reviewer = make_reviewer(config, out_dir);
    return run_pipeline(in_dir, out_dir, config, *client, *reviewer, std::move(clock));
}

inline PipelineSummary resume_pipeline(const fs::path& out_dir, Clock clock = system_clock_ms) {
    const auto info = read_run_info(out_dir);
    return run_pipeline(info.input_dir, out_dir, info.config, std::move(clock));
}

} // namespace medseg::pipeline
