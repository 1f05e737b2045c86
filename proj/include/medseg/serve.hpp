#pragma once

// HTTP inference service.
//   POST /v1/chat   {image, history, message, options} -> {text, spans, model_version, latency_ms}
//   GET  /healthz   {status, model_version}
// Stateless: the whole history travels with every request. One worker runs
// inference in arrival order behind a bounded queue (overflow answers 429).

#include "medseg/checkpoint.hpp"
#include "medseg/codec.hpp"
#include "medseg/dataset.hpp"
#include "medseg/errors.hpp"
#include "medseg/inference.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace medseg::serve {

using ojson = nlohmann::ordered_json;

inline constexpr int kDefaultPort = 8787;
inline constexpr std::size_t kDefaultQueueDepth = 8;
inline constexpr std::size_t kDefaultMaxBodyBytes = 8u << 20;
inline constexpr int kMaxNewTokensCap = 256;
inline constexpr const char* kCheckpointEnv = "MEDSEG_CKPT";

enum class MaskFormat { png_base64, rle };

inline std::string_view to_string(MaskFormat f) { return f == MaskFormat::rle ? "rle" : "png_base64"; }

/// An error that maps onto an HTTP status.
struct RequestError {
    int status = 400;
    std::string type;
    std::string message;
};

struct ChatRequest {
    ImageGrid image;
    Conversation history;
    std::string message;
    int max_new_tokens = kDefaultMaxNewTokens;
    MaskFormat mask_format = MaskFormat::png_base64;
};

struct ResponseSpan {
    std::size_t slot_index = 0;
    std::string phrase;
    BinaryMask mask;
    std::size_t area_px = 0;
};

struct ChatResponse {
    std::string text;
    std::vector<ResponseSpan> spans;
    std::string model_version;
    double latency_ms = 0;
    MaskFormat mask_format = MaskFormat::png_base64;

    ojson to_json() const {
        auto spans_j = ojson::array();
        for (const auto& s : spans) {
            ojson mask = mask_format == MaskFormat::rle ? rle_to_json(rle_encode(s.mask)) : ojson(mask_to_png_base64(s.mask));
            spans_j.push_back({{"slot_index", s.slot_index}, {"phrase", s.phrase}, {"mask", mask}, {"area_px", s.area_px}});
        }
        return {{"text", text}, {"spans", spans_j}, {"model_version", model_version}, {"latency_ms", latency_ms}};
    }
};

inline ojson error_json(const RequestError& e) {
    return {{"error", {{"status", e.status}, {"type", e.type}, {"message", e.message}}}};
}

/// Parses and checks a request body. `max_side` is the largest accepted
/// image side (413 above it).
inline ChatRequest parse_chat_request(std::string_view body, int patch_size, int max_side) {
    auto bad = [](std::string type, std::string msg, int status = 400) {
        return RequestError{status, std::move(type), std::move(msg)};
    };
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw bad("FormatError", std::string("body is not JSON: ") + e.what());
    }
    if (!j.is_object()) throw bad("FormatError", "body must be a JSON object");
    if (!j.contains("image") || !j["image"].is_string()) throw bad("FormatError", "image must be a base64 PNG string");
    if (!j.contains("message") || !j["message"].is_string()) throw bad("FormatError", "message must be a string");

    ChatRequest req;
    try {
        const auto gray = decode_png(base64_decode(j["image"].get<std::string>()));
        req.image = image_from_gray8(gray);
    } catch (const Error& e) {
        throw bad("FormatError", std::string("image: ") + e.what());
    }
    if (req.image.height > max_side || req.image.width > max_side) {
        throw bad("ImageTooLarge",
                  "image is " + std::to_string(req.image.height) + "x" + std::to_string(req.image.width) + ", limit " +
                      std::to_string(max_side),
                  413);
    }
    if (req.image.height % patch_size != 0 || req.image.width % patch_size != 0 || req.image.height % 4 != 0 ||
        req.image.width % 4 != 0) {
        throw bad("ShapeError", "image sides must be divisible by " + std::to_string(patch_size) + " and by 4");
    }

    try {
        if (j.contains("history")) {
            if (!j["history"].is_array()) throw FormatError("history must be an array");
            req.history = conversation_from_json(j["history"]);
        }
        for (std::size_t i = 0; i < req.history.turns.size(); ++i) {
            const auto& t = req.history.turns[i];
            if (t.role != (i % 2 == 0 ? Role::user : Role::assistant)) throw FormatError("history roles must alternate starting with user");
            if (t.role == Role::user && t.content.slot_count() > 0) throw FormatError("user turns cannot contain [SEG]");
        }
        if (req.history.turns.size() % 2 != 0) throw FormatError("history must end with an assistant turn");
        req.message = j["message"].get<std::string>();
        if (medseg::detail::trim(req.message).empty()) throw FormatError("message is empty");
        if (parse_grounded(req.message).slot_count() > 0) throw FormatError("message cannot contain [SEG]");
    } catch (const Error& e) {
        throw bad("FormatError", e.what());
    } catch (const nlohmann::json::exception& e) {
        throw bad("FormatError", std::string("history: ") + e.what());
    }

    if (j.contains("options")) {
        const auto& o = j["options"];
        if (!o.is_object()) throw bad("FormatError", "options must be an object");
        if (o.contains("max_new_tokens")) {
            if (!o["max_new_tokens"].is_number_integer()) throw bad("FormatError", "max_new_tokens must be an integer");
            req.max_new_tokens = o["max_new_tokens"].get<int>();
            if (req.max_new_tokens < 1 || req.max_new_tokens > kMaxNewTokensCap) {
                throw bad("FormatError", "max_new_tokens must be in [1, " + std::to_string(kMaxNewTokensCap) + "]");
            }
        }
        if (o.contains("mask_format")) {
            const auto f = o["mask_format"].is_string() ? o["mask_format"].get<std::string>() : "";
            if (f == "rle") {
                req.mask_format = MaskFormat::rle;
            } else if (f != "png_base64") {
                throw bad("FormatError", "mask_format must be png_base64 or rle");
            }
        }
    }
    return req;
}

/// Request body for a client (the inverse of parse_chat_request).
inline ojson chat_request_json(const ImageGrid& image, const Conversation& history, const std::string& message,
                               MaskFormat fmt = MaskFormat::png_base64, int max_new_tokens = kDefaultMaxNewTokens) {
    return {{"image", base64_encode(encode_png(to_gray8(image)))},
            {"history", conversation_to_json(history)},
            {"message", message},
            {"options", {{"max_new_tokens", max_new_tokens}, {"mask_format", to_string(fmt)}}}};
}

struct Reply {
    int status = 200;
    ojson body;
};

/// The model behind the endpoints; empty when no checkpoint is loaded.
class ChatService {
public:
    ChatService() = default;

    ChatService(LoadedCheckpoint<float> ck, std::string version)
        : ck_(std::make_unique<LoadedCheckpoint<float>>(std::move(ck))), tok_(std::make_unique<Tokenizer>(ck_->vocab)),
          version_(std::move(version)) {}

    /// Version string is a pure function of the file bytes, so restarts do
    /// not change it.
    static ChatService from_checkpoint(const std::string& path) {
        const auto bytes = fileio::read_text(path);
        char hex[17];
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(detail::fnv1a(bytes)));
        return ChatService(parse_checkpoint<float>(bytes), std::string(MEDSEG_VERSION_STRING) + "+" + std::string(hex, 12));
    }

    bool loaded() const { return ck_ != nullptr; }
    const std::string& version() const { return version_; }
    const Model<float>& model() const { return ck_->model; }

    /// Runs inference; generation failures surface as 422.
    ChatResponse chat(const ChatRequest& req) const {
        if (!loaded()) throw RequestError{503, "ModelNotLoaded", "no checkpoint loaded"};
        const auto t0 = std::chrono::steady_clock::now();
        Conversation conv = req.history;
        conv.turns.push_back(make_turn(Role::user, req.message));
        Prediction p;
        try {
            p = predict(ck_->model, *tok_, req.image, conv, req.max_new_tokens);
        } catch (const SequenceTooLong& e) {
            throw RequestError{422, "SequenceTooLong", e.what()};
        } catch (const GenerationBudgetExceeded& e) {
            throw RequestError{422, "GenerationBudgetExceeded", e.what()};
        } catch (const MalformedMarkup& e) {
            throw RequestError{422, "MalformedMarkup", e.what()};
        }
        ChatResponse r;
        r.text = serialize_grounded(p.grounded);
        r.model_version = version_;
        r.mask_format = req.mask_format;
        const auto spans = p.grounded.spans();
        for (std::size_t k = 0; k < spans.size(); ++k) {
            ResponseSpan s;
            s.slot_index = spans[k].slot_index;
            s.phrase = spans[k].phrase;
            s.mask = std::move(p.masks[k]);
            for (auto v : s.mask.values) s.area_px += v ? 1 : 0;
            r.spans.push_back(std::move(s));
        }
        r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return r;
    }

    Reply handle_chat(std::string_view body) const {
        try {
            if (!loaded()) throw RequestError{503, "ModelNotLoaded", "no checkpoint loaded"};
            const auto& g = ck_->model.config().gcu;
            return {200, chat(parse_chat_request(body, g.patch_size, g.image_size)).to_json()};
        } catch (const RequestError& e) {
            return {e.status, error_json(e)};
        } catch (const std::exception& e) {
            return {500, error_json({500, "InternalError", e.what()})};
        }
    }

    Reply handle_health() const {
        if (!loaded()) return {503, {{"status", "unavailable"}, {"model_version", nullptr}}};
        return {200, {{"status", "ok"}, {"model_version", version_}}};
    }

private:
    std::unique_ptr<LoadedCheckpoint<float>> ck_;
    std::unique_ptr<Tokenizer> tok_;
    std::string version_;
};

/// Single consumer thread; at most `depth` jobs may wait.
class WorkQueue {
public:
    explicit WorkQueue(std::size_t depth) : depth_(depth), worker_([this] { run(); }) {}
    ~WorkQueue() {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        worker_.join();
    }
    WorkQueue(const WorkQueue&) = delete;
    WorkQueue& operator=(const WorkQueue&) = delete;

    /// Empty when the queue is full.
    std::optional<std::future<Reply>> submit(std::function<Reply()> fn) {
        std::packaged_task<Reply()> task(std::move(fn));
        auto fut = task.get_future();
        {
            std::lock_guard lk(mu_);
            if (jobs_.size() >= depth_) return std::nullopt;
            jobs_.push_back(std::move(task));
        }
        cv_.notify_one();
        return fut;
    }

private:
    void run() {
        for (;;) {
            std::packaged_task<Reply()> job;
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [&] { return stop_ || !jobs_.empty(); });
                if (jobs_.empty()) return;
                job = std::move(jobs_.front());
                jobs_.pop_front();
            }
            job();
        }
    }

    std::size_t depth_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<std::packaged_task<Reply()>> jobs_;
    bool stop_ = false;
    std::thread worker_;
};

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = kDefaultPort; // 0 picks a free port
    std::size_t queue_depth = kDefaultQueueDepth;
    std::size_t max_body_bytes = kDefaultMaxBodyBytes;
    std::string cors_origin = "*";
};

class Server {
public:
    Server(const ChatService& svc, ServerOptions opt) : svc_(svc), opt_(std::move(opt)), queue_(opt_.queue_depth) {
        http_.set_payload_max_length(opt_.max_body_bytes);
        http_.set_default_headers({{"Access-Control-Allow-Origin", opt_.cors_origin},
                                   {"Access-Control-Allow-Headers", "Content-Type"},
                                   {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        http_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        http_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) { send(res, svc_.handle_health()); });
        http_.Post("/v1/chat", [this](const httplib::Request& req, httplib::Response& res) {
            auto body = req.body;
            auto fut = queue_.submit([this, body = std::move(body)] { return svc_.handle_chat(body); });
            if (!fut) {
                send(res, {429, error_json({429, "QueueFull", "inference queue is full, retry later"})});
                return;
            }
            send(res, fut->get());
        });
        http_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return;
            const std::string type = res.status == 413 ? "PayloadTooLarge" : res.status == 404 ? "NotFound" : "HttpError";
            res.set_content(error_json({res.status, type, httplib::status_message(res.status)}).dump(), "application/json");
        });
    }

    /// Binds and returns the bound port.
    int bind() {
        if (opt_.port == 0) {
            port_ = http_.bind_to_any_port(opt_.host);
        } else {
            port_ = http_.bind_to_port(opt_.host, opt_.port) ? opt_.port : -1;
        }
        if (port_ < 0) throw IoError("cannot bind " + opt_.host + ":" + std::to_string(opt_.port));
        return port_;
    }
    /// Blocks until stop().
    void listen() { http_.listen_after_bind(); }
    void stop() { http_.stop(); }
    void wait_until_ready() { http_.wait_until_ready(); }
    int port() const { return port_; }

private:
    static void send(httplib::Response& res, const Reply& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    }

    const ChatService& svc_;
    ServerOptions opt_;
    WorkQueue queue_;
    httplib::Server http_;
    int port_ = -1;
};

} // namespace medseg::serve
