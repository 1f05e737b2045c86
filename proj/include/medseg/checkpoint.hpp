#pragma once

// Single-file checkpoint:
//
//   "MSEGCKPT" | u32 version | u64 header length | header JSON
//   | u32 tensor count | per tensor: u32 name length, name, u32 rows, u32 cols, f64 data
//   | u64 FNV-1a of everything above
//
// All integers and floats are little-endian. The header carries the model
// config, the vocabulary and free-form metadata.

#include "medseg/errors.hpp"
#include "medseg/fileio.hpp"
#include "medseg/model.hpp"
#include "medseg/tokenizer.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace medseg {

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <class U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

class Reader {
  public:
    explicit Reader(std::string_view data) : data_(data) {}
    template <class U>
    U get() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, data_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

  private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

} // namespace detail

template <class T>
std::string checkpoint_bytes(const Model<T>& m, const Vocab& vocab, const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header{{"format", "medseg-checkpoint"}, {"config", m.config()}, {"vocab", vocab.to_json()}, {"meta", meta}};
    const std::string hj = header.dump();
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put<std::uint64_t>(out, hj.size());
    out += hj;
    const auto& ps = m.params();
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& name = ps.name(i);
        const auto& v = ps.value(i);
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.rows()));
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.cols()));
        for (Eigen::Index k = 0; k < v.size(); ++k) detail::put<double>(out, static_cast<double>(v.data()[k]));
    }
    detail::put<std::uint64_t>(out, detail::fnv1a(out));
    return out;
}

template <class T>
void save_checkpoint(const Model<T>& m, const Vocab& vocab, const std::string& path,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    fileio::write_atomic(path, checkpoint_bytes(m, vocab, meta));
}

template <class T>
struct LoadedCheckpoint {
    Model<T> model;
    Vocab vocab;
    nlohmann::json meta;
};

template <class T>
LoadedCheckpoint<T> parse_checkpoint(std::string_view data) {
    if (data.size() < sizeof(kCheckpointMagic) + 8 || std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw FormatError("not a medseg checkpoint (bad magic)");
    }
    const std::uint64_t stored = [&] {
        std::uint64_t v;
        std::memcpy(&v, data.data() + data.size() - 8, 8);
        return v;
    }();
    if (stored != detail::fnv1a(data.substr(0, data.size() - 8))) throw FormatError("checkpoint checksum mismatch");

    detail::Reader r(data.substr(0, data.size() - 8));
    r.bytes(sizeof(kCheckpointMagic));
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto hlen = r.get<std::uint64_t>();
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.bytes(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    ModelConfig cfg;
    Vocab vocab;
    try {
        cfg = header.at("config").get<ModelConfig>();
        vocab = Vocab::from_json(header.at("vocab"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    if (cfg.gcu.vocab_size != vocab.size()) throw FormatError("checkpoint vocab size disagrees with its config");
    LoadedCheckpoint<T> out{Model<T>(cfg), std::move(vocab), header.value("meta", nlohmann::json::object())};
    auto& ps = out.model.params();
    const auto count = r.get<std::uint32_t>();
    if (count != ps.size()) throw FormatError("checkpoint has " + std::to_string(count) + " tensors, model expects " + std::to_string(ps.size()));
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto nlen = r.get<std::uint32_t>();
        const std::string name(r.bytes(nlen));
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        std::size_t idx;
        try {
            idx = ps.index(name);
        } catch (const InvalidArgument&) {
            throw FormatError("checkpoint tensor " + name + " is not a model parameter");
        }
        auto& v = ps.value(idx);
        if (v.rows() != rows || v.cols() != cols) throw FormatError("checkpoint tensor " + name + " has the wrong shape");
        for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<T>(r.get<double>());
    }
    return out;
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    const auto bytes = fileio::read_text(path);
    return parse_checkpoint<T>(bytes);
}

} // namespace medseg
