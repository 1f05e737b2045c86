#pragma once

// On-disk dataset format: `manifest.jsonl` with one record per line,
//   {image_id, image, masks, class_names, conversation: [{role, text}]}
// where paths are relative to the dataset directory, images are 8-bit
// grayscale PNG and masks are 8-bit PNG with values 0/255.

#include "medseg/errors.hpp"
#include "medseg/fileio.hpp"
#include "medseg/png_io.hpp"
#include "medseg/protocol.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace medseg {

namespace fs = std::filesystem;

inline constexpr const char* kManifestName = "manifest.jsonl";

inline nlohmann::ordered_json conversation_to_json(const Conversation& c) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& t : c.turns) {
        arr.push_back({{"role", to_string(t.role)}, {"text", serialize_grounded(t.content)}});
    }
    return arr;
}

inline Conversation conversation_from_json(const nlohmann::json& arr) {
    if (!arr.is_array()) throw FormatError("conversation must be an array");
    Conversation c;
    for (const auto& t : arr) {
        c.turns.push_back(make_turn(role_from_string(t.at("role").get<std::string>()), t.at("text").get<std::string>()));
    }
    return c;
}

/// A manifest line before images are loaded.
struct ManifestRecord {
    std::string image_id;
    std::string image;
    std::vector<std::string> masks;
    std::vector<std::string> class_names;
    nlohmann::json conversation = nlohmann::json::array();
    std::optional<std::string> source; // dataset tag used for caption prefixes
};

inline nlohmann::ordered_json to_json(const ManifestRecord& r) {
    nlohmann::ordered_json j;
    j["image_id"] = r.image_id;
    j["image"] = r.image;
    j["masks"] = r.masks;
    j["class_names"] = r.class_names;
    nlohmann::ordered_json conv = nlohmann::ordered_json::array();
    for (const auto& t : r.conversation) {
        conv.push_back({{"role", t.at("role").get<std::string>()}, {"text", t.at("text").get<std::string>()}});
    }
    j["conversation"] = conv;
    if (r.source) j["source"] = *r.source;
    return j;
}

inline ManifestRecord manifest_record_from_json(const nlohmann::json& j) {
    ManifestRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.image = j.at("image").get<std::string>();
    r.masks = j.at("masks").get<std::vector<std::string>>();
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("conversation")) r.conversation = j.at("conversation");
    if (j.contains("source")) r.source = j.at("source").get<std::string>();
    return r;
}

inline std::vector<ManifestRecord> read_manifest(const fs::path& dir) {
    std::vector<ManifestRecord> out;
    const auto lines = fileio::read_lines(dir / kManifestName);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        try {
            out.push_back(manifest_record_from_json(nlohmann::json::parse(lines[i])));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return out;
}

inline std::string manifest_text(const std::vector<ManifestRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline ImageGrid load_image_png(const fs::path& p) { return image_from_gray8(decode_png(fileio::read_bytes(p))); }
inline BinaryMask load_mask_png(const fs::path& p) { return mask_from_gray8(decode_png(fileio::read_bytes(p))); }

inline Sample load_sample(const fs::path& dir, const ManifestRecord& r) {
    Sample s;
    s.image_id = r.image_id;
    s.image = load_image_png(dir / r.image);
    for (const auto& m : r.masks) s.masks.push_back(load_mask_png(dir / m));
    s.class_names = r.class_names;
    try {
        s.conversation = conversation_from_json(r.conversation);
    } catch (const Error& e) {
        throw FormatError("record " + r.image_id + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("record " + r.image_id + ": " + e.what());
    }
    return s;
}

inline std::vector<Sample> load_dataset(const fs::path& dir) {
    std::vector<Sample> out;
    for (const auto& r : read_manifest(dir)) out.push_back(load_sample(dir, r));
    return out;
}

/// Writes images, masks and the manifest. Returns the manifest records.
inline std::vector<ManifestRecord> write_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    std::vector<ManifestRecord> records;
    for (const auto& s : samples) {
        ManifestRecord r;
        r.image_id = s.image_id;
        r.image = "images/" + s.image_id + ".png";
        fileio::write_bytes(dir / r.image, encode_png(to_gray8(s.image)));
        for (std::size_t k = 0; k < s.masks.size(); ++k) {
            r.masks.push_back("masks/" + s.image_id + "_" + std::to_string(k) + ".png");
            fileio::write_bytes(dir / r.masks.back(), encode_png(to_gray8(s.masks[k])));
        }
        r.class_names = s.class_names;
        r.conversation = nlohmann::json::parse(conversation_to_json(s.conversation).dump());
        records.push_back(std::move(r));
    }
    fileio::write_bytes(dir / kManifestName, manifest_text(records));
    return records;
}

} // namespace medseg
