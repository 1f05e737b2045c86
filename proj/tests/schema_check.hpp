#pragma once

// Checks a JSON value against the subset of JSON Schema used in schemas/:
// type, enum, required, properties, items, min/maxItems, minimum, maximum,
// minLength, oneOf and local $ref.

#include <json.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace schema {

using nlohmann::json;

inline json load(const std::string& name) {
    std::ifstream in(std::string(MEDSEG_SCHEMA_DIR) + "/" + name);
    return json::parse(in);
}

inline bool type_matches(const json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    return false;
}

inline void check(const json& v, const json& s, const json& root, const std::string& at, std::vector<std::string>& errs) {
    if (s.contains("$ref")) {
        const std::string ref = s["$ref"];
        return check(v, root.at(json::json_pointer(ref.substr(1))), root, at, errs);
    }
    if (s.contains("oneOf")) {
        int ok = 0;
        for (const auto& alt : s["oneOf"]) {
            std::vector<std::string> e;
            check(v, alt, root, at, e);
            ok += e.empty() ? 1 : 0;
        }
        if (ok != 1) errs.push_back(at + ": matches " + std::to_string(ok) + " oneOf branches");
    }
    if (s.contains("type")) {
        bool any = false;
        for (const auto& t : s["type"].is_array() ? s["type"] : json::array({s["type"]})) any = any || type_matches(v, t);
        if (!any) return errs.push_back(at + ": wrong type");
    }
    if (s.contains("enum") && std::find(s["enum"].begin(), s["enum"].end(), v) == s["enum"].end()) {
        errs.push_back(at + ": not in enum");
    }
    if (v.is_number()) {
        if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) errs.push_back(at + ": below minimum");
        if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) errs.push_back(at + ": above maximum");
    }
    if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s["minLength"].get<std::size_t>()) {
        errs.push_back(at + ": too short");
    }
    if (v.is_object()) {
        const auto required = s.value("required", json::array());
        const auto props = s.value("properties", json::object());
        for (const auto& k : required) {
            if (!v.contains(k.get<std::string>())) errs.push_back(at + ": missing " + k.get<std::string>());
        }
        for (const auto& [k, sub] : props.items()) {
            if (v.contains(k)) check(v[k], sub, root, at + "/" + k, errs);
        }
    }
    if (v.is_array()) {
        if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) errs.push_back(at + ": too few items");
        if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) errs.push_back(at + ": too many items");
        if (s.contains("items")) {
            for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s["items"], root, at + "/" + std::to_string(i), errs);
        }
    }
}

/// Empty when `v` conforms.
inline std::vector<std::string> validate(const json& v, const json& s) {
    std::vector<std::string> errs;
    check(v, s, s, "", errs);
    return errs;
}

} // namespace schema
