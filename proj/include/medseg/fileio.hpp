#pragma once

#include "medseg/errors.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

namespace medseg::fileio {

namespace fs = std::filesystem;

inline std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::string read_text(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& p, std::string_view data) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw IoError("short write to " + p.string());
}

inline void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& data) {
    write_bytes(p, std::string_view(reinterpret_cast<const char*>(data.data()), data.size()));
}

/// Write to a sibling temp file, then rename over the target.
inline void write_atomic(const fs::path& p, std::string_view data) {
    fs::path tmp = p;
    tmp += ".tmp";
    write_bytes(tmp, data);
    fs::rename(tmp, p);
}

inline void append_line(const fs::path& p, std::string_view line) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::app);
    if (!f) throw IoError("cannot append to " + p.string());
    f.write(line.data(), static_cast<std::streamsize>(line.size()));
    f.put('\n');
}

inline std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot read " + p.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(std::move(line));
    }
    return out;
}

} // namespace medseg::fileio
