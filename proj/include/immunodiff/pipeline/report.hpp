#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/core/tensor_io.hpp"

namespace immunodiff::pipeline {

// Ordered key=value lines. Values must be single-line; the canonical config
// is compact JSON so it fits.
struct Report {
    std::vector<std::pair<std::string, std::string>> entries;

    void add(const std::string& key, const std::string& value) {
        require(key.find_first_of("=\n") == std::string::npos, "report key '" + key + "' is malformed");
        require(value.find('\n') == std::string::npos, "report value for '" + key + "' spans lines");
        entries.emplace_back(key, value);
    }

    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : entries)
            if (k == key) return &v;
        return nullptr;
    }
};

inline std::string encode_report(const Report& r) {
    std::string out;
    for (const auto& [k, v] : r.entries) out += k + "=" + v + "\n";
    return out;
}

inline Report decode_report(const std::string& text) {
    Report r;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("report line without '=': " + line);
        r.entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return r;
}

inline void write_report(const Report& r, const std::filesystem::path& path) { write_atomic(path, encode_report(r)); }

inline Report read_report(const std::filesystem::path& path) { return decode_report(read_file(path)); }

}  // namespace immunodiff::pipeline
