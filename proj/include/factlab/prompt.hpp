#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "factlab/util.hpp"

namespace factlab {

/// A versioned prompt. Files carry `key: value` front matter ended by a
/// `---` line; everything after it is the body.
struct PromptTemplate {
    std::string name;
    std::string version;
    std::string body;

    std::string id() const { return name + "@" + version; }
    std::string digest() const { return sha256_hex(body); }
};

inline std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
    if (needle.empty()) return 0;
    std::size_t n = 0;
    for (auto pos = haystack.find(needle); pos != std::string_view::npos; pos = haystack.find(needle, pos + needle.size()))
        ++n;
    return n;
}

inline PromptTemplate parse_template(std::string_view text, std::string default_name = "template") {
    PromptTemplate t{std::move(default_name), "unversioned", std::string(text)};
    auto lines = split_lines(text);
    std::size_t offset = 0;
    std::map<std::string, std::string> meta;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]) == "---") {
            // Front matter ends here; the body begins after this line.
            offset = 0;
            for (std::size_t k = 0; k <= i; ++k) offset += lines[k].size() + 1;
            if (text.size() > offset && text[offset - 1] == '\r') ++offset;
            t.body = std::string(text.substr(std::min(offset, text.size())));
            for (auto& [k, v] : meta) {
                if (k == "name") t.name = v;
                if (k == "version") t.version = v;
            }
            break;
        }
        auto colon = lines[i].find(':');
        if (colon == std::string::npos) break;  // no front matter
        meta[std::string(trim(std::string_view(lines[i]).substr(0, colon)))] =
            std::string(trim(std::string_view(lines[i]).substr(colon + 1)));
    }
    while (!t.body.empty() && (t.body.back() == '\n' || t.body.back() == '\r')) t.body.pop_back();
    return t;
}

inline PromptTemplate load_template(const std::filesystem::path& path) {
    return parse_template(read_file(path), path.stem().string());
}

/// Substitutes `{key}` placeholders in a single pass; substituted text is
/// never rescanned, so article bodies containing braces are safe.
inline std::string render_placeholders(std::string_view body, const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(body.size());
    std::size_t i = 0;
    while (i < body.size()) {
        if (body[i] == '{') {
            auto close = body.find('}', i + 1);
            if (close != std::string_view::npos) {
                auto key = std::string(body.substr(i + 1, close - i - 1));
                if (auto it = values.find(key); it != values.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(body[i++]);
    }
    return out;
}

}  // namespace factlab
