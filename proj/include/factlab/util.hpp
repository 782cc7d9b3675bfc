#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

namespace factlab {

using json = nlohmann::json;
using Clock = std::chrono::system_clock;
using TimePoint = std::chrono::sys_time<std::chrono::milliseconds>;

/// Base error for everything the library raises. `kind()` is a short
/// machine-readable tag the CLI echoes in its error envelope.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

inline std::string_view trim(std::string_view s) {
    auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

// Collapses internal whitespace runs to one space, trims, lowercases.
inline std::string normalize_words(std::string_view s) {
    std::string out;
    bool pending_space = false;
    for (unsigned char c : trim(s)) {
        if (std::isspace(c)) {
            pending_space = true;
            continue;
        }
        if (pending_space && !out.empty()) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

inline std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        lines.emplace_back(line);
        start = end + 1;
    }
    return lines;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot read file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes via a sibling temp file and rename, so readers never see a torn file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("io", "cannot write file: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw Error("io", "short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Time

inline TimePoint now_utc() {
    return std::chrono::time_point_cast<std::chrono::milliseconds>(Clock::now());
}

/// Parses RFC 3339 timestamps ("2024-06-01T12:30:00Z", optional fractional
/// seconds, optional +hh:mm offset). Returns false on malformed input.
inline bool parse_rfc3339(std::string_view text, TimePoint& out) {
    std::string s(trim(text));
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0, consumed = 0;
    if (std::sscanf(s.c_str(), "%4d-%2d-%2d%*1[Tt ]%2d:%2d:%2d%n", &y, &mo, &d, &h, &mi, &sec,
                    &consumed) != 6)
        return false;
    if (consumed != 19) return false;
    std::size_t pos = 19;
    long millis = 0;
    if (pos < s.size() && s[pos] == '.') {
        ++pos;
        int digits = 0;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
            if (digits < 3) millis = millis * 10 + (s[pos] - '0');
            ++digits;
            ++pos;
        }
        if (digits == 0) return false;
        for (int i = digits; i < 3; ++i) millis *= 10;
    }
    long offset_minutes = 0;
    if (pos >= s.size()) return false;
    if (s[pos] == 'Z' || s[pos] == 'z') {
        ++pos;
    } else if (s[pos] == '+' || s[pos] == '-') {
        int oh = 0, om = 0;
        if (s.size() - pos != 6 || s[pos + 3] != ':') return false;
        if (std::sscanf(s.c_str() + pos + 1, "%2d:%2d", &oh, &om) != 2) return false;
        offset_minutes = (oh * 60 + om) * (s[pos] == '+' ? 1 : -1);
        pos += 6;
    } else {
        return false;
    }
    if (pos != s.size()) return false;
    using namespace std::chrono;
    year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
    if (!ymd.ok() || h > 23 || mi > 59 || sec > 60) return false;
    out = TimePoint{sys_days{ymd}} + hours{h} + minutes{mi} + seconds{sec} + milliseconds{millis} -
          minutes{offset_minutes};
    return true;
}

inline std::string format_rfc3339(TimePoint tp, bool with_millis = false) {
    using namespace std::chrono;
    auto days_part = floor<days>(tp);
    year_month_day ymd{days_part};
    hh_mm_ss<milliseconds> hms{tp - days_part};
    char buf[40];
    if (with_millis) {
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d.%03dZ", int(ymd.year()),
                      unsigned(ymd.month()), unsigned(ymd.day()), int(hms.hours().count()),
                      int(hms.minutes().count()), int(hms.seconds().count()),
                      int(hms.subseconds().count()));
    } else {
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", int(ymd.year()),
                      unsigned(ymd.month()), unsigned(ymd.day()), int(hms.hours().count()),
                      int(hms.minutes().count()), int(hms.seconds().count()));
    }
    return buf;
}

// ---------------------------------------------------------------------------
// CSV (RFC 4180 subset: comma separator, double-quote quoting, CRLF or LF)

inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    bool row_has_content = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        switch (c) {
        case '"':
            in_quotes = true;
            row_has_content = true;
            break;
        case ',':
            row.push_back(std::move(field));
            field.clear();
            row_has_content = true;
            break;
        case '\r':
            break;
        case '\n':
            if (row_has_content || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            field.clear();
            row.clear();
            row_has_content = false;
            break;
        default:
            field.push_back(c);
            row_has_content = true;
        }
    }
    if (in_quotes) throw Error("csv", "unterminated quoted field");
    if (row_has_content || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string csv_escape(std::string_view field) {
    if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline std::string csv_row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out.push_back(',');
        out += csv_escape(fields[i]);
    }
    out.push_back('\n');
    return out;
}

// ---------------------------------------------------------------------------
// JSON / YAML documents

inline json yaml_to_json(const YAML::Node& node) {
    switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
        return nullptr;
    case YAML::NodeType::Sequence: {
        json arr = json::array();
        for (const auto& item : node) arr.push_back(yaml_to_json(item));
        return arr;
    }
    case YAML::NodeType::Map: {
        json obj = json::object();
        for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_to_json(kv.second);
        return obj;
    }
    case YAML::NodeType::Scalar: {
        const auto& raw = node.Scalar();
        if (node.Tag() == "!") return raw;  // quoted scalar
        if (raw == "true" || raw == "True") return true;
        if (raw == "false" || raw == "False") return false;
        if (raw == "null" || raw == "~") return nullptr;
        try {
            std::size_t used = 0;
            long long i = std::stoll(raw, &used);
            if (used == raw.size()) return i;
        } catch (const std::exception&) {
        }
        try {
            std::size_t used = 0;
            double d = std::stod(raw, &used);
            if (used == raw.size()) return d;
        } catch (const std::exception&) {
        }
        return raw;
    }
    }
    return nullptr;
}

/// Loads a `.json`, `.yaml` or `.yml` document into a JSON value.
inline json load_document(const std::filesystem::path& path) {
    auto text = read_file(path);
    auto ext = to_lower(path.extension().string());
    try {
        if (ext == ".yaml" || ext == ".yml") return yaml_to_json(YAML::Load(text));
        return json::parse(text);
    } catch (const YAML::Exception& e) {
        throw Error("config", path.string() + ": " + e.what());
    } catch (const json::exception& e) {
        throw Error("config", path.string() + ": " + e.what());
    }
}

/// Reads a JSON-lines file. A final line without a trailing newline that
/// fails to parse is treated as a torn write and dropped when `tolerate_torn_tail`.
inline std::vector<json> read_jsonl(const std::filesystem::path& path, bool tolerate_torn_tail = false) {
    auto text = read_file(path);
    std::vector<json> out;
    auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        try {
            out.push_back(json::parse(lines[i]));
        } catch (const json::exception& e) {
            bool last = (i + 1 == lines.size());
            if (tolerate_torn_tail && last) break;
            throw Error("parse", path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return out;
}

inline std::string to_jsonl(const std::vector<json>& rows) {
    std::string out;
    for (const auto& r : rows) {
        out += r.dump();
        out.push_back('\n');
    }
    return out;
}

// ---------------------------------------------------------------------------
// Digest

inline std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("digest", "sha256 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

}  // namespace factlab
