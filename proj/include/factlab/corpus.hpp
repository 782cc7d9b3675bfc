#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "factlab/label.hpp"
#include "factlab/util.hpp"

namespace factlab {

struct Article {
    std::string id;
    std::string url;
    std::string source;
    std::string topic;
    TimePoint published_at{};
    std::string title;
    std::string text;

    bool operator==(const Article&) const = default;
};

enum class Provenance { HumanReviewed, Imported };

inline std::string_view to_string(Provenance p) {
    return p == Provenance::HumanReviewed ? "HumanReviewed" : "Imported";
}

struct GoldLabel {
    std::string article_id;
    Label label = Label::FactuallyCorrect;
    Provenance provenance = Provenance::Imported;

    bool operator==(const GoldLabel&) const = default;
};

using GoldSet = std::map<std::string, GoldLabel>;

struct Taxonomy {
    std::vector<std::string> topics;
    std::vector<std::string> sources;
    std::vector<std::string> candidates;
    std::vector<std::string> parties;
};

inline Taxonomy taxonomy_from_json(const json& doc) {
    Taxonomy tax;
    auto read_list = [&](const char* key, std::vector<std::string>& out) {
        if (!doc.contains(key) || !doc[key].is_array())
            throw Error("taxonomy", std::string("taxonomy key missing or not a list: ") + key);
        std::set<std::string> seen;
        for (const auto& v : doc[key]) {
            auto s = v.get<std::string>();
            if (!seen.insert(s).second)
                throw Error("taxonomy", std::string("duplicate entry in ") + key + ": " + s);
            out.push_back(std::move(s));
        }
        if (out.empty()) throw Error("taxonomy", std::string("taxonomy list is empty: ") + key);
    };
    read_list("topics", tax.topics);
    read_list("sources", tax.sources);
    read_list("candidates", tax.candidates);
    read_list("parties", tax.parties);
    return tax;
}

inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
    return taxonomy_from_json(load_document(path));
}

/// Optional validation context for ingestion.
struct CorpusRules {
    std::optional<Taxonomy> taxonomy;
    std::optional<TimePoint> window_start;
    std::optional<TimePoint> window_end;
};

enum class CorpusFormat { Jsonl, Csv };

inline CorpusFormat parse_corpus_format(std::string_view name) {
    auto n = to_lower(trim(name));
    if (n == "jsonl") return CorpusFormat::Jsonl;
    if (n == "csv") return CorpusFormat::Csv;
    throw Error("format", "unknown corpus format: " + std::string(name));
}

struct SkippedRow {
    std::size_t row = 0;  // 1-based line number in the input file
    std::string reason;
};

struct LoadResult {
    std::vector<Article> articles;
    std::vector<SkippedRow> skipped;
};

inline constexpr std::array<const char*, 7> kArticleFields{"id",           "url",   "source", "topic",
                                                           "published_at", "title", "text"};

namespace detail {

// Returns an empty string when the article is valid, else the skip reason.
inline std::string validate_article(const Article& a, const CorpusRules& rules) {
    if (trim(a.id).empty()) return "empty id";
    if (trim(a.text).empty()) return "empty text";
    if (rules.taxonomy) {
        const auto& t = *rules.taxonomy;
        if (std::find(t.sources.begin(), t.sources.end(), a.source) == t.sources.end())
            return "unknown source: " + a.source;
        if (std::find(t.topics.begin(), t.topics.end(), a.topic) == t.topics.end())
            return "unknown topic: " + a.topic;
    }
    if (rules.window_start && a.published_at < *rules.window_start) return "outside collection window";
    if (rules.window_end && a.published_at > *rules.window_end) return "outside collection window";
    return {};
}

inline std::string article_from_fields(const std::map<std::string, std::string>& fields, Article& out) {
    for (const char* key : kArticleFields)
        if (!fields.count(key)) return std::string("missing field: ") + key;
    out.id = fields.at("id");
    out.url = fields.at("url");
    out.source = fields.at("source");
    out.topic = fields.at("topic");
    out.title = fields.at("title");
    out.text = fields.at("text");
    if (!parse_rfc3339(fields.at("published_at"), out.published_at)) return "invalid published_at";
    return {};
}

}  // namespace detail

inline json article_to_json(const Article& a) {
    auto millis = a.published_at.time_since_epoch().count() % 1000 != 0;
    return json{{"id", a.id},
                {"url", a.url},
                {"source", a.source},
                {"topic", a.topic},
                {"published_at", format_rfc3339(a.published_at, millis)},
                {"title", a.title},
                {"text", a.text}};
}

/// Strict single-record conversion; throws on any field or invariant problem.
inline Article article_from_json(const json& j) {
    std::map<std::string, std::string> fields;
    for (const char* key : kArticleFields)
        if (j.contains(key) && j[key].is_string()) fields[key] = j[key].get<std::string>();
    Article a;
    auto reason = detail::article_from_fields(fields, a);
    if (reason.empty()) reason = detail::validate_article(a, {});
    if (!reason.empty()) throw Error("article", reason);
    return a;
}

/// Loads every valid record; per-row problems are collected in `skipped`.
/// Duplicate ids abort the load.
inline LoadResult load_articles(const std::filesystem::path& path, CorpusFormat format,
                                const CorpusRules& rules = {}) {
    auto text = read_file(path);
    LoadResult result;
    std::set<std::string> ids;

    auto accept = [&](std::size_t row, const std::map<std::string, std::string>& fields) {
        Article a;
        auto reason = detail::article_from_fields(fields, a);
        if (reason.empty()) reason = detail::validate_article(a, rules);
        if (!reason.empty()) {
            result.skipped.push_back({row, std::move(reason)});
            return;
        }
        if (!ids.insert(a.id).second)
            throw Error("duplicate_id", path.string() + ":" + std::to_string(row) + ": duplicate article id " + a.id);
        result.articles.push_back(std::move(a));
    };

    if (format == CorpusFormat::Jsonl) {
        auto lines = split_lines(text);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (trim(lines[i]).empty()) continue;
            json j;
            try {
                j = json::parse(lines[i]);
            } catch (const json::exception&) {
                result.skipped.push_back({i + 1, "malformed json"});
                continue;
            }
            if (!j.is_object()) {
                result.skipped.push_back({i + 1, "malformed json"});
                continue;
            }
            std::map<std::string, std::string> fields;
            std::string bad;
            for (const char* key : kArticleFields) {
                if (!j.contains(key)) continue;
                if (!j[key].is_string()) {
                    bad = std::string("non-string field: ") + key;
                    break;
                }
                fields[key] = j[key].get<std::string>();
            }
            if (!bad.empty()) {
                result.skipped.push_back({i + 1, bad});
                continue;
            }
            accept(i + 1, fields);
        }
        return result;
    }

    auto rows = parse_csv(text);
    if (rows.empty()) throw Error("format", path.string() + ": missing CSV header");
    const std::vector<std::string> expected(kArticleFields.begin(), kArticleFields.end());
    std::vector<std::string> header;
    for (const auto& h : rows[0]) header.emplace_back(trim(h));
    if (header != expected)
        throw Error("format", path.string() + ": CSV header must be id,url,source,topic,published_at,title,text");
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != expected.size()) {
            result.skipped.push_back({r + 1, "wrong column count"});
            continue;
        }
        std::map<std::string, std::string> fields;
        for (std::size_t c = 0; c < expected.size(); ++c) fields[expected[c]] = rows[r][c];
        accept(r + 1, fields);
    }
    return result;
}

inline std::string articles_to_jsonl(const std::vector<Article>& articles) {
    std::string out;
    for (const auto& a : articles) {
        out += article_to_json(a).dump();
        out.push_back('\n');
    }
    return out;
}

inline std::string articles_to_csv(const std::vector<Article>& articles) {
    std::string out = csv_row({kArticleFields.begin(), kArticleFields.end()});
    for (const auto& a : articles) {
        auto j = article_to_json(a);
        std::vector<std::string> row;
        for (const char* key : kArticleFields) row.push_back(j[key].get<std::string>());
        out += csv_row(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gold labels

inline Provenance parse_provenance(std::string_view text) {
    auto n = to_lower(trim(text));
    std::erase(n, '_');
    std::erase(n, ' ');
    if (n.empty() || n == "imported") return Provenance::Imported;
    if (n == "humanreviewed") return Provenance::HumanReviewed;
    throw Error("gold", "unknown provenance: " + std::string(text));
}

/// Parses `article_id,label[,provenance]` with a header row.
inline GoldSet parse_gold_csv(std::string_view text, const std::string& origin = "<gold>") {
    auto rows = parse_csv(text);
    if (rows.empty()) throw Error("gold", origin + ": missing header");
    std::vector<std::string> header;
    for (const auto& h : rows[0]) header.push_back(to_lower(trim(h)));
    bool has_prov = header.size() == 3 && header[2] == "provenance";
    if (header.size() < 2 || header[0] != "article_id" || header[1] != "label" ||
        (header.size() == 3 && !has_prov) || header.size() > 3)
        throw Error("gold", origin + ": header must be article_id,label[,provenance]");
    GoldSet gold;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        auto where = origin + ":" + std::to_string(r + 1);
        if (row.size() < 2 || row.size() > header.size()) throw Error("gold", where + ": wrong column count");
        GoldLabel g;
        g.article_id = std::string(trim(row[0]));
        auto label = try_parse_label(row[1]);
        if (!label) throw Error("gold", where + ": unparseable label \"" + row[1] + "\"");
        g.label = *label;
        if (row.size() == 3) g.provenance = parse_provenance(row[2]);
        if (!gold.emplace(g.article_id, g).second)
            throw Error("gold", where + ": duplicate article_id " + g.article_id);
    }
    return gold;
}

inline GoldSet load_gold_labels(const std::filesystem::path& path) {
    return parse_gold_csv(read_file(path), path.string());
}

inline std::string gold_to_csv(const GoldSet& gold) {
    std::string out = "article_id,label,provenance\n";
    for (const auto& [id, g] : gold)
        out += csv_row({id, std::string(to_string(g.label)), std::string(to_string(g.provenance))});
    return out;
}

// ---------------------------------------------------------------------------
// Stratified sampling

enum class StratifyBy { Topic, Source, Both };

inline StratifyBy parse_stratify_by(std::string_view name) {
    auto n = to_lower(trim(name));
    if (n == "topic") return StratifyBy::Topic;
    if (n == "source") return StratifyBy::Source;
    if (n == "both") return StratifyBy::Both;
    throw Error("usage", "unknown stratification key: " + std::string(name));
}

inline std::string stratum_key(const Article& a, StratifyBy by) {
    switch (by) {
    case StratifyBy::Topic: return a.topic;
    case StratifyBy::Source: return a.source;
    case StratifyBy::Both: return a.topic + '\x1f' + a.source;
    }
    return {};
}

/// Largest-remainder (Hamilton) allocation of `n` over strata sizes. Ties on
/// the remainder go to the earlier stratum.
inline std::vector<std::size_t> largest_remainder_allocation(const std::vector<std::size_t>& sizes,
                                                             std::size_t n) {
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    std::vector<std::size_t> alloc(sizes.size(), 0);
    if (total == 0 || n == 0) return alloc;
    std::vector<std::pair<std::size_t, std::size_t>> remainders;  // (remainder numerator, index)
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        auto scaled = static_cast<unsigned __int128>(n) * sizes[i];
        alloc[i] = static_cast<std::size_t>(scaled / total);
        remainders.emplace_back(static_cast<std::size_t>(scaled % total), i);
        assigned += alloc[i];
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++alloc[remainders[k].second];
    return alloc;
}

/// Equal share per stratum, capped by stratum size; capacity left over by
/// small strata is spread over the rest, and indivisible units go to the
/// earlier strata.
inline std::vector<std::size_t> uniform_allocation(const std::vector<std::size_t>& sizes, std::size_t n) {
    std::vector<std::size_t> alloc(sizes.size(), 0);
    std::size_t remaining = n;
    while (remaining > 0) {
        std::vector<std::size_t> open;
        for (std::size_t i = 0; i < sizes.size(); ++i)
            if (alloc[i] < sizes[i]) open.push_back(i);
        if (open.empty()) break;
        auto share = remaining / open.size();
        if (share == 0) {
            for (std::size_t k = 0; k < remaining; ++k) ++alloc[open[k]];
            break;
        }
        for (auto i : open) {
            auto give = std::min(share, sizes[i] - alloc[i]);
            alloc[i] += give;
            remaining -= give;
        }
    }
    return alloc;
}

enum class Allocation { Proportional, Uniform };

inline Allocation parse_allocation(std::string_view name) {
    auto n = to_lower(trim(name));
    if (n == "proportional") return Allocation::Proportional;
    if (n == "uniform") return Allocation::Uniform;
    throw Error("usage", "unknown allocation: " + std::string(name));
}

namespace detail {

// Unbiased bounded draw; the std distributions are not portable bit-for-bit.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
    auto limit = std::numeric_limits<std::uint64_t>::max() - (std::numeric_limits<std::uint64_t>::max() % bound);
    std::uint64_t x;
    do x = rng();
    while (x >= limit);
    return x % bound;
}

}  // namespace detail

/// Deterministic stratified sample. The result keeps corpus order. Strata
/// are visited in key order.
inline std::vector<Article> stratified_sample(const std::vector<Article>& articles, std::size_t n,
                                              StratifyBy by, std::uint64_t seed,
                                              Allocation allocation = Allocation::Proportional) {
    if (n == 0) return {};
    if (articles.empty()) throw Error("sample", "cannot sample from an empty corpus");
    if (n > articles.size())
        throw Error("sample", "sample size " + std::to_string(n) + " exceeds corpus size " +
                                  std::to_string(articles.size()));

    std::map<std::string, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < articles.size(); ++i) strata[stratum_key(articles[i], by)].push_back(i);

    std::vector<std::size_t> sizes;
    for (const auto& [key, members] : strata) sizes.push_back(members.size());
    auto alloc = allocation == Allocation::Uniform ? uniform_allocation(sizes, n)
                                                   : largest_remainder_allocation(sizes, n);

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> chosen;
    std::size_t s = 0;
    for (auto& [key, members] : strata) {
        auto pool = members;
        for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[detail::bounded(rng, i)]);
        chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(alloc[s++]));
    }
    std::sort(chosen.begin(), chosen.end());
    std::vector<Article> out;
    out.reserve(chosen.size());
    for (auto i : chosen) out.push_back(articles[i]);
    return out;
}

}  // namespace factlab
