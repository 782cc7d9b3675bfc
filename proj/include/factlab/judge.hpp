#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "factlab/annotator.hpp"
#include "factlab/corpus.hpp"
#include "factlab/gateway.hpp"
#include "factlab/prompt.hpp"

namespace factlab {

enum class JudgeMode { BinaryAgreement, Comparative };

inline std::string_view to_string(JudgeMode m) {
    return m == JudgeMode::BinaryAgreement ? "BinaryAgreement" : "Comparative";
}

inline JudgeMode parse_judge_mode(std::string_view s) {
    auto n = to_lower(trim(s));
    if (n == "binary" || n == "binaryagreement" || n == "binary_agreement") return JudgeMode::BinaryAgreement;
    if (n == "comparative") return JudgeMode::Comparative;
    throw Error("usage", "unknown judge mode: " + std::string(s));
}

/// "Model A", "Model B", ... for candidate position `i`.
inline std::string model_alias(std::size_t i) {
    std::string out = "Model ";
    if (i >= 26) out += static_cast<char>('A' + i / 26 - 1);
    out += static_cast<char>('A' + i % 26);
    return out;
}

// ---------------------------------------------------------------------------
// Prompts

inline std::string render_annotation_block(const Annotation& a) {
    if (!a.label) throw Error("judge", "annotation " + a.article_id + "/" + a.endpoint_name + " has no label to judge");
    return render_annotation(*a.label, a.explanation);
}

/// BinaryAgreement takes exactly one labeled annotation; Comparative takes at
/// least two and shows them under aliases in the given order.
inline Messages build_judge_prompt(JudgeMode mode, const PromptTemplate& tmpl, const Article& article,
                                   const std::vector<Annotation>& annotations,
                                   std::optional<Label> gold = std::nullopt) {
    if (mode == JudgeMode::BinaryAgreement) {
        if (annotations.size() != 1)
            throw Error("judge", "binary judging takes exactly one annotation, got " + std::to_string(annotations.size()));
        const auto& a = annotations.front();
        render_annotation_block(a);
        return {{"user", render_placeholders(tmpl.body, {{"article", article.text},
                                                         {"label", std::string(to_string(*a.label))},
                                                         {"explanation", a.explanation}})}};
    }
    if (annotations.size() < 2)
        throw Error("judge", "comparative judging needs at least two annotations, got " +
                                 std::to_string(annotations.size()));
    std::string block;
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        if (i) block += "\n\n";
        block += model_alias(i) + ":\n" + render_annotation_block(annotations[i]);
    }
    return {{"user", render_placeholders(tmpl.body, {{"text", article.text},
                                                     {"label", gold ? std::string(to_string(*gold)) : "Not provided"},
                                                     {"annotations", block}})}};
}

// ---------------------------------------------------------------------------
// Response parsing

struct ParsedVerdict {
    std::optional<bool> agrees;                 // BinaryAgreement
    std::optional<std::string> preferred_model;  // Comparative (a candidate name)
    std::string justification;

    bool parse_failure(JudgeMode mode) const {
        return mode == JudgeMode::BinaryAgreement ? !agrees.has_value() : !preferred_model.has_value();
    }
    bool operator==(const ParsedVerdict&) const = default;
};

namespace detail {

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

// Case-insensitive whole-word search. Dots and hyphens followed by a word
// character continue a word ("llama-3.1" is not a mention of "llama-3").
inline std::vector<std::size_t> find_mentions(std::string_view text_lower, std::string_view needle_lower) {
    std::vector<std::size_t> hits;
    if (needle_lower.empty()) return hits;
    for (auto pos = text_lower.find(needle_lower); pos != std::string_view::npos;
         pos = text_lower.find(needle_lower, pos + 1)) {
        bool left_ok = pos == 0 || !is_word_char(text_lower[pos - 1]);
        auto end = pos + needle_lower.size();
        bool right_ok = end >= text_lower.size() || !is_word_char(text_lower[end]);
        if (right_ok && end + 1 < text_lower.size() && (text_lower[end] == '.' || text_lower[end] == '-') &&
            is_word_char(text_lower[end + 1]))
            right_ok = false;
        if (left_ok && right_ok) hits.push_back(pos);
    }
    return hits;
}

// Sentence ends: '.', '!' or '?' followed by whitespace or end, or a newline.
inline std::vector<std::pair<std::size_t, std::size_t>> sentence_spans(std::string_view text) {
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        bool end = text[i] == '\n';
        if ((text[i] == '.' || text[i] == '!' || text[i] == '?') &&
            (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]))))
            end = true;
        if (end) {
            spans.emplace_back(start, i + 1);
            start = i + 1;
        }
    }
    if (start < text.size()) spans.emplace_back(start, text.size());
    return spans;
}

}  // namespace detail

/// Total over strings. BinaryAgreement: the first standalone yes/no token
/// decides. Comparative: the first sentence that mentions any candidate (by
/// name or by "Model X" alias) must mention exactly one of them. The
/// justification is whatever follows the deciding token or sentence.
inline ParsedVerdict parse_judge_response(JudgeMode mode, std::string_view raw,
                                          const std::vector<std::string>& candidates = {}) noexcept {
    ParsedVerdict out;
    try {
        if (mode == JudgeMode::BinaryAgreement) {
            std::size_t i = 0;
            while (i < raw.size()) {
                while (i < raw.size() && !detail::is_word_char(raw[i])) ++i;
                auto start = i;
                while (i < raw.size() && detail::is_word_char(raw[i])) ++i;
                auto word = to_lower(raw.substr(start, i - start));
                if (word == "yes" || word == "no") {
                    out.agrees = word == "yes";
                    auto rest = raw.substr(i);
                    while (!rest.empty() && !detail::is_word_char(rest.front())) rest.remove_prefix(1);
                    out.justification = std::string(trim(rest));
                    break;
                }
            }
            return out;
        }

        out.justification = std::string(trim(raw));
        auto lower = to_lower(raw);
        std::string_view text = raw;
        // mention position → candidate index
        std::vector<std::pair<std::size_t, std::size_t>> mentions;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            for (auto pos : detail::find_mentions(lower, to_lower(candidates[c]))) mentions.emplace_back(pos, c);
            for (auto pos : detail::find_mentions(lower, to_lower(model_alias(c)))) mentions.emplace_back(pos, c);
        }
        if (mentions.empty()) return out;
        for (const auto& [begin, end] : detail::sentence_spans(raw)) {
            std::set<std::size_t> named;
            for (const auto& [pos, c] : mentions)
                if (pos >= begin && pos < end) named.insert(c);
            if (named.empty()) continue;
            if (named.size() == 1) {
                out.preferred_model = candidates[*named.begin()];
                out.justification = std::string(trim(text.substr(end)));
            }
            break;
        }
    } catch (...) {
        return ParsedVerdict{};
    }
    return out;
}

/// Canonical response text; parse_judge_response inverts it for any
/// justification that is trimmed and, in binary mode, starts with a word
/// character.
inline std::string render_judge_response(JudgeMode mode, const ParsedVerdict& v) {
    if (mode == JudgeMode::BinaryAgreement) {
        if (!v.agrees) throw Error("judge", "binary verdict without a decision");
        return std::string(*v.agrees ? "Yes" : "No") + ". " + v.justification;
    }
    if (!v.preferred_model) throw Error("judge", "comparative verdict without a choice");
    return *v.preferred_model + " better aligns with the label.\n" + v.justification;
}

// ---------------------------------------------------------------------------
// Verdicts

struct JudgeVerdict {
    std::string article_id;
    std::string annotator_endpoint;  // empty in Comparative mode
    std::string judge_endpoint;
    JudgeMode mode = JudgeMode::BinaryAgreement;
    std::optional<bool> agrees;
    std::optional<std::string> preferred_model;
    std::vector<std::string> candidates;  // Comparative: endpoint names in alias order
    std::string justification;
    std::string raw_response;
    std::string error;  // transport/protocol failure

    bool parse_failure() const {
        return mode == JudgeMode::BinaryAgreement ? !agrees.has_value() : !preferred_model.has_value();
    }
    bool operator==(const JudgeVerdict&) const = default;
};

inline json verdict_to_json(const JudgeVerdict& v) {
    json j{{"article_id", v.article_id},
           {"annotator", v.annotator_endpoint},
           {"judge", v.judge_endpoint},
           {"mode", to_string(v.mode)},
           {"agrees", v.agrees ? json(*v.agrees) : json(nullptr)},
           {"preferred_model", v.preferred_model ? json(*v.preferred_model) : json(nullptr)},
           {"candidates", v.candidates},
           {"justification", v.justification},
           {"raw_response", v.raw_response},
           {"parse_failure", v.parse_failure()}};
    if (!v.error.empty()) j["error"] = v.error;
    return j;
}

inline JudgeVerdict verdict_from_json(const json& j) {
    JudgeVerdict v;
    v.article_id = j.at("article_id").get<std::string>();
    v.annotator_endpoint = j.value("annotator", std::string{});
    v.judge_endpoint = j.at("judge").get<std::string>();
    v.mode = parse_judge_mode(j.at("mode").get<std::string>());
    if (!j.at("agrees").is_null()) v.agrees = j["agrees"].get<bool>();
    if (!j.at("preferred_model").is_null()) v.preferred_model = j["preferred_model"].get<std::string>();
    v.candidates = j.value("candidates", std::vector<std::string>{});
    v.justification = j.value("justification", std::string{});
    v.raw_response = j.value("raw_response", std::string{});
    v.error = j.value("error", std::string{});
    return v;
}

inline std::vector<JudgeVerdict> load_verdicts(const std::filesystem::path& path) {
    std::vector<JudgeVerdict> out;
    for (const auto& j : read_jsonl(path)) out.push_back(verdict_from_json(j));
    return out;
}

inline std::string verdicts_to_jsonl(const std::vector<JudgeVerdict>& verdicts) {
    std::string out;
    for (const auto& v : verdicts) out += verdict_to_json(v).dump() + "\n";
    return out;
}

/// Re-derives a verdict from its stored raw response.
inline JudgeVerdict reparse_verdict(JudgeVerdict v) {
    if (!v.error.empty()) return v;
    auto parsed = parse_judge_response(v.mode, v.raw_response, v.candidates);
    v.agrees = parsed.agrees;
    v.preferred_model = parsed.preferred_model;
    v.justification = parsed.justification;
    return v;
}

// ---------------------------------------------------------------------------
// Agreement rates

struct RateStats {
    double rate = 0.0;
    std::size_t hits = 0;
    std::size_t valid = 0;
    std::size_t excluded = 0;
};

/// Fraction of valid binary verdicts that agree; parse and transport
/// failures are excluded and counted.
inline RateStats agreement_rate(const std::vector<JudgeVerdict>& verdicts) {
    RateStats s;
    for (const auto& v : verdicts) {
        if (v.mode != JudgeMode::BinaryAgreement)
            throw Error("judge", "agreement_rate takes BinaryAgreement verdicts only");
        if (v.parse_failure()) {
            ++s.excluded;
            continue;
        }
        ++s.valid;
        s.hits += *v.agrees;
    }
    if (s.valid == 0) throw Error("judge", "no valid verdicts to compute an agreement rate");
    s.rate = static_cast<double>(s.hits) / static_cast<double>(s.valid);
    return s;
}

/// Fraction of labeled annotations that match gold, over annotations whose
/// article has a gold label. Unlabeled annotations are excluded and counted.
inline RateStats ground_truth_agreement(const std::vector<Annotation>& annotations, const GoldSet& gold) {
    RateStats s;
    for (const auto& a : annotations) {
        auto it = gold.find(a.article_id);
        if (it == gold.end()) continue;
        if (!a.labeled()) {
            ++s.excluded;
            continue;
        }
        ++s.valid;
        s.hits += *a.label == it->second.label;
    }
    if (s.valid == 0) throw Error("judge", "no labeled annotations overlap the gold set");
    s.rate = static_cast<double>(s.hits) / static_cast<double>(s.valid);
    return s;
}

struct AgreementRow {
    std::string annotator;
    std::map<std::string, RateStats> per_judge;  // judge endpoint → rate
    std::optional<RateStats> ground_truth;
};

struct AgreementReport {
    JudgeMode mode = JudgeMode::BinaryAgreement;
    std::vector<std::string> judges;
    std::vector<AgreementRow> rows;
    std::size_t sample_count = 0;
};

/// BinaryAgreement: per annotator, AR under each judge plus AR against gold,
/// both over the judged sample. Comparative: per candidate, the share of each
/// judge's valid verdicts that preferred it.
inline AgreementReport build_agreement_report(const std::vector<JudgeVerdict>& verdicts,
                                              const std::vector<Annotation>& annotations, const GoldSet* gold,
                                              const std::vector<std::string>& annotator_order = {}) {
    AgreementReport report;
    std::set<std::string> sample;
    std::vector<std::string> judges;
    for (const auto& v : verdicts) {
        sample.insert(v.article_id);
        if (std::find(judges.begin(), judges.end(), v.judge_endpoint) == judges.end())
            judges.push_back(v.judge_endpoint);
    }
    report.judges = judges;
    report.sample_count = sample.size();
    if (!verdicts.empty()) report.mode = verdicts.front().mode;

    std::vector<std::string> annotators = annotator_order;
    auto note_annotator = [&](const std::string& name) {
        if (!name.empty() && std::find(annotators.begin(), annotators.end(), name) == annotators.end())
            annotators.push_back(name);
    };
    for (const auto& v : verdicts) {
        if (v.mode != report.mode) throw Error("judge", "verdicts mix judge modes");
        if (v.mode == JudgeMode::BinaryAgreement)
            note_annotator(v.annotator_endpoint);
        else
            for (const auto& c : v.candidates) note_annotator(c);
    }

    for (const auto& name : annotators) {
        AgreementRow row;
        row.annotator = name;
        for (const auto& judge : judges) {
            if (report.mode == JudgeMode::BinaryAgreement) {
                std::vector<JudgeVerdict> mine;
                for (const auto& v : verdicts)
                    if (v.annotator_endpoint == name && v.judge_endpoint == judge) mine.push_back(v);
                if (mine.empty()) continue;
                try {
                    row.per_judge[judge] = agreement_rate(mine);
                } catch (const Error&) {
                    RateStats empty;
                    empty.excluded = mine.size();
                    row.per_judge[judge] = empty;
                }
            } else {
                RateStats s;
                for (const auto& v : verdicts) {
                    if (v.judge_endpoint != judge) continue;
                    if (std::find(v.candidates.begin(), v.candidates.end(), name) == v.candidates.end()) continue;
                    if (v.parse_failure()) {
                        ++s.excluded;
                        continue;
                    }
                    ++s.valid;
                    s.hits += *v.preferred_model == name;
                }
                if (s.valid) s.rate = static_cast<double>(s.hits) / static_cast<double>(s.valid);
                if (s.valid || s.excluded) row.per_judge[judge] = s;
            }
        }
        if (gold) {
            std::vector<Annotation> mine;
            for (const auto& a : annotations)
                if (a.endpoint_name == name && (sample.empty() || sample.count(a.article_id))) mine.push_back(a);
            try {
                row.ground_truth = ground_truth_agreement(mine, *gold);
            } catch (const Error&) {
            }
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

inline json agreement_report_to_json(const AgreementReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) {
        json judges = json::object();
        for (const auto& [j, s] : row.per_judge)
            judges[j] = {{"rate", s.rate}, {"hits", s.hits}, {"valid", s.valid}, {"excluded", s.excluded}};
        json gt = nullptr;
        if (row.ground_truth)
            gt = {{"rate", row.ground_truth->rate},
                  {"hits", row.ground_truth->hits},
                  {"valid", row.ground_truth->valid},
                  {"excluded", row.ground_truth->excluded}};
        rows.push_back({{"annotator", row.annotator}, {"judges", judges}, {"ground_truth", gt}});
    }
    return json{{"mode", to_string(r.mode)}, {"judges", r.judges}, {"sample_count", r.sample_count}, {"rows", rows}};
}

inline AgreementReport agreement_report_from_json(const json& j) {
    AgreementReport r;
    r.mode = parse_judge_mode(j.at("mode").get<std::string>());
    r.judges = j.at("judges").get<std::vector<std::string>>();
    r.sample_count = j.at("sample_count").get<std::size_t>();
    auto stats = [](const json& s) {
        RateStats out;
        out.rate = s.at("rate").get<double>();
        out.hits = s.at("hits").get<std::size_t>();
        out.valid = s.at("valid").get<std::size_t>();
        out.excluded = s.at("excluded").get<std::size_t>();
        return out;
    };
    for (const auto& rj : j.at("rows")) {
        AgreementRow row;
        row.annotator = rj.at("annotator").get<std::string>();
        for (const auto& [name, s] : rj.at("judges").items()) row.per_judge[name] = stats(s);
        if (!rj.at("ground_truth").is_null()) row.ground_truth = stats(rj["ground_truth"]);
        r.rows.push_back(std::move(row));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Self-enhancement guard

struct FamilyConflict {
    std::string annotator;
    std::string judge;
    std::string family;
};

/// Pairs where a judge shares a (non-empty) family tag with an annotator.
inline std::vector<FamilyConflict> self_enhancement_conflicts(const Panel& annotators, const Panel& judges) {
    std::vector<FamilyConflict> out;
    for (const auto& j : judges)
        for (const auto& a : annotators)
            if (!j.family.empty() && to_lower(j.family) == to_lower(a.family)) out.push_back({a.name, j.name, j.family});
    return out;
}

// ---------------------------------------------------------------------------
// Judge runs

struct JudgeOptions {
    JudgeMode mode = JudgeMode::BinaryAgreement;
    std::size_t samples = 500;  // articles judged; 0 or more than available means all
    std::uint64_t seed = 0;
    std::size_t concurrency = 4;
    std::filesystem::path out_dir = ".";
    bool strict_family_guard = false;
    Panel annotator_panel;  // for the family guard; may be empty
    std::vector<std::string>* warnings = nullptr;
};

/// Picks `n` article ids uniformly without replacement (seeded), in input order.
inline std::vector<std::string> sample_ids(const std::vector<std::string>& ids, std::size_t n, std::uint64_t seed) {
    if (n == 0 || n >= ids.size()) return ids;
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[detail::bounded(rng, i)]);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(ids[i]);
    return out;
}

/// Judges a sample of annotated articles with every judge endpoint and
/// writes `verdicts.jsonl` to `out_dir` (resuming an existing one).
inline std::vector<JudgeVerdict> judge_annotations(const std::vector<Article>& articles,
                                                   const std::vector<Annotation>& annotations, const Panel& judges,
                                                   const PromptTemplate& tmpl, const GoldSet* gold,
                                                   const JudgeOptions& opts, Gateway& gateway) {
    if (judges.empty()) throw Error("usage", "no judge endpoints configured");
    auto conflicts = self_enhancement_conflicts(opts.annotator_panel, judges);
    for (const auto& c : conflicts) {
        auto msg = "judge " + c.judge + " shares model family '" + c.family + "' with annotator " + c.annotator;
        if (opts.strict_family_guard) throw Error("config", "self-enhancement guard: " + msg);
        if (opts.warnings) opts.warnings->push_back(msg);
    }

    std::map<std::string, const Article*> by_id;
    for (const auto& a : articles) by_id[a.id] = &a;
    std::vector<std::string> ids;
    std::map<std::string, std::vector<const Annotation*>> per_article;
    for (const auto& a : annotations) {
        if (!a.labeled() || !by_id.count(a.article_id)) continue;
        auto& v = per_article[a.article_id];
        if (v.empty()) ids.push_back(a.article_id);
        v.push_back(&a);
    }
    if (opts.mode == JudgeMode::Comparative)
        std::erase_if(ids, [&](const std::string& id) { return per_article[id].size() < 2; });
    auto chosen = sample_ids(ids, opts.samples, opts.seed);

    struct Work {
        std::string article_id;
        std::vector<const Annotation*> subjects;
        const EndpointConfig* judge;
    };
    std::vector<Work> work;
    for (const auto& id : chosen) {
        for (const auto& j : judges) {
            if (opts.mode == JudgeMode::BinaryAgreement)
                for (const auto* a : per_article[id]) work.push_back({id, {a}, &j});
            else
                work.push_back({id, per_article[id], &j});
        }
    }
    auto key_of = [&](const std::string& id, const std::string& annotator, const std::string& judge) {
        return id + '\x1f' + annotator + '\x1f' + judge;
    };

    namespace fs = std::filesystem;
    fs::create_directories(opts.out_dir);
    auto log_path = opts.out_dir / "verdicts.jsonl";
    std::map<std::string, JudgeVerdict> done;
    if (fs::exists(log_path)) {
        for (const auto& j : read_jsonl(log_path, true)) {
            auto v = verdict_from_json(j);
            if (v.mode != opts.mode || !v.error.empty()) continue;  // transport failures are retried
            done.emplace(key_of(v.article_id, v.annotator_endpoint, v.judge_endpoint), std::move(v));
        }
        std::vector<JudgeVerdict> kept;
        for (const auto& [_, v] : done) kept.push_back(v);
        write_file_atomic(log_path, verdicts_to_jsonl(kept));
    }

    std::ofstream out(log_path, std::ios::app | std::ios::binary);
    std::mutex mu;
    parallel_for(work.size(), opts.concurrency, [&](std::size_t i) {
        const auto& w = work[i];
        auto annotator = opts.mode == JudgeMode::BinaryAgreement ? w.subjects.front()->endpoint_name : std::string{};
        auto key = key_of(w.article_id, annotator, w.judge->name);
        {
            std::lock_guard lock(mu);
            if (done.count(key)) return;
        }
        std::vector<Annotation> subjects;
        for (const auto* a : w.subjects) subjects.push_back(*a);
        std::optional<Label> gold_label;
        if (gold)
            if (auto it = gold->find(w.article_id); it != gold->end()) gold_label = it->second.label;
        auto messages = build_judge_prompt(opts.mode, tmpl, *by_id.at(w.article_id), subjects, gold_label);

        JudgeVerdict v;
        v.article_id = w.article_id;
        v.annotator_endpoint = annotator;
        v.judge_endpoint = w.judge->name;
        v.mode = opts.mode;
        if (opts.mode == JudgeMode::Comparative)
            for (const auto& s : subjects) v.candidates.push_back(s.endpoint_name);
        try {
            auto x = gateway.complete(*w.judge, messages, "judge/" + w.judge->name + "/" + w.article_id + "/" + annotator);
            v.raw_response = x.response_text;
            v = reparse_verdict(std::move(v));
        } catch (const Error& e) {
            if (e.kind() != "transport" && e.kind() != "protocol") throw;
            v.error = e.kind() + ": " + e.what();
        }
        std::lock_guard lock(mu);
        out << verdict_to_json(v).dump() << '\n';
        out.flush();
        done.emplace(key, std::move(v));
    });
    out.close();

    std::vector<JudgeVerdict> ordered;
    for (const auto& w : work) {
        auto annotator = opts.mode == JudgeMode::BinaryAgreement ? w.subjects.front()->endpoint_name : std::string{};
        ordered.push_back(done.at(key_of(w.article_id, annotator, w.judge->name)));
    }
    write_file_atomic(log_path, verdicts_to_jsonl(ordered));
    return ordered;
}

}  // namespace factlab
