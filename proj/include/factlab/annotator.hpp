#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "factlab/corpus.hpp"
#include "factlab/gateway.hpp"
#include "factlab/label.hpp"
#include "factlab/prompt.hpp"

namespace factlab {

inline constexpr std::string_view kArticlePlaceholder = "{article}";
inline constexpr std::string_view kTargetMarker = "Article to analyze:";

/// Checks the annotation-template contract: one `{article}` placeholder and
/// both output-section markers.
inline void validate_annotation_template(const PromptTemplate& t) {
    auto n = count_occurrences(t.body, kArticlePlaceholder);
    if (n != 1)
        throw Error("template", "template " + t.id() + " must contain exactly one {article} placeholder (found " +
                                    std::to_string(n) + ")");
    if (t.body.find("Classification:") == std::string::npos || t.body.find("Explanation:") == std::string::npos)
        throw Error("template", "template " + t.id() + " lacks the Classification:/Explanation: markers");
}

struct FewShotExample {
    std::string article_text;
    Label label = Label::FactuallyCorrect;
    std::string explanation;
};

inline std::vector<FewShotExample> load_shots(const std::filesystem::path& path) {
    std::vector<FewShotExample> shots;
    for (const auto& j : read_jsonl(path)) {
        FewShotExample s;
        s.article_text = j.at("article_text").get<std::string>();
        s.label = parse_label(j.at("label").get<std::string>());
        s.explanation = j.at("explanation").get<std::string>();
        if (trim(s.explanation).empty()) throw Error("shots", path.string() + ": demonstration explanation is empty");
        shots.push_back(std::move(s));
    }
    return shots;
}

// FewShot is the --allow-any-shots escape hatch (any positive count but five).
enum class ShotMode { ZeroShot, FiveShot, FewShot };

inline std::string_view to_string(ShotMode m) {
    switch (m) {
    case ShotMode::ZeroShot: return "zero_shot";
    case ShotMode::FiveShot: return "five_shot";
    case ShotMode::FewShot: return "few_shot";
    }
    return "";
}

inline ShotMode parse_shot_mode(std::string_view s) {
    if (s == "zero_shot") return ShotMode::ZeroShot;
    if (s == "five_shot") return ShotMode::FiveShot;
    if (s == "few_shot") return ShotMode::FewShot;
    throw Error("parse", "unknown shot mode: " + std::string(s));
}

inline ShotMode shot_mode_for_count(std::size_t n) {
    return n == 0 ? ShotMode::ZeroShot : n == 5 ? ShotMode::FiveShot : ShotMode::FewShot;
}

/// Canonical rendering of a verdict, the same format the prompt requests.
inline std::string render_annotation(Label label, std::string_view explanation) {
    return "Classification: " + std::string(to_string(label)) + "\nExplanation: " + std::string(explanation);
}

/// Truncates to at most `max_chars` bytes without splitting a UTF-8 sequence.
inline std::string truncate_utf8(std::string_view text, std::size_t max_chars, bool& truncated) {
    truncated = max_chars > 0 && text.size() > max_chars;
    if (!truncated) return std::string(text);
    auto cut = max_chars;
    while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
    return std::string(text.substr(0, cut));
}

/// Zero-shot when `shots` is empty, five-shot when it holds exactly five;
/// other counts are rejected unless `allow_any_count`. Returns a single user
/// message with the demonstrations placed before the target article.
inline Messages build_prompt(const PromptTemplate& tmpl, const Article& article,
                             const std::vector<FewShotExample>& shots, std::size_t max_chars = 0,
                             bool* truncated = nullptr, bool allow_any_count = false) {
    validate_annotation_template(tmpl);
    if (!allow_any_count && !shots.empty() && shots.size() != 5)
        throw Error("shots", "expected 0 or 5 demonstrations, got " + std::to_string(shots.size()));

    std::string body = tmpl.body;
    if (!shots.empty()) {
        std::string demos = shots.size() == 5 ? "Here are five examples of analyzed articles:\n\n"
                                              : "Here are " + std::to_string(shots.size()) +
                                                    " examples of analyzed articles:\n\n";
        for (std::size_t i = 0; i < shots.size(); ++i) {
            demos += "Example " + std::to_string(i + 1) + ":\nArticle: " + shots[i].article_text + "\n" +
                     render_annotation(shots[i].label, shots[i].explanation) + "\n\n";
        }
        auto at = body.find(kTargetMarker);
        if (at == std::string::npos) at = body.find(kArticlePlaceholder);
        at = body.rfind('\n', at) == std::string::npos ? 0 : body.rfind('\n', at) + 1;
        body.insert(at, demos);
    }
    bool cut = false;
    auto text = truncate_utf8(article.text, max_chars, cut);
    if (truncated) *truncated = cut;
    return {{"user", render_placeholders(body, {{"article", text}})}};
}

// ---------------------------------------------------------------------------
// Response parsing

struct ParsedAnnotation {
    std::optional<Label> label;  // nullopt is a parse failure
    std::string explanation;

    bool operator==(const ParsedAnnotation&) const = default;
};

namespace detail {

inline bool is_markup(char c) { return c == '*' || c == '_' || c == '#' || c == '>' || c == '`'; }

// If `line` (ignoring markdown decoration) starts with `word` followed by ':',
// returns the offset just past the colon.
inline std::optional<std::size_t> marker_end(std::string_view line, std::string_view word) {
    std::size_t i = 0;
    while (i < line.size() && (std::isspace(static_cast<unsigned char>(line[i])) || is_markup(line[i]))) ++i;
    if (line.size() - i < word.size()) return std::nullopt;
    for (std::size_t k = 0; k < word.size(); ++k)
        if (std::tolower(static_cast<unsigned char>(line[i + k])) != word[k]) return std::nullopt;
    i += word.size();
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || is_markup(line[i]))) ++i;
    if (i >= line.size() || line[i] != ':') return std::nullopt;
    return i + 1;
}

// Which labels does this fragment mention? bit 0 = correct, bit 1 = incorrect.
inline int labels_mentioned(std::string_view fragment) {
    std::string cleaned;
    for (char c : fragment)
        if (!is_markup(c) && c != '[' && c != ']') cleaned.push_back(c);
    auto norm = normalize_words(cleaned);
    int bits = 0;
    if (norm.find("factually correct") != std::string::npos) bits |= 1;
    if (norm.find("factually incorrect") != std::string::npos) bits |= 2;
    return bits;
}

}  // namespace detail

/// Total over strings; never throws.
///
/// The label comes from the first `Classification:` line that names a label
/// (the next non-blank line is consulted when the marker stands alone).
/// A line naming both labels is a parse failure. The explanation is the text
/// after the first `Explanation:` marker, up to a later classification line.
inline ParsedAnnotation parse_annotation(std::string_view raw) noexcept {
    ParsedAnnotation out;
    try {
        auto lines = split_lines(raw);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            auto end = detail::marker_end(lines[i], "classification");
            if (!end) continue;
            std::string_view rest = std::string_view(lines[i]).substr(*end);
            int bits = detail::labels_mentioned(rest);
            if (bits == 0 && std::all_of(rest.begin(), rest.end(), [](char c) {
                    return std::isspace(static_cast<unsigned char>(c)) || detail::is_markup(c) || c == '[' || c == ']';
                })) {
                std::size_t j = i + 1;
                while (j < lines.size() && trim(lines[j]).empty()) ++j;
                if (j < lines.size()) bits = detail::labels_mentioned(lines[j]);
            }
            if (bits == 0) continue;
            if (bits == 1) out.label = Label::FactuallyCorrect;
            if (bits == 2) out.label = Label::FactuallyIncorrect;
            break;
        }

        for (std::size_t i = 0; i < lines.size(); ++i) {
            auto end = detail::marker_end(lines[i], "explanation");
            if (!end) continue;
            std::string text = lines[i].substr(*end);
            for (std::size_t j = i + 1; j < lines.size(); ++j) {
                if (detail::marker_end(lines[j], "classification")) break;
                text += '\n';
                text += lines[j];
            }
            std::string_view v = text;
            while (!v.empty() && (std::isspace(static_cast<unsigned char>(v.front())) || detail::is_markup(v.front())))
                v.remove_prefix(1);
            out.explanation = std::string(trim(v));
            break;
        }
    } catch (...) {
        // Allocation failure is the only thing that can land here.
        return ParsedAnnotation{};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Annotation records

enum class Outcome { Labeled, ParseFailure, TransportFailure };

inline std::string_view to_string(Outcome o) {
    switch (o) {
    case Outcome::Labeled: return "labeled";
    case Outcome::ParseFailure: return "parse_failure";
    case Outcome::TransportFailure: return "transport_failure";
    }
    return "";
}

inline Outcome parse_outcome(std::string_view s) {
    if (s == "labeled") return Outcome::Labeled;
    if (s == "parse_failure") return Outcome::ParseFailure;
    if (s == "transport_failure") return Outcome::TransportFailure;
    throw Error("parse", "unknown outcome: " + std::string(s));
}

struct Annotation {
    std::string article_id;
    std::string endpoint_name;
    ShotMode shot_mode = ShotMode::ZeroShot;
    Outcome outcome = Outcome::ParseFailure;
    std::optional<Label> label;  // set iff outcome == Labeled
    std::string explanation;
    std::string raw_response;
    std::string exchange_ref;
    bool truncated = false;
    std::string error;

    bool labeled() const { return outcome == Outcome::Labeled; }
    bool operator==(const Annotation&) const = default;
};

inline json annotation_to_json(const Annotation& a) {
    json j{{"article_id", a.article_id},
           {"endpoint", a.endpoint_name},
           {"shot_mode", to_string(a.shot_mode)},
           {"outcome", to_string(a.outcome)},
           {"label", a.label ? json(to_string(*a.label)) : json(nullptr)},
           {"explanation", a.explanation},
           {"raw_response", a.raw_response},
           {"exchange_ref", a.exchange_ref},
           {"truncated", a.truncated}};
    if (!a.error.empty()) j["error"] = a.error;
    return j;
}

inline Annotation annotation_from_json(const json& j) {
    Annotation a;
    a.article_id = j.at("article_id").get<std::string>();
    a.endpoint_name = j.at("endpoint").get<std::string>();
    a.shot_mode = parse_shot_mode(j.at("shot_mode").get<std::string>());
    a.outcome = parse_outcome(j.at("outcome").get<std::string>());
    if (!j.at("label").is_null()) a.label = parse_label(j["label"].get<std::string>());
    a.explanation = j.value("explanation", std::string{});
    a.raw_response = j.value("raw_response", std::string{});
    a.exchange_ref = j.value("exchange_ref", std::string{});
    a.truncated = j.value("truncated", false);
    a.error = j.value("error", std::string{});
    if (a.labeled() != a.label.has_value())
        throw Error("parse", "annotation " + a.article_id + "/" + a.endpoint_name + ": label and outcome disagree");
    return a;
}

inline std::vector<Annotation> load_annotations(const std::filesystem::path& path) {
    std::vector<Annotation> out;
    for (const auto& j : read_jsonl(path)) out.push_back(annotation_from_json(j));
    return out;
}

inline std::string annotations_to_jsonl(const std::vector<Annotation>& annotations) {
    std::string out;
    for (const auto& a : annotations) {
        out += annotation_to_json(a).dump();
        out.push_back('\n');
    }
    return out;
}

/// Turns a raw response into an Annotation.
inline Annotation annotation_from_response(const std::string& article_id, const std::string& endpoint,
                                           ShotMode mode, const std::string& raw) {
    Annotation a;
    a.article_id = article_id;
    a.endpoint_name = endpoint;
    a.shot_mode = mode;
    a.raw_response = raw;
    auto parsed = parse_annotation(raw);
    a.label = parsed.label;
    a.explanation = parsed.explanation;
    a.outcome = parsed.label ? Outcome::Labeled : Outcome::ParseFailure;
    return a;
}

// ---------------------------------------------------------------------------
// Corpus annotation

struct AnnotateOptions {
    ShotMode shot_mode = ShotMode::ZeroShot;
    std::vector<FewShotExample> shots;
    std::size_t concurrency = 4;
    std::size_t max_chars = 0;  // 0 disables truncation
    std::filesystem::path out_dir = ".";
    std::string run_id;
    std::string config_hash;
    std::string tool_version = "0.0.0";
    json inputs = json::object();  // recorded verbatim in the manifest
    // Polled before each request; returning true stops the run early.
    std::function<bool()> interrupt;
};

struct AnnotationRun {
    std::vector<Annotation> annotations;
    json manifest;
    bool complete = false;
};

inline std::string annotation_key(const std::string& article_id, const std::string& endpoint) {
    return article_id + '\x1f' + endpoint;
}

inline std::string exchange_ref_for(const std::string& article_id, const std::string& endpoint, ShotMode mode) {
    return endpoint + "/" + article_id + "/" + std::string(to_string(mode));
}

/// Annotates every (article, endpoint) pair, resuming from an existing
/// `annotations.jsonl` in `out_dir`. The log is appended to as results arrive
/// and rewritten in canonical (corpus × panel) order once the run completes.
inline AnnotationRun annotate_corpus(const std::vector<Article>& articles, const Panel& panel,
                                     const PromptTemplate& tmpl, const AnnotateOptions& opts,
                                     Gateway& gateway) {
    if (panel.empty()) throw Error("usage", "panel is empty");
    validate_annotation_template(tmpl);
    if (shot_mode_for_count(opts.shots.size()) != opts.shot_mode)
        throw Error("shots", std::string(to_string(opts.shot_mode)) + " does not match " +
                                 std::to_string(opts.shots.size()) + " demonstrations");

    namespace fs = std::filesystem;
    fs::create_directories(opts.out_dir);
    auto log_path = opts.out_dir / "annotations.jsonl";
    auto manifest_path = opts.out_dir / "run_manifest.json";

    std::set<std::string> wanted;
    for (const auto& a : articles)
        for (const auto& e : panel) wanted.insert(annotation_key(a.id, e.name));

    // Recover prior progress; a torn final line from a killed writer is dropped
    // and transport failures are retried.
    std::map<std::string, Annotation> done;
    if (fs::exists(log_path)) {
        for (const auto& j : read_jsonl(log_path, true)) {
            auto a = annotation_from_json(j);
            if (a.shot_mode != opts.shot_mode)
                throw Error("resume", log_path.string() + " holds " + std::string(to_string(a.shot_mode)) +
                                          " annotations; refusing to mix shot modes");
            auto key = annotation_key(a.article_id, a.endpoint_name);
            if (wanted.count(key) && a.outcome != Outcome::TransportFailure) done.emplace(key, std::move(a));
        }
        std::vector<Annotation> kept;
        for (const auto& [_, a] : done) kept.push_back(a);
        write_file_atomic(log_path, annotations_to_jsonl(kept));
    }
    const auto resumed = done.size();

    struct Work {
        const Article* article;
        const EndpointConfig* endpoint;
    };
    std::vector<Work> work;
    for (const auto& a : articles)
        for (const auto& e : panel)
            if (!done.count(annotation_key(a.id, e.name))) work.push_back({&a, &e});

    auto started = now_utc();
    json manifest{{"run_id", opts.run_id},
                  {"stage", "annotate"},
                  {"status", "running"},
                  {"template", {{"name", tmpl.name}, {"version", tmpl.version}, {"sha256", tmpl.digest()}}},
                  {"shot_mode", to_string(opts.shot_mode)},
                  {"panel", json::array()},
                  {"panel_hash", panel_hash(panel)},
                  {"config_hash", opts.config_hash},
                  {"tool_version", opts.tool_version},
                  {"max_chars", opts.max_chars},
                  {"started_at", format_rfc3339(started)},
                  {"inputs", opts.inputs},
                  {"outputs",
                   {{"annotations", log_path.string()}, {"exchanges", (opts.out_dir / "exchanges.jsonl").string()}}}};
    for (const auto& e : panel) manifest["panel"].push_back(e.name);
    write_file_atomic(manifest_path, manifest.dump(2) + "\n");

    std::mutex out_mu;
    std::ofstream out(log_path, std::ios::app | std::ios::binary);
    if (!out) throw Error("io", "cannot open " + log_path.string());
    std::map<std::string, std::int64_t> endpoint_ms;
    std::atomic<bool> stopped{false};

    parallel_for(work.size(), opts.concurrency, [&](std::size_t i) {
        if (stopped || (opts.interrupt && opts.interrupt())) {
            stopped = true;
            return;
        }
        const auto& [article, endpoint] = work[i];
        bool truncated = false;
        auto messages = build_prompt(tmpl, *article, opts.shots, opts.max_chars, &truncated,
                                     opts.shot_mode == ShotMode::FewShot);
        auto ref = exchange_ref_for(article->id, endpoint->name, opts.shot_mode);
        Annotation a;
        std::int64_t ms = 0;
        try {
            auto x = gateway.complete(*endpoint, messages, ref);
            ms = x.latency.count();
            a = annotation_from_response(article->id, endpoint->name, opts.shot_mode, x.response_text);
        } catch (const Error& e) {
            if (e.kind() != "transport" && e.kind() != "protocol") throw;
            a.article_id = article->id;
            a.endpoint_name = endpoint->name;
            a.shot_mode = opts.shot_mode;
            a.outcome = Outcome::TransportFailure;
            a.error = e.kind() + ": " + e.what();
        }
        a.exchange_ref = ref;
        a.truncated = truncated;
        std::lock_guard lock(out_mu);
        out << annotation_to_json(a).dump() << '\n';
        out.flush();
        endpoint_ms[endpoint->name] += ms;
        done.emplace(annotation_key(a.article_id, a.endpoint_name), std::move(a));
    });
    out.close();

    AnnotationRun run;
    run.complete = done.size() == wanted.size();
    for (const auto& art : articles)
        for (const auto& e : panel)
            if (auto it = done.find(annotation_key(art.id, e.name)); it != done.end())
                run.annotations.push_back(it->second);
    if (run.complete) write_file_atomic(log_path, annotations_to_jsonl(run.annotations));

    std::size_t parse_failures = 0, transport_failures = 0, truncated = 0;
    for (const auto& a : run.annotations) {
        parse_failures += a.outcome == Outcome::ParseFailure;
        transport_failures += a.outcome == Outcome::TransportFailure;
        truncated += a.truncated;
    }
    auto finished = now_utc();
    manifest["status"] = run.complete ? "complete" : "interrupted";
    manifest["finished_at"] = format_rfc3339(finished);
    manifest["wall_clock_ms"] = (finished - started).count();
    manifest["endpoint_latency_ms"] = endpoint_ms;
    manifest["counts"] = {{"articles", articles.size()},
                          {"endpoints", panel.size()},
                          {"annotations", run.annotations.size()},
                          {"resumed", resumed},
                          {"parse_failures", parse_failures},
                          {"transport_failures", transport_failures},
                          {"truncated", truncated}};
    write_file_atomic(manifest_path, manifest.dump(2) + "\n");
    run.manifest = std::move(manifest);
    return run;
}

}  // namespace factlab
