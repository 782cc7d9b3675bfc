#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "factlab/annotator.hpp"
#include "factlab/corpus.hpp"
#include "factlab/judge.hpp"
#include "factlab/label.hpp"

namespace factlab {

/// Counts indexed [gold][predicted] by index_of(Label).
struct ConfusionMatrix {
    std::array<std::array<std::size_t, 2>, 2> cells{};
    std::size_t excluded = 0;  // annotations left out (failures under the exclude policy)

    void add(Label gold, Label predicted) { ++cells[index_of(gold)][index_of(predicted)]; }

    std::size_t total() const { return cells[0][0] + cells[0][1] + cells[1][0] + cells[1][1]; }
    std::size_t support(Label c) const { return cells[index_of(c)][0] + cells[index_of(c)][1]; }
    std::size_t tp(Label c) const { return cells[index_of(c)][index_of(c)]; }
    std::size_t fp(Label c) const { return cells[index_of(opposite(c))][index_of(c)]; }
    std::size_t fn(Label c) const { return cells[index_of(c)][index_of(opposite(c))]; }
    std::size_t tn(Label c) const { return cells[index_of(opposite(c))][index_of(opposite(c))]; }

    bool operator==(const ConfusionMatrix&) const = default;
};

enum class FailurePolicy {
    Exclude,       // drop unlabeled annotations, count them
    CountAsWrong,  // score them as the label opposite to gold
};

inline FailurePolicy parse_failure_policy(std::string_view s) {
    auto n = to_lower(trim(s));
    if (n == "exclude") return FailurePolicy::Exclude;
    if (n == "wrong" || n == "count-as-wrong" || n == "count_as_wrong") return FailurePolicy::CountAsWrong;
    throw Error("usage", "unknown failure policy: " + std::string(s));
}

/// Annotations without a gold label are ignored entirely.
inline ConfusionMatrix confusion(const std::vector<Annotation>& annotations, const GoldSet& gold,
                                 FailurePolicy policy = FailurePolicy::Exclude) {
    ConfusionMatrix m;
    for (const auto& a : annotations) {
        auto it = gold.find(a.article_id);
        if (it == gold.end()) continue;
        auto truth = it->second.label;
        if (a.labeled())
            m.add(truth, *a.label);
        else if (policy == FailurePolicy::CountAsWrong)
            m.add(truth, opposite(truth));
        else
            ++m.excluded;
    }
    if (m.total() == 0) throw Error("metrics", "no annotation overlaps the gold set");
    return m;
}

enum class Averaging { Weighted, Macro };

inline Averaging parse_averaging(std::string_view s) {
    auto n = to_lower(trim(s));
    if (n == "weighted") return Averaging::Weighted;
    if (n == "macro") return Averaging::Macro;
    throw Error("usage", "unknown averaging mode: " + std::string(s));
}

struct ClassificationScores {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t evaluated = 0;
    std::size_t excluded = 0;

    bool operator==(const ClassificationScores&) const = default;
};

/// Per-class precision/recall/F1 (0 where undefined) averaged by support
/// (weighted) or uniformly (macro). Weighted recall equals accuracy.
inline ClassificationScores classification_report(const ConfusionMatrix& m, Averaging averaging = Averaging::Weighted) {
    const auto total = m.total();
    if (total == 0) throw Error("metrics", "confusion matrix is empty");
    auto ratio = [](std::size_t num, std::size_t den) {
        return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    ClassificationScores s;
    s.evaluated = total;
    s.excluded = m.excluded;
    std::size_t correct = 0;
    for (auto c : kLabels) {
        correct += m.tp(c);
        double p = ratio(m.tp(c), m.tp(c) + m.fp(c));
        double r = ratio(m.tp(c), m.tp(c) + m.fn(c));
        double f = p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
        double w = averaging == Averaging::Weighted ? ratio(m.support(c), total) : 0.5;
        s.precision += w * p;
        s.recall += w * r;
        s.f1 += w * f;
    }
    s.accuracy = ratio(correct, total);
    return s;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsRow {
    std::string endpoint;
    ShotMode shot_mode = ShotMode::ZeroShot;
    ClassificationScores scores;
    std::optional<std::int64_t> wall_clock_ms;

    std::string method() const {
        switch (shot_mode) {
        case ShotMode::ZeroShot: return endpoint + " (zero-shot)";
        case ShotMode::FiveShot: return endpoint + " (5-shot)";
        case ShotMode::FewShot: return endpoint + " (few-shot)";
        }
        return endpoint;
    }
    bool operator==(const MetricsRow&) const = default;
};

/// One row per endpoint (in first-appearance order) for one annotation run.
inline std::vector<MetricsRow> evaluate_annotations(const std::vector<Annotation>& annotations, const GoldSet& gold,
                                                    Averaging averaging = Averaging::Weighted,
                                                    FailurePolicy policy = FailurePolicy::Exclude,
                                                    const json& manifest = nullptr) {
    std::vector<std::pair<std::string, ShotMode>> order;
    std::map<std::pair<std::string, ShotMode>, std::vector<Annotation>> groups;
    for (const auto& a : annotations) {
        auto key = std::make_pair(a.endpoint_name, a.shot_mode);
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(a);
    }
    std::vector<MetricsRow> rows;
    for (const auto& key : order) {
        MetricsRow row;
        row.endpoint = key.first;
        row.shot_mode = key.second;
        row.scores = classification_report(confusion(groups[key], gold, policy), averaging);
        if (manifest.is_object() && manifest.contains("endpoint_latency_ms") &&
            manifest["endpoint_latency_ms"].contains(key.first))
            row.wall_clock_ms = manifest["endpoint_latency_ms"][key.first].get<std::int64_t>();
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string format_percent(double v, bool latex = false) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v * 100.0);
    return std::string(buf) + (latex ? "\\%" : "%");
}

/// "3 hr. 23 min." style; sub-minute durations show seconds.
inline std::string format_duration(std::int64_t ms) {
    auto total_s = ms / 1000;
    if (total_s < 60) return std::to_string(total_s) + " sec.";
    return std::to_string(total_s / 3600) + " hr. " + std::to_string((total_s % 3600) / 60) + " min.";
}

namespace detail {

// Displayed value in tenths of a percent, read back from the formatted text
// so bolding compares exactly what readers see.
inline long long display_key(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v * 100.0);
    std::string digits;
    for (const char* c = buf; *c; ++c)
        if (*c != '.') digits.push_back(*c);
    return std::stoll(digits);
}

inline std::string full_precision(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string md_bold(const std::string& s, bool bold) { return bold ? "**" + s + "**" : s; }
inline std::string tex_bold(const std::string& s, bool bold) { return bold ? "\\textbf{" + s + "}" : s; }

inline std::string tex_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        if (c == '_' || c == '%' || c == '&' || c == '#' || c == '$') out.push_back('\\');
        out.push_back(c);
    }
    return out;
}

inline std::vector<std::array<double, 4>> metric_columns(const std::vector<MetricsRow>& rows) {
    std::vector<std::array<double, 4>> out;
    for (const auto& r : rows) out.push_back({r.scores.accuracy, r.scores.precision, r.scores.recall, r.scores.f1});
    return out;
}

// best[col] = max displayed key over rows
inline std::array<long long, 4> column_best(const std::vector<std::array<double, 4>>& cols) {
    std::array<long long, 4> best{-1, -1, -1, -1};
    for (const auto& row : cols)
        for (std::size_t c = 0; c < 4; ++c) best[c] = std::max(best[c], display_key(row[c]));
    return best;
}

}  // namespace detail

struct TableOptions {
    bool include_time = false;
};

/// Method × (Acc., Prec., Rec., F1[, Time]); column maxima in bold, ties all bold.
inline std::string render_metrics_markdown(const std::vector<MetricsRow>& rows, const TableOptions& opts = {}) {
    auto cols = detail::metric_columns(rows);
    auto best = detail::column_best(cols);
    std::string out = "| Method | Acc. | Prec. | Rec. | F1 |";
    out += opts.include_time ? " Time |\n|---|---|---|---|---|---|\n" : "\n|---|---|---|---|---|\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out += "| " + rows[i].method() + " |";
        for (std::size_t c = 0; c < 4; ++c)
            out += " " + detail::md_bold(format_percent(cols[i][c]), detail::display_key(cols[i][c]) == best[c]) + " |";
        if (opts.include_time)
            out += " " + (rows[i].wall_clock_ms ? format_duration(*rows[i].wall_clock_ms) : std::string("n/a")) + " |";
        out += "\n";
    }
    return out;
}

inline std::string render_metrics_latex(const std::vector<MetricsRow>& rows, const TableOptions& opts = {}) {
    auto cols = detail::metric_columns(rows);
    auto best = detail::column_best(cols);
    std::string out = opts.include_time ? "\\begin{tabular}{llllll}\n\\toprule\n"
                                        : "\\begin{tabular}{lllll}\n\\toprule\n";
    out += "\\textbf{Method} & \\textbf{Acc.} & \\textbf{Prec.} & \\textbf{Rec.} & \\textbf{F1}";
    out += opts.include_time ? " & \\textbf{Time} \\\\ \\midrule\n" : " \\\\ \\midrule\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out += detail::tex_escape(rows[i].method());
        for (std::size_t c = 0; c < 4; ++c)
            out += " & " + detail::tex_bold(format_percent(cols[i][c], true), detail::display_key(cols[i][c]) == best[c]);
        if (opts.include_time)
            out += " & " + (rows[i].wall_clock_ms ? format_duration(*rows[i].wall_clock_ms) : std::string("n/a"));
        out += " \\\\\n";
    }
    out += "\\bottomrule\n\\end{tabular}\n";
    return out;
}

inline constexpr std::string_view kMetricsCsvHeader =
    "method,endpoint,shot_mode,accuracy,precision,recall,f1,evaluated,excluded,wall_clock_ms\n";

inline std::string render_metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string out(kMetricsCsvHeader);
    for (const auto& r : rows)
        out += csv_row({r.method(), r.endpoint, std::string(to_string(r.shot_mode)),
                        detail::full_precision(r.scores.accuracy), detail::full_precision(r.scores.precision),
                        detail::full_precision(r.scores.recall), detail::full_precision(r.scores.f1),
                        std::to_string(r.scores.evaluated), std::to_string(r.scores.excluded),
                        r.wall_clock_ms ? std::to_string(*r.wall_clock_ms) : std::string{}});
    return out;
}

inline std::vector<MetricsRow> parse_metrics_csv(std::string_view text) {
    auto rows = parse_csv(text);
    if (rows.empty() || csv_row(rows[0]) != kMetricsCsvHeader) throw Error("parse", "unexpected metrics CSV header");
    std::vector<MetricsRow> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& f = rows[i];
        if (f.size() != 10) throw Error("parse", "metrics CSV row " + std::to_string(i + 1) + " has wrong width");
        MetricsRow r;
        r.endpoint = f[1];
        r.shot_mode = parse_shot_mode(f[2]);
        r.scores.accuracy = std::stod(f[3]);
        r.scores.precision = std::stod(f[4]);
        r.scores.recall = std::stod(f[5]);
        r.scores.f1 = std::stod(f[6]);
        r.scores.evaluated = std::stoull(f[7]);
        r.scores.excluded = std::stoull(f[8]);
        if (!f[9].empty()) r.wall_clock_ms = std::stoll(f[9]);
        out.push_back(std::move(r));
    }
    return out;
}

inline json metrics_rows_to_json(const std::vector<MetricsRow>& rows) {
    json arr = json::array();
    for (const auto& r : rows)
        arr.push_back({{"method", r.method()},
                       {"endpoint", r.endpoint},
                       {"shot_mode", to_string(r.shot_mode)},
                       {"accuracy", r.scores.accuracy},
                       {"precision", r.scores.precision},
                       {"recall", r.scores.recall},
                       {"f1", r.scores.f1},
                       {"evaluated", r.scores.evaluated},
                       {"excluded", r.scores.excluded},
                       {"wall_clock_ms", r.wall_clock_ms ? json(*r.wall_clock_ms) : json(nullptr)}});
    return json{{"rows", arr}};
}

inline std::vector<MetricsRow> metrics_rows_from_json(const json& j) {
    std::vector<MetricsRow> out;
    for (const auto& rj : j.at("rows")) {
        MetricsRow r;
        r.endpoint = rj.at("endpoint").get<std::string>();
        r.shot_mode = parse_shot_mode(rj.at("shot_mode").get<std::string>());
        r.scores.accuracy = rj.at("accuracy").get<double>();
        r.scores.precision = rj.at("precision").get<double>();
        r.scores.recall = rj.at("recall").get<double>();
        r.scores.f1 = rj.at("f1").get<double>();
        r.scores.evaluated = rj.at("evaluated").get<std::size_t>();
        r.scores.excluded = rj.at("excluded").get<std::size_t>();
        if (!rj.at("wall_clock_ms").is_null()) r.wall_clock_ms = rj["wall_clock_ms"].get<std::int64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Agreement tables

namespace detail {

inline std::string ar_header(const AgreementReport& r, const std::string& judge) {
    return (r.mode == JudgeMode::BinaryAgreement ? "AR (" : "Pref. (") + judge + ")";
}

// Per row, the best judge cell(s) by displayed value.
inline std::vector<long long> row_best(const AgreementReport& r) {
    std::vector<long long> best;
    for (const auto& row : r.rows) {
        long long b = -1;
        for (const auto& j : r.judges)
            if (auto it = row.per_judge.find(j); it != row.per_judge.end() && it->second.valid)
                b = std::max(b, display_key(it->second.rate));
        best.push_back(b);
    }
    return best;
}

}  // namespace detail

/// Annotator × (AR per judge, AR vs ground truth); best judge per row in bold.
inline std::string render_agreement_markdown(const AgreementReport& r) {
    auto best = detail::row_best(r);
    std::string out = "| Method |";
    std::string rule = "|---|";
    for (const auto& j : r.judges) {
        out += " " + detail::ar_header(r, j) + " |";
        rule += "---|";
    }
    out += " AR (Ground Truth) |\n" + rule + "---|\n";
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
        const auto& row = r.rows[i];
        out += "| " + row.annotator + " |";
        for (const auto& j : r.judges) {
            auto it = row.per_judge.find(j);
            if (it == row.per_judge.end() || it->second.valid == 0) {
                out += " n/a |";
                continue;
            }
            out += " " + detail::md_bold(format_percent(it->second.rate),
                                         detail::display_key(it->second.rate) == best[i]) + " |";
        }
        out += " " + (row.ground_truth ? format_percent(row.ground_truth->rate) : std::string("n/a")) + " |\n";
    }
    return out;
}

inline std::string render_agreement_latex(const AgreementReport& r) {
    auto best = detail::row_best(r);
    std::string out = "\\begin{tabular}{l";
    for (std::size_t k = 0; k <= r.judges.size(); ++k) out += "c";
    out += "}\n\\toprule\n\\textbf{Method}";
    for (const auto& j : r.judges) out += " & \\textbf{" + detail::tex_escape(detail::ar_header(r, j)) + "}";
    out += " & \\textbf{AR (Ground Truth)} \\\\ \\midrule\n";
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
        const auto& row = r.rows[i];
        out += detail::tex_escape(row.annotator);
        for (const auto& j : r.judges) {
            auto it = row.per_judge.find(j);
            if (it == row.per_judge.end() || it->second.valid == 0) {
                out += " & n/a";
                continue;
            }
            out += " & " + detail::tex_bold(format_percent(it->second.rate, true),
                                            detail::display_key(it->second.rate) == best[i]);
        }
        out += " & " + (row.ground_truth ? format_percent(row.ground_truth->rate, true) : std::string("n/a")) +
               " \\\\\n";
    }
    out += "\\bottomrule\n\\end{tabular}\n";
    return out;
}

inline std::string render_agreement_csv(const AgreementReport& r) {
    std::vector<std::string> header{"annotator"};
    for (const auto& j : r.judges) {
        header.push_back("rate:" + j);
        header.push_back("valid:" + j);
    }
    header.push_back("ground_truth_rate");
    header.push_back("ground_truth_valid");
    std::string out = csv_row(header);
    for (const auto& row : r.rows) {
        std::vector<std::string> fields{row.annotator};
        for (const auto& j : r.judges) {
            auto it = row.per_judge.find(j);
            fields.push_back(it == row.per_judge.end() ? "" : detail::full_precision(it->second.rate));
            fields.push_back(it == row.per_judge.end() ? "" : std::to_string(it->second.valid));
        }
        fields.push_back(row.ground_truth ? detail::full_precision(row.ground_truth->rate) : "");
        fields.push_back(row.ground_truth ? std::to_string(row.ground_truth->valid) : "");
        out += csv_row(fields);
    }
    return out;
}

// ---------------------------------------------------------------------------
// File emission

struct RenderedReports {
    std::vector<std::filesystem::path> files;
};

/// Writes metrics_report.{md,tex,csv,json} and, when given,
/// agreement_report.{md,tex,csv,json} into `out_dir`.
inline RenderedReports render_tables(const std::vector<MetricsRow>& rows, const AgreementReport* agreement,
                                     const std::filesystem::path& out_dir, const TableOptions& opts = {}) {
    RenderedReports out;
    auto emit = [&](const std::string& name, const std::string& content) {
        auto p = out_dir / name;
        write_file_atomic(p, content);
        out.files.push_back(p);
    };
    if (!rows.empty()) {
        emit("metrics_report.md", render_metrics_markdown(rows, opts));
        emit("metrics_report.tex", render_metrics_latex(rows, opts));
        emit("metrics_report.csv", render_metrics_csv(rows));
        emit("metrics_report.json", metrics_rows_to_json(rows).dump(2) + "\n");
    }
    if (agreement) {
        emit("agreement_report.md", render_agreement_markdown(*agreement));
        emit("agreement_report.tex", render_agreement_latex(*agreement));
        emit("agreement_report.csv", render_agreement_csv(*agreement));
        emit("agreement_report.json", agreement_report_to_json(*agreement).dump(2) + "\n");
    }
    return out;
}

}  // namespace factlab
