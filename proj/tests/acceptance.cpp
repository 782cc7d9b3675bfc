// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "process.hpp"
#include "report_fixture.hpp"
#include "support.hpp"

using namespace factlab;
using namespace oracles;
using testsupport::TempDir;
namespace fs = std::filesystem;

namespace {

constexpr Label C = Label::FactuallyCorrect;
constexpr Label I = Label::FactuallyIncorrect;

struct Check {
    bool ok = true;
    std::ostringstream detail;

    void require(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            detail.str("");
            detail << what;
        }
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

void metrics_oracle(Check& o) {
    auto t0 = Clock::now();
    std::mt19937 rng(2025);
    int trials = 0;
    for (; trials < 1000 && o.ok; ++trials) {
        auto n = 1 + rng() % 200;
        auto bias = rng() % 101;
        std::vector<Label> truth, predicted;
        for (std::size_t k = 0; k < n; ++k) {
            truth.push_back(rng() % 100 < bias ? C : I);
            predicted.push_back(rng() % 2 ? C : I);
        }
        auto p = make_pairs(truth, predicted);
        auto m = confusion(p.annotations, p.gold);
        for (bool weighted : {true, false}) {
            auto s = classification_report(m, weighted ? Averaging::Weighted : Averaging::Macro);
            auto b = brute_force(truth, predicted, weighted);
            auto close = [](double x, double y) { return std::abs(x - y) <= 1e-12; };
            o.require(close(s.accuracy, b.accuracy) && close(s.precision, b.precision) && close(s.recall, b.recall) &&
                          close(s.f1, b.f1),
                      "trial " + std::to_string(trials) + " differs from brute force");
            if (weighted) o.require(close(s.recall, s.accuracy), "weighted recall != accuracy");
        }
    }
    double secs = seconds_since(t0);
    o.require(secs < 10.0, "took " + std::to_string(secs) + " s");
    if (o.ok) o.detail << trials << " trials, tolerance 1e-12, " << secs << " s";
}

void vote_oracle(Check& o) {
    auto t0 = Clock::now();
    std::size_t ties = 0, combos = 0;
    for (unsigned n : {5u, 4u}) {
        for (unsigned bits = 0; bits < (1u << n); ++bits) {
            std::vector<Label> votes;
            for (unsigned k = 0; k < n; ++k) votes.push_back(bits >> k & 1 ? I : C);
            auto want = oracle_majority(votes);
            o.require(majority_vote(votes).majority == want, "mismatch at n=" + std::to_string(n));
            ties += !want;
            ++combos;
        }
    }
    double secs = seconds_since(t0);
    o.require(secs < 1.0, "took " + std::to_string(secs) + " s");
    // C(4,2) = 6 ties among four votes, none among five.
    o.require(ties == 6, "expected 6 ties, saw " + std::to_string(ties));
    if (o.ok) o.detail << combos << " combinations, " << ties << " ties, " << secs << " s";
}

void parser_fuzz(Check& o) {
    std::mt19937 rng(10'000);
    std::size_t cases = 0, compared = 0;
    for (int i = 0; i < 10'000; ++i, ++cases) {
        auto raw = i % 2 ? mutate_well_formed(rng) : random_garbage(rng);
        ParsedAnnotation got;
        try {
            got = parse_annotation(raw);
        } catch (const std::exception& e) {
            o.require(false, std::string("parse_annotation threw: ") + e.what());
            continue;
        }
        // The regex oracle is only defined over plain ASCII.
        if (std::all_of(raw.begin(), raw.end(), [](char c) {
                auto u = static_cast<unsigned char>(c);
                return u < 0x80 && c != '\0' && c != '\v' && c != '\f';
            })) {
            auto want = reference_parse(raw);
            o.require(got.label == want.label && got.explanation == want.explanation, "annotation oracle mismatch");
            ++compared;
        }
    }
    const std::vector<std::string> cands{"alpha", "beta-2"};
    for (int i = 0; i < 10'000; ++i, ++cases) {
        auto raw = i % 2 ? judge_fuzz_input(rng) : random_garbage(rng);
        try {
            auto b = parse_judge_response(JudgeMode::BinaryAgreement, raw);
            auto c = parse_judge_response(JudgeMode::Comparative, raw, cands);
            if (i % 2) {
                o.require(b.agrees == reference_binary(raw), "binary verdict oracle mismatch");
                o.require(c.preferred_model == reference_comparative(raw, cands), "comparative oracle mismatch");
                ++compared;
            }
        } catch (const std::exception& e) {
            o.require(false, std::string("parse_judge_response threw: ") + e.what());
        }
    }
    std::size_t round_trips = 0;
    static const std::string alphabet = "abcdefghij KLMNOP.,;:!?'\"()-0123456789\n";
    for (int i = 0; i < 2000; ++i) {
        Label label = rng() % 2 ? C : I;
        std::string e;
        auto len = 1 + rng() % 120;
        for (std::size_t k = 0; k < len; ++k) e.push_back(alphabet[rng() % alphabet.size()]);
        e = std::string(trim(e));
        if (e.empty()) e = "x";
        auto p = parse_annotation(render_annotation(label, e));
        o.require(p.label == label && p.explanation == e, "annotation round-trip failed");
        ParsedVerdict b;
        b.agrees = rng() % 2;
        b.justification = "Justification " + std::to_string(i) + ".";
        o.require(parse_judge_response(JudgeMode::BinaryAgreement, render_judge_response(JudgeMode::BinaryAgreement, b)) == b,
                  "binary round-trip failed");
        ParsedVerdict c;
        c.preferred_model = cands[rng() % cands.size()];
        c.justification = "Reason " + std::to_string(i) + ".";
        o.require(parse_judge_response(JudgeMode::Comparative, render_judge_response(JudgeMode::Comparative, c), cands) == c,
                  "comparative round-trip failed");
        round_trips += 3;
    }
    if (o.ok)
        o.detail << cases << " fuzz cases without failure (" << compared << " checked against reference), "
                 << round_trips << " round-trips";
}

// Article text carries a key the mock uses to pick the scripted reply.
Article synthetic_article(const std::string& id, const std::string& tag = "") {
    return testsupport::article(id, "[ref:" + id + "]" + tag + " Synthetic report number " + id + ".");
}

void synthetic_end_to_end(Check& o) {
    auto t0 = Clock::now();
    const std::size_t n = 400;
    const std::vector<std::pair<std::string, std::size_t>> designed{
        {"ann90", 360}, {"ann85", 340}, {"ann80", 320}, {"ann75", 300}, {"ann70", 280}};

    std::vector<Article> corpus;
    GoldSet gold;
    for (std::size_t i = 0; i < n; ++i) {
        auto id = "s" + std::to_string(1000 + i);
        corpus.push_back(synthetic_article(id));
        gold[id] = GoldLabel{id, i % 3 == 0 ? I : C, Provenance::Imported};
    }
    // correct[k][i]: annotator k labels article i correctly. Each annotator is
    // wrong on a seeded random subset of exactly n - hits articles.
    std::vector<std::vector<bool>> correct;
    json script{{"models", json::object()}};
    std::mt19937 rng(400);
    for (const auto& [name, hits] : designed) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<bool> row(n, true);
        for (std::size_t k = 0; k < n - hits; ++k) row[order[k]] = false;
        json responses = json::object();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& a = corpus[i];
            auto truth = gold[a.id].label;
            Label said = row[i] ? truth : (truth == C ? I : C);
            responses[a.id] = render_annotation(said, "scripted for " + a.id);
        }
        script["models"][name] = {{"key_pattern", R"(\[ref:(\w+)\])"}, {"responses", responses}};
        correct.push_back(row);
    }

    MockLlmServer mock(mock_script_from_json(script));
    mock.start();
    Panel panel;
    for (const auto& [name, _] : designed) panel.push_back(testsupport::endpoint(name, mock.base_url()));
    TempDir dir;
    AnnotateOptions opts;
    opts.out_dir = dir.path();
    opts.concurrency = 4;
    Gateway gateway;
    auto run = annotate_corpus(corpus, panel, testsupport::annotation_template(), opts, gateway);
    o.require(run.complete && run.annotations.size() == n * designed.size(), "annotation run incomplete");

    auto rows = evaluate_annotations(run.annotations, gold);
    o.require(rows.size() == designed.size(), "expected one metrics row per annotator");
    std::ostringstream accs;
    for (std::size_t k = 0; k < rows.size() && k < designed.size(); ++k) {
        double want = static_cast<double>(designed[k].second) / static_cast<double>(n);
        o.require(rows[k].endpoint == designed[k].first && rows[k].scores.accuracy == want,
                  rows[k].endpoint + " measured " + std::to_string(rows[k].scores.accuracy) + ", designed " +
                      std::to_string(want));
        accs << (k ? "/" : "") << format_percent(rows[k].scores.accuracy);
    }

    // Independent enumeration: an article's majority is right when at least
    // three of the five annotators are right.
    std::size_t enumerated = 0;
    for (std::size_t i = 0; i < n; ++i) {
        int right = 0;
        for (const auto& row : correct) right += row[i];
        enumerated += right >= 3;
    }
    std::size_t pipeline = 0;
    for (const auto& r : build_vote_records(run.annotations))
        pipeline += r.majority_label && *r.majority_label == gold.at(r.article_id).label;
    o.require(pipeline == enumerated, "majority-vote accuracy " + std::to_string(pipeline) + "/400 vs enumeration " +
                                          std::to_string(enumerated) + "/400");
    double secs = seconds_since(t0);
    o.require(secs < 60.0, "took " + std::to_string(secs) + " s");
    if (o.ok)
        o.detail << "annotators " << accs.str() << ", majority " << pipeline << "/" << n << " = enumeration, " << secs
                 << " s";
}

void agreement_rate_reproduction(Check& o) {
    std::vector<Article> corpus;
    std::vector<Annotation> annotations;
    for (int i = 0; i < 500; ++i) {
        auto id = "j" + std::to_string(i);
        corpus.push_back(synthetic_article(id, i < 382 ? " [agree]" : ""));
        annotations.push_back(testsupport::labeled(id, "Llama-3-8B-Instruct", i % 2 ? C : I, "scripted"));
    }
    json script{{"models",
                 {{"GPT-4o-mini",
                   {{"rules", {{{"contains", "[agree]"}, {"response", "Yes. The label matches the article."}}}},
                    {"default", "No. The label does not match."}}}}}};
    MockLlmServer mock(mock_script_from_json(script));
    mock.start();
    TempDir dir;
    JudgeOptions opts;
    opts.samples = 0;
    opts.out_dir = dir.path();
    Gateway gateway;
    auto tmpl = load_template(fs::path(FACTLAB_SOURCE_DIR) / "prompts" / "judge" / "binary_v1.txt");
    auto verdicts = judge_annotations(corpus, annotations, {testsupport::endpoint("GPT-4o-mini", mock.base_url())},
                                      tmpl, nullptr, opts, gateway);
    o.require(verdicts.size() == 500, "expected 500 verdicts, got " + std::to_string(verdicts.size()));
    auto report = build_agreement_report(verdicts, annotations, nullptr);
    o.require(report.rows.size() == 1, "expected one annotator row");
    if (!o.ok) return;
    const auto& s = report.rows[0].per_judge.at("GPT-4o-mini");
    o.require(s.hits == 382 && s.valid == 500, "hits/valid = " + std::to_string(s.hits) + "/" + std::to_string(s.valid));
    auto latex = render_agreement_latex(report);
    o.require(latex.find("Llama-3-8B-Instruct & \\textbf{76.4\\%}") != std::string::npos ||
                  latex.find("Llama-3-8B-Instruct & 76.4\\%") != std::string::npos,
              "LaTeX cell is not 76.4\\%");
    if (o.ok) o.detail << s.hits << "/" << s.valid << " -> " << format_percent(s.rate, true);
}

void report_shape(Check& o) {
    TempDir plain, timed;
    auto rows = testsupport::reference_metrics_rows();
    auto agreement = testsupport::reference_agreement_report();
    o.require(rows.size() == 10, "fixture must have 10 method rows");
    render_tables(rows, &agreement, plain.path());
    TableOptions with_time;
    with_time.include_time = true;
    render_tables(rows, nullptr, timed.path(), with_time);
    const std::vector<std::pair<fs::path, std::string>> checks{{plain / "metrics_report.md", "table1.md"},
                                                                {timed / "metrics_report.tex", "table1.tex"},
                                                                {plain / "agreement_report.md", "table2.md"},
                                                                {plain / "agreement_report.tex", "table2.tex"}};
    for (const auto& [path, golden] : checks)
        o.require(read_file(path) == testsupport::fixture_text(golden), path.filename().string() + " != " + golden);
    if (o.ok) o.detail << "10 method rows; metrics and agreement golden tables match byte for byte";
}

TimePoint at(int seconds) {
    TimePoint t;
    parse_rfc3339("2024-08-01T09:00:00Z", t);
    return t + std::chrono::seconds(seconds);
}

void review_state_machine(Check& o) {
    std::mt19937 rng(31337);
    const std::vector<std::pair<std::string, ReviewerRole>> people{
        {"r1", ReviewerRole::Reviewer}, {"r2", ReviewerRole::Reviewer}, {"r3", ReviewerRole::Reviewer},
        {"r4", ReviewerRole::Reviewer}, {"s1", ReviewerRole::Senior},   {"s2", ReviewerRole::Senior}};
    const std::set<std::pair<TaskState, TaskState>> legal{{TaskState::Open, TaskState::Resolved},
                                                          {TaskState::Open, TaskState::AwaitingEscalation},
                                                          {TaskState::AwaitingEscalation, TaskState::Resolved}};
    std::size_t resolved = 0, slates = 0, senior = 0;
    for (int trial = 0; trial < 10'000 && o.ok; ++trial) {
        ReviewTask t;
        t.article_id = "a1";
        t.opened_at = at(0);
        for (int step = 0; step < 8; ++step) {
            auto before = t;
            bool by_senior = false;
            try {
                if (rng() % 6 == 0) {
                    t = escalate(t, "flag");
                } else {
                    const auto& [who, role] = people[rng() % people.size()];
                    by_senior = role == ReviewerRole::Senior;
                    t = submit_decision(t, ReviewerDecision{"a1", who, role, rng() % 2 ? C : I, "", at(step)});
                }
            } catch (const ReviewError&) {
                o.require(t == before, "rejected transition mutated the task");
                continue;
            }
            if (t.state != before.state) o.require(legal.count({before.state, t.state}) > 0, "illegal transition");
            if (by_senior) {
                o.require(before.state == TaskState::AwaitingEscalation, "senior decided a non-escalated task");
                o.require(t.state == TaskState::Resolved && t.resolved_by == ResolvedBy::SeniorDecision,
                          "senior decision did not resolve");
                ++senior;
            }
            std::size_t reviewers = 0;
            for (const auto& d : t.decisions) reviewers += d.role == ReviewerRole::Reviewer;
            if (reviewers == 3) {
                o.require(t.state == TaskState::Resolved, "full slate left unresolved");
                if (before.state != TaskState::Resolved) ++slates;
            }
        }
        resolved += t.state == TaskState::Resolved;
    }

    // Replay: random histories through the store, then rebuild from the log.
    auto roster = roster_from_json(json::parse(R"([{"id":"r1"},{"id":"r2"},{"id":"r3"},{"id":"r4"},
                                                   {"id":"s1","role":"Senior"}])"));
    const std::vector<std::string> ids{"t0", "t1", "t2", "t3", "t4", "t5"};
    std::vector<Annotation> run;
    for (std::size_t k = 0; k < ids.size(); ++k)
        for (int m = 0; m < 3; ++m)
            run.push_back(testsupport::labeled(ids[k], "m" + std::to_string(m), m < static_cast<int>(k % 3) ? I : C));
    auto records = build_vote_records(run);
    const std::vector<std::string> who{"r1", "r2", "r3", "r4", "s1"};
    int replays = 0;
    for (; replays < 50 && o.ok; ++replays) {
        TempDir dir;
        std::vector<ReviewTask> live;
        {
            ReviewStore store(roster, std::make_shared<ReviewEventLog>(dir / "events.jsonl"));
            store.open(ids, run, records, at(0));
            for (int step = 0; step < 40; ++step) {
                const auto& id = ids[rng() % ids.size()];
                try {
                    if (rng() % 7 == 0)
                        store.flag_escalation(id, who[rng() % 4], "");
                    else
                        store.submit(id, who[rng() % who.size()], rng() % 2 ? C : I, "", std::nullopt, at(step));
                } catch (const ReviewError&) {
                }
            }
            live = store.list();
        }
        std::vector<ReviewTask> rebuilt;
        for (const auto& [_, t] : replay_event_log(dir / "events.jsonl").tasks) rebuilt.push_back(t);
        o.require(rebuilt == live, "replay differs from live state");
    }
    if (o.ok)
        o.detail << "10000 sequences (" << slates << " full slates, " << senior << " senior resolutions, " << resolved
                 << " resolved), " << replays << " replays exact";
}

void resumability(Check& o) {
    const std::size_t articles = 60;
    std::vector<Article> corpus;
    json responses = json::object();
    for (std::size_t i = 0; i < articles; ++i) {
        auto id = "r" + std::to_string(100 + i);
        corpus.push_back(synthetic_article(id));
        responses[id] = render_annotation(i % 4 ? C : I, "scripted reply for " + id);
    }
    json script{{"models", json::object()}};
    std::vector<std::string> names{"m1", "m2", "m3", "m4", "m5"};
    for (const auto& m : names)
        script["models"][m] = {{"key_pattern", R"(\[ref:(\w+)\])"}, {"responses", responses}, {"delay_ms", 15}};
    MockLlmServer mock(mock_script_from_json(script));
    mock.start();

    TempDir dir;
    write_file_atomic(dir / "corpus.jsonl", articles_to_jsonl(corpus));
    json panel = json::array();
    for (const auto& m : names)
        panel.push_back(endpoint_to_json(testsupport::endpoint(m, mock.base_url())));
    write_file_atomic(dir / "panel.json", panel.dump(2));
    auto annotate = [&](const fs::path& out) {
        return std::vector<std::string>{FACTLAB_CLI_PATH, "annotate", "--corpus", (dir / "corpus.jsonl").string(),
                                        "--panel", (dir / "panel.json").string(), "--out-dir", out.string()};
    };

    auto clean = testsupport::run_process(annotate(dir / "clean"), dir.path());
    o.require(clean.exit_code == 0, "uninterrupted run failed: " + clean.err);

    std::random_device seed_source;
    auto seed = seed_source();
    std::mt19937 rng(seed);
    std::size_t kept_lines = 0;
    int attempts = 0;
    // Kill somewhere inside the run; retry if the kill landed after it finished.
    for (; attempts < 5 && o.ok; ++attempts) {
        fs::remove_all(dir / "resumed");
        int kill_after_ms = 50 + static_cast<int>(rng() % 700);
        testsupport::Child child(annotate(dir / "resumed"), dir.path(), "victim");
        std::this_thread::sleep_for(std::chrono::milliseconds(kill_after_ms));
        child.signal(SIGKILL);
        int code = child.wait();
        if (code != 128 + SIGKILL) continue;
        auto partial = dir / "resumed" / "annotations.jsonl";
        kept_lines = fs::exists(partial) ? split_lines(read_file(partial)).size() : 0;
        if (kept_lines >= articles * names.size()) continue;
        auto resumed = testsupport::run_process(annotate(dir / "resumed"), dir.path());
        o.require(resumed.exit_code == 0, "resumed run failed: " + resumed.err);
        o.require(read_file(dir / "resumed" / "annotations.jsonl") == read_file(dir / "clean" / "annotations.jsonl"),
                  "resumed annotations differ from the uninterrupted run");
        if (o.ok)
            o.detail << "SIGKILL after " << kill_after_ms << " ms (seed " << seed << ", " << kept_lines << "/"
                     << articles * names.size() << " records on disk), resumed artifact identical";
        return;
    }
    o.require(false, "could not interrupt a run in " + std::to_string(attempts) + " attempts");
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<void(Check&)>>> criteria{
        {"metrics oracle equivalence", metrics_oracle},
        {"vote oracle equivalence", vote_oracle},
        {"parser totality and round-trip", parser_fuzz},
        {"synthetic end-to-end fidelity", synthetic_end_to_end},
        {"agreement-rate reproduction", agreement_rate_reproduction},
        {"report shape", report_shape},
        {"review state machine", review_state_machine},
        {"resumability", resumability},
    };
    int failures = 0;
    for (const auto& [name, check] : criteria) {
        Check o;
        try {
            check(o);
        } catch (const std::exception& e) {
            o.require(false, std::string("exception: ") + e.what());
        }
        failures += !o.ok;
        std::cout << (o.ok ? "PASS" : "FAIL") << "  " << name << ": " << o.detail.str() << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
