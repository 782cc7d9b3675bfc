// factlab: command-line front end for the annotation / review / judging pipeline.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "factlab/factlab.hpp"

namespace fs = std::filesystem;
using namespace factlab;

namespace {

// Looks for bundled data next to the working directory first, then in the
// source tree the binary was built from.
std::string bundled(const std::string& relative) {
    if (fs::exists(relative)) return relative;
    auto in_source = fs::path(FACTLAB_SOURCE_DIR) / relative;
    if (fs::exists(in_source)) return in_source.string();
    return relative;
}

// Resolved option values of one subcommand, hashed into manifests.
json resolved_config(const CLI::App& sub) {
    json cfg = json::object();
    for (const auto* opt : sub.get_options()) {
        auto name = opt->get_single_name();
        if (name.empty() || name == "help") continue;
        if (opt->count() > 0) {
            auto results = opt->results();
            cfg[name] = results.size() == 1 ? json(results.front()) : json(results);
        } else {
            cfg[name] = opt->get_default_str();
        }
    }
    return cfg;
}

std::string config_hash_of(const CLI::App& sub, std::initializer_list<const char*> ignore) {
    auto cfg = resolved_config(sub);
    for (const auto* k : ignore) cfg.erase(k);
    return sha256_hex(cfg.dump());
}

// run_manifest.json for the stages that do not write their own.
void write_stage_manifest(const fs::path& dir, const std::string& stage, const std::string& config_hash,
                          TimePoint started, const json& inputs, const json& outputs, const json& extra = json::object()) {
    json m{{"run_id", stage + "-" + config_hash.substr(0, 12)},
           {"stage", stage},
           {"status", "complete"},
           {"config_hash", config_hash},
           {"tool_version", FACTLAB_VERSION},
           {"started_at", format_rfc3339(started)},
           {"finished_at", format_rfc3339(now_utc())},
           {"inputs", inputs},
           {"outputs", outputs}};
    m.update(extra);
    write_file_atomic(dir / (stage + "_manifest.json"), m.dump(2) + "\n");
}

void print_json(const json& j) {
    std::cout << j.dump(2) << std::endl;
}

std::map<std::string, Price> load_prices(const fs::path& path) {
    std::map<std::string, Price> prices;
    for (const auto& [name, p] : load_document(path).items())
        prices[name] = Price{p.at("input").get<double>(), p.at("output").get<double>()};
    return prices;
}

std::vector<ChatExchange> load_exchanges(const fs::path& path) {
    std::vector<ChatExchange> out;
    if (!fs::exists(path)) return out;
    for (const auto& j : read_jsonl(path, true))
        if (j.value("event", std::string{}) == "response") out.push_back(exchange_from_json(j));
    return out;
}

std::map<std::string, Article> index_articles(const std::vector<Article>& articles) {
    std::map<std::string, Article> by_id;
    for (const auto& a : articles) by_id[a.id] = a;
    return by_id;
}

std::vector<Article> load_corpus_auto(const std::string& path) {
    auto ext = to_lower(fs::path(path).extension().string());
    auto result = load_articles(path, ext == ".csv" ? CorpusFormat::Csv : CorpusFormat::Jsonl);
    if (!result.skipped.empty())
        std::cerr << "warning: " << result.skipped.size() << " invalid corpus rows skipped in " << path << "\n";
    return result.articles;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"factlab: LLM annotation, human review, and LLM-as-judge pipeline for news factuality labels"};
    app.set_version_flag("--version", FACTLAB_VERSION);
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML/INI file supplying option defaults (flags > env > config)");
    app.allow_config_extras(false);
    std::size_t concurrency = 4;

    // ingest ---------------------------------------------------------------
    auto* ingest = app.add_subcommand("ingest", "Validate a corpus file and write canonical corpus.jsonl");
    std::string ingest_input, ingest_format, ingest_out, ingest_taxonomy, window_start, window_end, ingest_report;
    ingest->add_option("--input", ingest_input, "Corpus file (jsonl or csv)")->required()->check(CLI::ExistingFile);
    ingest->add_option("--format", ingest_format, "jsonl|csv (default: from extension)")
        ->check(CLI::IsMember({"jsonl", "csv"}));
    ingest->add_option("--taxonomy", ingest_taxonomy, "Taxonomy file (json|yaml) for source/topic validation")
        ->envname("FACTLAB_TAXONOMY");
    ingest->add_option("--window-start", window_start, "Collection window start (RFC 3339)");
    ingest->add_option("--window-end", window_end, "Collection window end (RFC 3339)");
    ingest->add_option("--out", ingest_out, "Output corpus.jsonl")->required();
    ingest->add_option("--report", ingest_report, "Ingestion report JSON (default: <out>.report.json)");

    // sample ---------------------------------------------------------------
    auto* sample = app.add_subcommand("sample", "Stratified, seeded sample of a corpus");
    std::string sample_corpus, sample_out, sample_by = "topic", sample_allocation = "proportional";
    std::size_t sample_n = 0;
    std::uint64_t sample_seed = 0;
    sample->add_option("--corpus", sample_corpus, "corpus.jsonl")->required()->check(CLI::ExistingFile);
    sample->add_option("--n", sample_n, "Sample size")->required();
    sample->add_option("--by", sample_by, "topic|source|both")->capture_default_str()->check(CLI::IsMember({"topic", "source", "both"}));
    sample->add_option("--allocation", sample_allocation, "proportional|uniform")->capture_default_str()
        ->check(CLI::IsMember({"proportional", "uniform"}));
    sample->add_option("--seed", sample_seed, "RNG seed")->capture_default_str();
    sample->add_option("--out", sample_out, "Output corpus.jsonl")->required();

    // annotate -------------------------------------------------------------
    auto* annotate = app.add_subcommand("annotate", "Annotate a corpus with a panel of chat-completion endpoints");
    std::string ann_corpus, ann_panel, ann_template = bundled("prompts/factcheck_v1.txt"),
                                        ann_shots_file = bundled("data/shots.jsonl"), ann_out = ".", ann_run_id,
                                        ann_prices;
    std::size_t ann_shots = 0, ann_max_chars = 0;
    bool allow_any_shots = false;
    annotate->add_option("--corpus", ann_corpus, "corpus.jsonl")->required()->check(CLI::ExistingFile);
    annotate->add_option("--panel", ann_panel, "panel.(json|yaml)")->required()->check(CLI::ExistingFile)
        ->envname("FACTLAB_PANEL");
    annotate->add_option("--shots", ann_shots, "Number of demonstrations (0 or 5)")->capture_default_str();
    annotate->add_flag("--allow-any-shots", allow_any_shots, "Accept any demonstration count");
    annotate->add_option("--shots-file", ann_shots_file, "shots.jsonl")->capture_default_str();
    annotate->add_option("--template", ann_template, "Annotation prompt template")->capture_default_str()->envname("FACTLAB_TEMPLATE");
    annotate->add_option("--out-dir", ann_out, "Output directory")->capture_default_str();
    annotate->add_option("--max-chars", ann_max_chars, "Truncate article text to this many bytes (0 = off)")->capture_default_str();
    annotate->add_option("--run-id", ann_run_id, "Run identifier (default: derived from config hash)");
    annotate->add_option("--prices", ann_prices, "Per-endpoint prices {name: {input, output}} per 1M tokens");
    annotate->add_option("--concurrency", concurrency, "Worker pool width")->capture_default_str()
        ->envname("FACTLAB_CONCURRENCY")->check(CLI::PositiveNumber);

    // vote -----------------------------------------------------------------
    auto* vote = app.add_subcommand("vote", "Majority-vote annotations and build the review queue");
    std::string vote_annotations, vote_out = ".", vote_policy = "default";
    vote->add_option("--annotations", vote_annotations, "annotations.jsonl")->required()->check(CLI::ExistingFile);
    vote->add_option("--policy", vote_policy, "default|ties-only|audit-all")->capture_default_str();
    vote->add_option("--out-dir", vote_out, "Output directory")->capture_default_str();

    // serve-review ---------------------------------------------------------
    auto* serve = app.add_subcommand("serve-review", "Run the human review HTTP service");
    std::string srv_annotations, srv_votes, srv_queue, srv_reviewers, srv_tokens, srv_events = "review_events.jsonl",
                                                                                 srv_host = "127.0.0.1", srv_static,
                                                                                 srv_gold, srv_run_id = "run",
                                                                                 srv_manifest;
    bool srv_show_models = false;
    int srv_port = 8080;
    double srv_stale_minutes = 0;
    serve->add_option("--annotations", srv_annotations, "annotations.jsonl")->required()->check(CLI::ExistingFile);
    serve->add_option("--votes", srv_votes, "votes.jsonl")->required()->check(CLI::ExistingFile);
    serve->add_option("--queue", srv_queue, "review_queue.jsonl")->required()->check(CLI::ExistingFile);
    serve->add_option("--reviewers", srv_reviewers, "Reviewer roster (json|yaml)")->required()->check(CLI::ExistingFile);
    serve->add_option("--tokens", srv_tokens, "Token file: 'token reviewer_id' per line")->required()
        ->check(CLI::ExistingFile)->envname("FACTLAB_TOKENS");
    serve->add_option("--events", srv_events, "Append-only review event log")->capture_default_str();
    serve->add_option("--host", srv_host, "Bind address")->capture_default_str();
    serve->add_option("--port", srv_port, "Port (0 picks a free one)")->capture_default_str();
    serve->add_option("--static", srv_static, "Reviewer UI bundle directory")->check(CLI::ExistingDirectory);
    serve->add_option("--gold-out", srv_gold, "Where POST /promote writes gold.csv");
    serve->add_option("--stale-after-minutes", srv_stale_minutes, "Escalate open tasks older than this (0 = off)")->capture_default_str();
    serve->add_option("--run-id", srv_run_id, "Run id served at /runs/{id}/summary")->capture_default_str();
    serve->add_flag("--show-models", srv_show_models, "Show model names in task payloads by default (blind mode off)");
    serve->add_option("--manifest", srv_manifest, "Annotation run manifest to include in the summary");

    // promote --------------------------------------------------------------
    auto* promote = app.add_subcommand("promote", "Replay the review event log and write resolved gold labels");
    std::string promote_events, promote_out = "gold.csv";
    promote->add_option("--events", promote_events, "review_events.jsonl")->required()->check(CLI::ExistingFile);
    promote->add_option("--out", promote_out, "gold.csv")->capture_default_str();

    // judge ----------------------------------------------------------------
    auto* judge = app.add_subcommand("judge", "Evaluate annotations with LLM judges");
    std::string judge_corpus, judge_ann_path, judge_panel, judge_annotator_panel, judge_mode = "binary", judge_gold,
                                                                                     judge_template, judge_out = ".",
                                                                                     judge_prices;
    std::size_t judge_samples = 500;
    std::uint64_t judge_seed = 0;
    bool judge_strict = false;
    judge->add_option("--corpus", judge_corpus, "corpus.jsonl")->required()->check(CLI::ExistingFile);
    judge->add_option("--annotations", judge_ann_path, "annotations.jsonl")->required()->check(CLI::ExistingFile);
    judge->add_option("--judges", judge_panel, "Judge panel (json|yaml)")->required()->check(CLI::ExistingFile);
    judge->add_option("--annotator-panel", judge_annotator_panel, "Annotator panel, for the self-enhancement guard")
        ->check(CLI::ExistingFile);
    judge->add_option("--mode", judge_mode, "binary|comparative")->capture_default_str()->check(CLI::IsMember({"binary", "comparative"}));
    judge->add_option("--gold", judge_gold, "gold.csv (ground-truth AR column)")->check(CLI::ExistingFile);
    judge->add_option("--samples", judge_samples, "Articles to judge (0 = all)")->capture_default_str();
    judge->add_option("--seed", judge_seed, "Sampling seed")->capture_default_str();
    judge->add_option("--template", judge_template, "Judge prompt template (default by mode)");
    judge->add_flag("--strict-family", judge_strict, "Fail when a judge shares a model family with an annotator");
    judge->add_option("--out-dir", judge_out, "Output directory")->capture_default_str();
    judge->add_option("--prices", judge_prices, "Per-endpoint prices {name: {input, output}} per 1M tokens");
    judge->add_option("--concurrency", concurrency, "Worker pool width")->capture_default_str()
        ->envname("FACTLAB_CONCURRENCY")->check(CLI::PositiveNumber);

    // metrics --------------------------------------------------------------
    auto* metrics = app.add_subcommand("metrics", "Reference-based metrics against gold labels");
    std::vector<std::string> metrics_annotations, metrics_manifests;
    std::string metrics_gold, metrics_out = ".", metrics_averaging = "weighted", metrics_failures = "exclude";
    bool metrics_time = false;
    metrics->add_option("--annotations", metrics_annotations, "annotations.jsonl (repeatable)")->required()
        ->check(CLI::ExistingFile);
    metrics->add_option("--gold", metrics_gold, "gold.csv")->required()->check(CLI::ExistingFile);
    metrics->add_option("--manifest", metrics_manifests, "run_manifest.json per annotations file (for --with-time)")
        ->check(CLI::ExistingFile);
    metrics->add_option("--averaging", metrics_averaging, "weighted|macro")->capture_default_str()
        ->check(CLI::IsMember({"weighted", "macro"}));
    metrics->add_option("--failures", metrics_failures, "exclude|wrong")->capture_default_str()->check(CLI::IsMember({"exclude", "wrong"}));
    metrics->add_flag("--with-time", metrics_time, "Add the wall-clock Time column");
    metrics->add_option("--out-dir", metrics_out, "Output directory")->capture_default_str();

    // report ---------------------------------------------------------------
    auto* report = app.add_subcommand("report", "Render metrics and agreement tables from report JSON files");
    std::vector<std::string> report_metrics;
    std::string report_agreement, report_out = ".";
    bool report_time = false;
    report->add_option("--metrics", report_metrics, "metrics_report.json (repeatable)")->check(CLI::ExistingFile);
    report->add_option("--agreement", report_agreement, "agreement_report.json")->check(CLI::ExistingFile);
    report->add_flag("--with-time", report_time, "Add the wall-clock Time column");
    report->add_option("--out-dir", report_out, "Output directory")->capture_default_str();

    // mock-llm -------------------------------------------------------------
    auto* mock = app.add_subcommand("mock-llm", "Serve a deterministic scripted chat-completions endpoint");
    std::string mock_script, mock_host = "127.0.0.1";
    int mock_port = 0;
    mock->add_option("--script", mock_script, "Mock script JSON")->required()->check(CLI::ExistingFile);
    mock->add_option("--host", mock_host, "Bind address")->capture_default_str();
    mock->add_option("--port", mock_port, "Port (0 picks a free one)")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        // --help and --version are successes; every other parse error is usage.
        return code == 0 ? 0 : 2;
    }

    try {
        if (*ingest) {
            CorpusRules rules;
            if (!ingest_taxonomy.empty()) rules.taxonomy = load_taxonomy(ingest_taxonomy);
            auto parse_window = [](const std::string& s) {
                TimePoint tp;
                if (!parse_rfc3339(s, tp)) throw Error("usage", "bad RFC 3339 timestamp: " + s);
                return tp;
            };
            if (!window_start.empty()) rules.window_start = parse_window(window_start);
            if (!window_end.empty()) rules.window_end = parse_window(window_end);
            auto format = ingest_format.empty()
                              ? (to_lower(fs::path(ingest_input).extension().string()) == ".csv" ? CorpusFormat::Csv
                                                                                                  : CorpusFormat::Jsonl)
                              : parse_corpus_format(ingest_format);
            auto result = load_articles(ingest_input, format, rules);
            write_file_atomic(ingest_out, articles_to_jsonl(result.articles));
            json skipped = json::array();
            for (const auto& s : result.skipped) skipped.push_back({{"row", s.row}, {"reason", s.reason}});
            json summary{{"input", ingest_input},
                         {"output", ingest_out},
                         {"loaded", result.articles.size()},
                         {"skipped", result.skipped.size()},
                         {"skipped_rows", skipped}};
            write_file_atomic(ingest_report.empty() ? ingest_out + ".report.json" : ingest_report,
                              summary.dump(2) + "\n");
            print_json(summary);
        } else if (*sample) {
            auto articles = load_corpus_auto(sample_corpus);
            auto picked = stratified_sample(articles, sample_n, parse_stratify_by(sample_by), sample_seed,
                                            parse_allocation(sample_allocation));
            write_file_atomic(sample_out, articles_to_jsonl(picked));
            print_json({{"output", sample_out}, {"sampled", picked.size()}, {"from", articles.size()}});
        } else if (*annotate) {
            if (!allow_any_shots && ann_shots != 0 && ann_shots != 5)
                throw Error("usage", "--shots must be 0 or 5 (use --allow-any-shots to override)");
            auto articles = load_corpus_auto(ann_corpus);
            auto panel = load_panel(ann_panel);
            auto tmpl = load_template(ann_template);
            AnnotateOptions opts;
            if (ann_shots > 0) {
                auto pool = load_shots(ann_shots_file);
                if (pool.size() < ann_shots)
                    throw Error("usage", ann_shots_file + " has only " + std::to_string(pool.size()) + " demonstrations");
                opts.shots.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(ann_shots));
            }
            opts.shot_mode = shot_mode_for_count(ann_shots);
            opts.concurrency = concurrency;
            opts.max_chars = ann_max_chars;
            opts.out_dir = ann_out;
            opts.config_hash = config_hash_of(*annotate, {"out-dir", "concurrency"});
            opts.inputs = {{"corpus", ann_corpus}, {"panel", ann_panel}, {"template", ann_template}};
            if (ann_shots > 0) opts.inputs["shots"] = ann_shots_file;
            opts.run_id = ann_run_id.empty() ? "annotate-" + opts.config_hash.substr(0, 12) : ann_run_id;
            opts.tool_version = FACTLAB_VERSION;
            auto log = std::make_shared<ExchangeLog>(fs::path(ann_out) / "exchanges.jsonl");
            Gateway gateway(log);
            auto run = annotate_corpus(articles, panel, tmpl, opts, gateway);
            if (!ann_prices.empty()) {
                auto ledger = cost_report(load_exchanges(log->path()), load_prices(ann_prices));
                write_file_atomic(fs::path(ann_out) / "cost_report.json", ledger_to_json(ledger).dump(2) + "\n");
            }
            print_json({{"run_id", opts.run_id}, {"status", run.manifest["status"]}, {"counts", run.manifest["counts"]}});
            if (!run.complete) return 1;
        } else if (*vote) {
            auto started = now_utc();
            auto annotations = load_annotations(vote_annotations);
            auto records = build_vote_records(annotations);
            auto queue = select_for_review(records, parse_review_policy(vote_policy));
            write_file_atomic(fs::path(vote_out) / "votes.jsonl", vote_records_to_jsonl(records));
            write_file_atomic(fs::path(vote_out) / "review_queue.jsonl", review_queue_to_jsonl(queue, records));
            std::size_t ties = 0, unanimous = 0;
            for (const auto& r : records) {
                ties += r.tie();
                unanimous += r.unanimous;
            }
            json summary{{"articles", records.size()}, {"ties", ties}, {"unanimous", unanimous}, {"queued", queue.size()}};
            write_stage_manifest(vote_out, "vote", config_hash_of(*vote, {"out-dir"}), started,
                                 {{"annotations", vote_annotations}},
                                 {{"votes", (fs::path(vote_out) / "votes.jsonl").string()},
                                  {"review_queue", (fs::path(vote_out) / "review_queue.jsonl").string()}},
                                 {{"counts", summary}});
            print_json(summary);
        } else if (*serve) {
            auto annotations = load_annotations(srv_annotations);
            auto records = load_vote_records(srv_votes);
            auto queue = load_review_queue(srv_queue);
            auto log = std::make_shared<ReviewEventLog>(srv_events);
            ReviewStore store(load_roster(srv_reviewers), log);
            store.open(queue, annotations, records);
            ReviewServerOptions sopts;
            sopts.run_id = srv_run_id;
            sopts.blind = !srv_show_models;
            if (!srv_manifest.empty()) sopts.run_summary["manifest"] = json::parse(read_file(srv_manifest));
            sopts.run_summary["queued"] = queue.size();
            sopts.run_summary["articles"] = records.size();
            if (!srv_static.empty()) sopts.static_dir = srv_static;
            if (!srv_gold.empty()) sopts.gold_out = srv_gold;
            if (srv_stale_minutes > 0)
                sopts.stale_after = std::chrono::milliseconds(static_cast<std::int64_t>(srv_stale_minutes * 60'000));
            ReviewServer server(store, token_table_authenticator(load_token_file(srv_tokens)), sopts);
            server.run(srv_host, srv_port, [](int port) {
                std::cout << json{{"listening", port}}.dump() << std::endl;
            });
        } else if (*promote) {
            auto replayed = replay_event_log(promote_events);
            std::vector<ReviewTask> resolved;
            for (const auto& [_, t] : replayed.tasks)
                if (t.state == TaskState::Resolved) resolved.push_back(t);
            auto gold = promote_resolutions(resolved);
            write_file_atomic(promote_out, gold_to_csv(gold));
            print_json({{"output", promote_out}, {"gold", gold.size()}, {"tasks", replayed.tasks.size()}});
        } else if (*judge) {
            auto started = now_utc();
            auto articles = load_corpus_auto(judge_corpus);
            auto annotations = load_annotations(judge_ann_path);
            auto judges = load_panel(judge_panel);
            JudgeOptions opts;
            opts.mode = parse_judge_mode(judge_mode);
            opts.samples = judge_samples;
            opts.seed = judge_seed;
            opts.concurrency = concurrency;
            opts.out_dir = judge_out;
            opts.strict_family_guard = judge_strict;
            if (!judge_annotator_panel.empty()) opts.annotator_panel = load_panel(judge_annotator_panel);
            std::vector<std::string> warnings;
            opts.warnings = &warnings;
            auto tmpl = load_template(judge_template.empty()
                                          ? bundled(opts.mode == JudgeMode::BinaryAgreement
                                                        ? "prompts/judge/binary_v1.txt"
                                                        : "prompts/judge/comparative_v1.txt")
                                          : judge_template);
            std::optional<GoldSet> gold;
            if (!judge_gold.empty()) gold = load_gold_labels(judge_gold);
            auto log = std::make_shared<ExchangeLog>(fs::path(judge_out) / "judge_exchanges.jsonl");
            Gateway gateway(log);
            auto verdicts =
                factlab::judge_annotations(articles, annotations, judges, tmpl, gold ? &*gold : nullptr, opts, gateway);
            for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
            std::vector<std::string> order;
            for (const auto& a : annotations)
                if (std::find(order.begin(), order.end(), a.endpoint_name) == order.end())
                    order.push_back(a.endpoint_name);
            auto agreement = build_agreement_report(verdicts, annotations, gold ? &*gold : nullptr, order);
            auto written = render_tables({}, &agreement, judge_out);
            if (!judge_prices.empty()) {
                auto ledger = cost_report(load_exchanges(log->path()), load_prices(judge_prices));
                write_file_atomic(fs::path(judge_out) / "judge_cost_report.json", ledger_to_json(ledger).dump(2) + "\n");
            }
            std::size_t failures = 0;
            for (const auto& v : verdicts) failures += v.parse_failure();
            json judge_inputs{{"corpus", judge_corpus}, {"annotations", judge_ann_path}, {"judges", judge_panel}};
            if (gold) judge_inputs["gold"] = judge_gold;
            json judge_outputs{{"verdicts", (fs::path(judge_out) / "verdicts.jsonl").string()},
                               {"exchanges", log->path().string()}};
            for (const auto& f : written.files) judge_outputs["tables"].push_back(f.string());
            write_stage_manifest(judge_out, "judge", config_hash_of(*judge, {"out-dir", "concurrency"}), started,
                                 judge_inputs, judge_outputs,
                                 {{"counts", {{"verdicts", verdicts.size()}, {"parse_failures", failures}}}});
            print_json({{"verdicts", verdicts.size()},
                        {"parse_failures", failures},
                        {"sample_count", agreement.sample_count},
                        {"warnings", warnings}});
        } else if (*metrics) {
            auto started = now_utc();
            auto gold = load_gold_labels(metrics_gold);
            if (!metrics_manifests.empty() && metrics_manifests.size() != metrics_annotations.size())
                throw Error("usage", "give one --manifest per --annotations file");
            std::vector<MetricsRow> rows;
            for (std::size_t i = 0; i < metrics_annotations.size(); ++i) {
                json manifest = nullptr;
                if (!metrics_manifests.empty()) manifest = json::parse(read_file(metrics_manifests[i]));
                auto part = evaluate_annotations(load_annotations(metrics_annotations[i]), gold,
                                                 parse_averaging(metrics_averaging),
                                                 parse_failure_policy(metrics_failures), manifest);
                rows.insert(rows.end(), part.begin(), part.end());
            }
            TableOptions topts;
            topts.include_time = metrics_time;
            auto written = render_tables(rows, nullptr, metrics_out, topts);
            json files = json::array();
            for (const auto& f : written.files) files.push_back(f.string());
            write_stage_manifest(metrics_out, "metrics", config_hash_of(*metrics, {"out-dir"}), started,
                                 {{"annotations", metrics_annotations}, {"gold", metrics_gold}, {"manifests", metrics_manifests}},
                                 {{"tables", files}});
            print_json({{"rows", rows.size()}, {"files", files}});
        } else if (*report) {
            if (report_metrics.empty() && report_agreement.empty())
                throw Error("usage", "report needs --metrics and/or --agreement");
            std::vector<MetricsRow> rows;
            for (const auto& m : report_metrics) {
                auto part = metrics_rows_from_json(json::parse(read_file(m)));
                rows.insert(rows.end(), part.begin(), part.end());
            }
            std::optional<AgreementReport> agreement;
            if (!report_agreement.empty()) agreement = agreement_report_from_json(json::parse(read_file(report_agreement)));
            TableOptions topts;
            topts.include_time = report_time;
            auto written = render_tables(rows, agreement ? &*agreement : nullptr, report_out, topts);
            json files = json::array();
            for (const auto& f : written.files) files.push_back(f.string());
            print_json({{"files", files}});
        } else if (*mock) {
            MockLlmServer server(mock_script_from_json(load_document(mock_script)));
            int port = server.start(mock_host, mock_port);
            std::cout << json{{"listening", port}}.dump() << std::endl;
            sigset_t set;
            sigemptyset(&set);
            sigaddset(&set, SIGINT);
            sigaddset(&set, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &set, nullptr);
            int sig = 0;
            sigwait(&set, &sig);
            server.stop();
        }
    } catch (const Error& e) {
        std::cerr << json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << std::endl;
        return e.kind() == "usage" ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << std::endl;
        return 1;
    }
    return 0;
}
