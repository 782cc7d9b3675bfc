#include <gtest/gtest.h>

#include <random>
#include <regex>

#include "oracles.hpp"
#include "support.hpp"

using namespace factlab;
using namespace oracles;
using testsupport::article;
using testsupport::TempDir;

TEST(Template, FrontMatterAndDigest) {
    auto t = parse_template("name: demo\nversion: 3\n---\nBody {article}\nClassification:\nExplanation:\n\n");
    EXPECT_EQ(t.name, "demo");
    EXPECT_EQ(t.version, "3");
    EXPECT_EQ(t.id(), "demo@3");
    EXPECT_EQ(t.body, "Body {article}\nClassification:\nExplanation:");
    EXPECT_EQ(t.digest(), sha256_hex(t.body));
    auto bare = parse_template("Just {article}", "file");
    EXPECT_EQ(bare.name, "file");
    EXPECT_EQ(bare.body, "Just {article}");
}

TEST(Template, PlaceholdersAreSubstitutedOnce) {
    EXPECT_EQ(render_placeholders("a {x} b {y} {z}", {{"x", "{y}"}, {"y", "2"}}), "a {y} b 2 {z}");
}

TEST(Template, ContractViolations) {
    Article a = article("a1");
    EXPECT_THROW(build_prompt(parse_template("no placeholder\nClassification:\nExplanation:"), a, {}), Error);
    EXPECT_THROW(build_prompt(parse_template("{article} {article}\nClassification:\nExplanation:"), a, {}), Error);
    EXPECT_THROW(build_prompt(parse_template("{article} without markers"), a, {}), Error);
}

TEST(Prompt, ZeroShotCarriesFullInstructionText) {
    auto msgs = build_prompt(testsupport::annotation_template(), article("a1", "X"), {});
    ASSERT_EQ(msgs.size(), 1u);
    EXPECT_EQ(msgs[0].role, "user");
    const auto& c = msgs[0].content;
    EXPECT_EQ(c.rfind("You are a helpful news fact-checking bot trained to assess the accuracy of information.", 0), 0u);
    for (const char* fragment :
         {"Misinformation: Incorrect or misleading information shared without intent to harm.",
          "Disinformation: Information that is knowingly false, often prejudiced, and disseminated with the intent to "
          "mislead.",
          "Classification: [Factually Correct/Factually Incorrect]",
          "Explanation: Provide a concise, evidence-based explanation for your classification.",
          "Ensure to remain objective, basing your assessment strictly on facts and evidence rather than opinions or "
          "biases."})
        EXPECT_NE(c.find(fragment), std::string::npos) << fragment;
    EXPECT_TRUE(c.ends_with("Article to analyze: X"));
    EXPECT_EQ(count_occurrences(c, "Classification:"), 1u);
}

TEST(Prompt, FiveShotPlacesDemonstrationsBeforeTarget) {
    auto shots = testsupport::bundled_shots();
    ASSERT_EQ(shots.size(), 5u);
    int correct = 0;
    for (const auto& s : shots) correct += s.label == Label::FactuallyCorrect;
    EXPECT_TRUE(correct == 2 || correct == 3);

    auto c = build_prompt(testsupport::annotation_template(), article("a1", "TARGET BODY"), shots)[0].content;
    auto target = c.find("Article to analyze: TARGET BODY");
    ASSERT_NE(target, std::string::npos);
    // One instruction line plus five demonstrations, all before the target.
    EXPECT_EQ(count_occurrences(c, "Classification:"), 6u);
    EXPECT_EQ(count_occurrences(c.substr(target), "Classification:"), 0u);
    EXPECT_LT(c.find("Ensure to remain objective"), c.find("Example 1:"));
    for (const auto& s : shots) {
        auto at = c.find(render_annotation(s.label, s.explanation));
        ASSERT_NE(at, std::string::npos);
        EXPECT_LT(at, target);
        EXPECT_NE(c.find(s.article_text), std::string::npos);
    }
}

TEST(Prompt, WrongShotCountsRejected) {
    auto shots = testsupport::bundled_shots();
    auto tmpl = testsupport::annotation_template();
    for (std::size_t n : {1, 2, 3, 4}) {
        std::vector<FewShotExample> some(shots.begin(), shots.begin() + static_cast<long>(n));
        EXPECT_THROW(build_prompt(tmpl, article("a"), some), Error) << n;
        EXPECT_NO_THROW(build_prompt(tmpl, article("a"), some, 0, nullptr, true));
    }
    auto six = shots;
    six.push_back(shots[0]);
    EXPECT_THROW(build_prompt(tmpl, article("a"), six), Error);
}

TEST(Prompt, TruncationRespectsUtf8) {
    bool cut = false;
    EXPECT_EQ(truncate_utf8("héllo", 2, cut), "h");
    EXPECT_TRUE(cut);
    EXPECT_EQ(truncate_utf8("héllo", 3, cut), "hé");
    EXPECT_EQ(truncate_utf8("abc", 0, cut), "abc");
    EXPECT_FALSE(cut);
    bool flagged = false;
    auto c = build_prompt(testsupport::annotation_template(), article("a", std::string(100, 'z')), {}, 10, &flagged)[0].content;
    EXPECT_TRUE(flagged);
    EXPECT_TRUE(c.ends_with("Article to analyze: " + std::string(10, 'z')));
}

TEST(Shots, EmptyExplanationRejected) {
    TempDir dir;
    auto p = dir.write("s.jsonl", R"({"article_text":"t","label":"Factually Correct","explanation":"  "})" "\n");
    EXPECT_THROW(load_shots(p), Error);
}

// ---------------------------------------------------------------------------
// Parsing

TEST(Parse, DocumentedExamples) {
    auto a = parse_annotation("Classification: Factually Correct\nExplanation: cites official results.");
    EXPECT_EQ(a.label, Label::FactuallyCorrect);
    EXPECT_EQ(a.explanation, "cites official results.");

    auto b = parse_annotation("**Classification:** [Factually Incorrect]\n**Explanation:** misquotes the bill.");
    EXPECT_EQ(b.label, Label::FactuallyIncorrect);
    EXPECT_EQ(b.explanation, "misquotes the bill.");

    auto c = parse_annotation("I cannot determine this.");
    EXPECT_FALSE(c.label);
    EXPECT_EQ(c.explanation, "");
}

TEST(Parse, EdgeCases) {
    EXPECT_FALSE(parse_annotation("Classification: Factually Correct/Factually Incorrect").label);
    EXPECT_EQ(parse_annotation("classification:\n\n  factually incorrect\nExplanation: x").label, Label::FactuallyIncorrect);
    EXPECT_EQ(parse_annotation("Explanation: first.\nClassification: Factually Correct").explanation, "first.");
    EXPECT_EQ(parse_annotation("Explanation: first.\nClassification: Factually Correct").label, Label::FactuallyCorrect);
    EXPECT_EQ(parse_annotation("  ## CLASSIFICATION :  __Factually   Correct__").label, Label::FactuallyCorrect);
    EXPECT_EQ(parse_annotation("Classification: unclear\nClassification: Factually Incorrect").label,
              Label::FactuallyIncorrect);
    // A bare label without the marker is not a classification.
    EXPECT_FALSE(parse_annotation("Factually Correct").label);
    EXPECT_EQ(parse_annotation("Classification: Factually Correct\r\nExplanation: multi\r\nline").explanation,
              "multi\nline");
}


TEST(Parse, MatchesRegexOracleOnMutatedResponses) {
    std::mt19937 rng(2024);
    for (int i = 0; i < 200; ++i) {
        auto raw = mutate_well_formed(rng);
        auto got = parse_annotation(raw);
        auto want = reference_parse(raw);
        EXPECT_EQ(got.label, want.label) << raw;
        EXPECT_EQ(got.explanation, want.explanation) << raw;
    }
}

TEST(Parse, MatchesRegexOracleOnAsciiGarbage) {
    std::mt19937 rng(99);
    for (int i = 0; i < 2000; ++i) {
        auto raw = random_garbage(rng);
        // The regex engine's \s and case folding are locale-bound; keep to ASCII.
        std::erase_if(raw, [](char c) { return static_cast<unsigned char>(c) >= 0x80 || c == '\0' || c == '\v' || c == '\f'; });
        auto got = parse_annotation(raw);
        auto want = reference_parse(raw);
        EXPECT_EQ(got.label, want.label) << raw;
        EXPECT_EQ(got.explanation, want.explanation) << raw;
    }
}

TEST(Parse, RoundTripsCanonicalRendering) {
    std::mt19937 rng(5);
    static const std::string alphabet = "abcdefghij KLMNOP.,;:!?'\"()-0123456789\n";
    for (int i = 0; i < 2000; ++i) {
        Label label = rng() % 2 ? Label::FactuallyCorrect : Label::FactuallyIncorrect;
        std::string e;
        auto len = 1 + rng() % 120;
        for (std::size_t k = 0; k < len; ++k) e.push_back(alphabet[rng() % alphabet.size()]);
        e = std::string(trim(e));
        if (e.empty()) e = "x";
        auto p = parse_annotation(render_annotation(label, e));
        EXPECT_EQ(p.label, label);
        EXPECT_EQ(p.explanation, e);
    }
}

// ---------------------------------------------------------------------------
// Records

TEST(AnnotationRecord, JsonRoundTripAndInvariant) {
    auto a = annotation_from_response("a1", "m1", ShotMode::FiveShot, "Classification: Factually Incorrect\nExplanation: e");
    a.exchange_ref = exchange_ref_for("a1", "m1", ShotMode::FiveShot);
    EXPECT_EQ(a.outcome, Outcome::Labeled);
    EXPECT_EQ(annotation_from_json(annotation_to_json(a)), a);
    auto f = annotation_from_response("a1", "m1", ShotMode::ZeroShot, "no idea");
    EXPECT_EQ(f.outcome, Outcome::ParseFailure);
    EXPECT_EQ(f.raw_response, "no idea");
    EXPECT_EQ(annotation_from_json(annotation_to_json(f)), f);
    auto bad = annotation_to_json(f);
    bad["label"] = "Factually Correct";
    EXPECT_THROW(annotation_from_json(bad), Error);
}

// ---------------------------------------------------------------------------
// Corpus runs against the mock

namespace {

struct MockPanel {
    MockLlmServer mock;
    Panel panel;

    explicit MockPanel(const json& script, std::vector<std::string> names) : mock(mock_script_from_json(script)) {
        mock.start();
        for (const auto& n : names) panel.push_back(testsupport::endpoint(n, mock.base_url()));
    }
};

std::vector<Article> two_articles() { return {article("a1", "first body"), article("a2", "second body")}; }

}  // namespace

TEST(AnnotateCorpus, CardinalityAndUniformLabels) {
    MockPanel mp({{"default", "Classification: Factually Correct\nExplanation: fine."}}, {"m1", "m2", "m3"});
    TempDir dir;
    AnnotateOptions opts;
    opts.out_dir = dir.path();
    opts.run_id = "t";
    Gateway gw(std::make_shared<ExchangeLog>(dir / "exchanges.jsonl"));
    auto run = annotate_corpus(two_articles(), mp.panel, testsupport::annotation_template(), opts, gw);
    ASSERT_TRUE(run.complete);
    ASSERT_EQ(run.annotations.size(), 6u);
    for (const auto& a : run.annotations) EXPECT_EQ(a.label, Label::FactuallyCorrect);
    EXPECT_EQ(run.annotations[0].article_id, "a1");
    EXPECT_EQ(run.annotations[1].endpoint_name, "m2");
    EXPECT_EQ(load_annotations(dir / "annotations.jsonl"), run.annotations);

    auto manifest = json::parse(read_file(dir / "run_manifest.json"));
    EXPECT_EQ(manifest["status"], "complete");
    EXPECT_EQ(manifest["shot_mode"], "zero_shot");
    EXPECT_EQ(manifest["template"]["name"], "factcheck");
    EXPECT_EQ(manifest["template"]["version"], "1");
    EXPECT_EQ(manifest["panel_hash"], panel_hash(mp.panel));
    EXPECT_EQ(manifest["counts"]["annotations"], 6);
    EXPECT_EQ(manifest["counts"]["parse_failures"], 0);
    EXPECT_TRUE(manifest.contains("started_at"));
    EXPECT_TRUE(manifest.contains("finished_at"));
    EXPECT_TRUE(manifest.contains("wall_clock_ms"));
}

TEST(AnnotateCorpus, FailuresBecomeRecords) {
    MockPanel mp({{"models",
                   {{"ok", {{"default", "Classification: Factually Incorrect\nExplanation: no."}}},
                    {"vague", {{"default", "Hard to say."}}},
                    {"down", {{"default", "x"}, {"fail_first", 1000}, {"fail_status", 500}}}}}},
                 {"ok", "vague", "down"});
    mp.panel[2].max_retries = 1;
    TempDir dir;
    AnnotateOptions opts;
    opts.out_dir = dir.path();
    Gateway gw;
    auto run = annotate_corpus(two_articles(), mp.panel, testsupport::annotation_template(), opts, gw);
    ASSERT_EQ(run.annotations.size(), 6u);
    EXPECT_EQ(run.annotations[0].outcome, Outcome::Labeled);
    EXPECT_EQ(run.annotations[1].outcome, Outcome::ParseFailure);
    EXPECT_EQ(run.annotations[1].raw_response, "Hard to say.");
    EXPECT_EQ(run.annotations[2].outcome, Outcome::TransportFailure);
    EXPECT_NE(run.annotations[2].error.find("transport"), std::string::npos);
    EXPECT_EQ(run.manifest["counts"]["parse_failures"], 2);
    EXPECT_EQ(run.manifest["counts"]["transport_failures"], 2);
}

TEST(AnnotateCorpus, RerunIsBitwiseIdempotent) {
    json script{{"models",
                 {{"m1", {{"key_pattern", "analyze: (\\w+) body"},
                          {"responses", {{"first", "Classification: Factually Correct\nExplanation: one"}}},
                          {"default", "Classification: Factually Incorrect\nExplanation: two"}}}}}};
    MockPanel mp(script, {"m1"});
    TempDir a, b;
    AnnotateOptions opts;
    opts.shots = testsupport::bundled_shots();
    opts.shot_mode = ShotMode::FiveShot;
    Gateway gw;
    opts.out_dir = a.path();
    annotate_corpus(two_articles(), mp.panel, testsupport::annotation_template(), opts, gw);
    opts.out_dir = b.path();
    annotate_corpus(two_articles(), mp.panel, testsupport::annotation_template(), opts, gw);
    auto first = read_file(a / "annotations.jsonl");
    EXPECT_EQ(first, read_file(b / "annotations.jsonl"));
    // Resuming a complete run issues no requests and changes nothing.
    auto before = mp.mock.requests().size();
    opts.out_dir = a.path();
    auto again = annotate_corpus(two_articles(), mp.panel, testsupport::annotation_template(), opts, gw);
    EXPECT_EQ(mp.mock.requests().size(), before);
    EXPECT_EQ(again.manifest["counts"]["resumed"], 2);
    EXPECT_EQ(read_file(a / "annotations.jsonl"), first);
    auto labels = load_annotations(a / "annotations.jsonl");
    EXPECT_EQ(labels[0].label, Label::FactuallyCorrect);
    EXPECT_EQ(labels[1].label, Label::FactuallyIncorrect);
}

TEST(AnnotateCorpus, InterruptThenResumeMatchesCleanRun) {
    json script{{"default", "Classification: Factually Correct\nExplanation: ok"}};
    MockPanel mp(script, {"m1", "m2"});
    std::vector<Article> corpus;
    for (int i = 0; i < 20; ++i) corpus.push_back(article("a" + std::to_string(i)));
    auto tmpl = testsupport::annotation_template();
    Gateway gw;

    TempDir clean, resumed;
    AnnotateOptions opts;
    opts.concurrency = 3;
    opts.out_dir = clean.path();
    annotate_corpus(corpus, mp.panel, tmpl, opts, gw);

    std::atomic<int> polls{0};
    opts.out_dir = resumed.path();
    opts.interrupt = [&] { return ++polls > 13; };
    auto partial = annotate_corpus(corpus, mp.panel, tmpl, opts, gw);
    EXPECT_FALSE(partial.complete);
    EXPECT_EQ(partial.manifest["status"], "interrupted");
    // Simulate a torn trailing write from a killed process.
    {
        std::ofstream out(resumed / "annotations.jsonl", std::ios::app);
        out << "{\"article_id\": \"a19\", \"endpo";
    }
    opts.interrupt = nullptr;
    auto finished = annotate_corpus(corpus, mp.panel, tmpl, opts, gw);
    EXPECT_TRUE(finished.complete);
    EXPECT_EQ(read_file(resumed / "annotations.jsonl"), read_file(clean / "annotations.jsonl"));
}

TEST(AnnotateCorpus, RefusesToMixShotModes) {
    MockPanel mp({{"default", "Classification: Factually Correct\nExplanation: ok"}}, {"m1"});
    TempDir dir;
    AnnotateOptions opts;
    opts.out_dir = dir.path();
    Gateway gw;
    annotate_corpus(two_articles(), mp.panel, testsupport::annotation_template(), opts, gw);
    opts.shots = testsupport::bundled_shots();
    opts.shot_mode = ShotMode::FiveShot;
    EXPECT_THROW(annotate_corpus(two_articles(), mp.panel, testsupport::annotation_template(), opts, gw), Error);
    opts.shot_mode = ShotMode::ZeroShot;
    EXPECT_THROW(annotate_corpus(two_articles(), mp.panel, testsupport::annotation_template(), opts, gw), Error);
    EXPECT_THROW(annotate_corpus(two_articles(), {}, testsupport::annotation_template(), opts, gw), Error);
}
