#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "factlab/factlab.hpp"

namespace testsupport {

namespace fs = std::filesystem;

// Scratch directory removed on scope exit.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("factlab-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

    fs::path write(const std::string& name, const std::string& content) const {
        auto p = path_ / name;
        factlab::write_file_atomic(p, content);
        return p;
    }

private:
    fs::path path_;
};

inline factlab::Article article(const std::string& id, const std::string& text = "Some article text.",
                                const std::string& topic = "Economy", const std::string& source = "Wire") {
    factlab::Article a;
    a.id = id;
    a.url = "https://example.test/" + id;
    a.source = source;
    a.topic = topic;
    factlab::parse_rfc3339("2024-07-01T12:00:00Z", a.published_at);
    a.title = "Title " + id;
    a.text = text;
    return a;
}

inline factlab::Annotation labeled(const std::string& article_id, const std::string& endpoint, factlab::Label l,
                                   const std::string& explanation = "because") {
    factlab::Annotation a;
    a.article_id = article_id;
    a.endpoint_name = endpoint;
    a.outcome = factlab::Outcome::Labeled;
    a.label = l;
    a.explanation = explanation;
    a.raw_response = factlab::render_annotation(l, explanation);
    a.exchange_ref = factlab::exchange_ref_for(article_id, endpoint, a.shot_mode);
    return a;
}

inline factlab::Annotation failed(const std::string& article_id, const std::string& endpoint,
                                  factlab::Outcome outcome = factlab::Outcome::ParseFailure) {
    factlab::Annotation a;
    a.article_id = article_id;
    a.endpoint_name = endpoint;
    a.outcome = outcome;
    a.raw_response = "I cannot determine this.";
    return a;
}

inline factlab::EndpointConfig endpoint(const std::string& name, const std::string& base_url,
                                        const std::string& model = "") {
    factlab::EndpointConfig e;
    e.name = name;
    e.base_url = base_url;
    e.model_id = model.empty() ? name : model;
    e.requests_per_minute = 60'000;
    e.burst = 1000;
    e.retry_backoff = std::chrono::milliseconds(5);
    e.timeout = std::chrono::milliseconds(5'000);
    return e;
}

inline factlab::PromptTemplate annotation_template() {
    return factlab::load_template(fs::path(FACTLAB_SOURCE_DIR) / "prompts" / "factcheck_v1.txt");
}

inline std::vector<factlab::FewShotExample> bundled_shots() {
    return factlab::load_shots(fs::path(FACTLAB_SOURCE_DIR) / "data" / "shots.jsonl");
}

}  // namespace testsupport
