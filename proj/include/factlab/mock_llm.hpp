#pragma once

#include <chrono>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include "factlab/gateway.hpp"

namespace factlab {

/// Scripted reply: either text, an HTTP error status, or a malformed body.
struct MockReply {
    std::optional<std::string> text;
    int status = 200;
    bool malformed = false;
};

inline MockReply mock_reply_from_json(const json& j) {
    MockReply r;
    if (j.is_string()) {
        r.text = j.get<std::string>();
        return r;
    }
    if (!j.is_object()) throw Error("config", "mock reply must be a string or an object");
    if (j.contains("text")) r.text = j["text"].get<std::string>();
    r.status = j.value("status", 200);
    r.malformed = j.value("malformed", false);
    return r;
}

struct MockModelScript {
    std::optional<MockReply> fallback;
    std::optional<std::regex> key_pattern;
    std::map<std::string, MockReply> by_key;
    std::vector<std::pair<std::string, MockReply>> rules;  // substring → reply, first match wins
    int fail_first = 0;
    int fail_status = 429;
    std::optional<double> retry_after;  // seconds, sent with scripted failures
    std::chrono::milliseconds delay{0};
};

/// Deterministic script for the mock chat-completions server, keyed by the
/// `model` field of the request.
///
/// ```json
/// {"models": {"m1": {"key_pattern": "\\[ref:([^\\]]+)\\]",
///                    "responses": {"a1": "Classification: Factually Correct\nExplanation: ..."},
///                    "rules": [{"contains": "...", "response": "..."}],
///                    "default": "...", "fail_first": 2, "fail_status": 429,
///                    "retry_after": 0.2, "delay_ms": 0}},
///  "default": "..."}
/// ```
/// The key pattern is matched against the last message; its first capture
/// group selects from `responses`.
struct MockScript {
    std::map<std::string, MockModelScript> models;
    std::optional<MockReply> fallback;
};

inline MockScript mock_script_from_json(const json& doc) {
    MockScript script;
    if (doc.contains("default")) script.fallback = mock_reply_from_json(doc["default"]);
    if (doc.contains("models")) {
        for (const auto& [model, spec] : doc["models"].items()) {
            MockModelScript m;
            if (spec.contains("default")) m.fallback = mock_reply_from_json(spec["default"]);
            if (spec.contains("key_pattern")) m.key_pattern.emplace(spec["key_pattern"].get<std::string>());
            if (spec.contains("responses"))
                for (const auto& [key, reply] : spec["responses"].items()) m.by_key[key] = mock_reply_from_json(reply);
            if (spec.contains("rules"))
                for (const auto& rule : spec["rules"])
                    m.rules.emplace_back(rule.at("contains").get<std::string>(), mock_reply_from_json(rule.at("response")));
            m.fail_first = spec.value("fail_first", 0);
            m.fail_status = spec.value("fail_status", 429);
            if (spec.contains("retry_after")) m.retry_after = spec["retry_after"].get<double>();
            m.delay = std::chrono::milliseconds(spec.value("delay_ms", 0));
            script.models[model] = std::move(m);
        }
    }
    return script;
}

struct MockRequestRecord {
    std::chrono::steady_clock::time_point received;
    std::string model;
    std::string key;
    int status = 200;
};

/// In-process scripted chat-completions server (`POST /v1/chat/completions`).
class MockLlmServer {
public:
    explicit MockLlmServer(MockScript script) : script_(std::move(script)) {
        server_.Post("/v1/chat/completions",
                     [this](const httplib::Request& req, httplib::Response& res) { handle(req, res); });
        server_.Post("/chat/completions",
                     [this](const httplib::Request& req, httplib::Response& res) { handle(req, res); });
        server_.Get("/__requests", [this](const httplib::Request&, httplib::Response& res) {
            std::lock_guard lock(mu_);
            json arr = json::array();
            for (const auto& r : log_)
                arr.push_back({{"model", r.model},
                               {"key", r.key},
                               {"status", r.status},
                               {"t_us", std::chrono::duration_cast<std::chrono::microseconds>(
                                            r.received.time_since_epoch())
                                            .count()}});
            res.set_content(arr.dump(), "application/json");
        });
    }

    ~MockLlmServer() { stop(); }
    MockLlmServer(const MockLlmServer&) = delete;
    MockLlmServer& operator=(const MockLlmServer&) = delete;

    /// Binds (port 0 picks a free port) and serves on a background thread.
    int start(const std::string& host = "127.0.0.1", int port = 0) {
        port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw Error("io", "mock-llm cannot bind " + host + ":" + std::to_string(port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    /// Serves on the calling thread until stop().
    void run(const std::string& host, int port) {
        port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw Error("io", "mock-llm cannot bind " + host + ":" + std::to_string(port));
        server_.listen_after_bind();
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }
    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

    std::vector<MockRequestRecord> requests() const {
        std::lock_guard lock(mu_);
        return log_;
    }

private:
    void handle(const httplib::Request& req, httplib::Response& res) {
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception&) {
            res.status = 400;
            res.set_content(R"({"error":"body is not JSON"})", "application/json");
            return;
        }
        auto model = body.value("model", std::string{});
        std::string prompt;
        if (body.contains("messages") && body["messages"].is_array() && !body["messages"].empty())
            prompt = body["messages"].back().value("content", std::string{});

        MockRequestRecord rec{std::chrono::steady_clock::now(), model, {}, 200};
        std::optional<MockReply> reply;
        std::chrono::milliseconds delay{0};
        std::optional<double> retry_after;
        std::size_t serial = 0;
        {
            std::lock_guard lock(mu_);
            auto it = script_.models.find(model);
            if (it != script_.models.end()) {
                auto& m = it->second;
                delay = m.delay;
                retry_after = m.retry_after;
                auto seen = served_[model]++;
                if (seen < m.fail_first) {
                    reply = MockReply{std::nullopt, m.fail_status, false};
                } else {
                    reply = select(m, prompt, rec.key);
                }
            }
            if (!reply) reply = script_.fallback;
            rec.status = reply ? reply->status : 400;
            log_.push_back(rec);
            serial = log_.size();
        }
        if (delay.count() > 0) std::this_thread::sleep_for(delay);

        if (!reply) {
            res.status = 400;
            res.set_content(json{{"error", "no scripted response for model " + model}}.dump(), "application/json");
            return;
        }
        res.status = reply->status;
        if (reply->status < 200 || reply->status >= 300) {
            if (retry_after) res.set_header("Retry-After", std::to_string(*retry_after));
            res.set_content(json{{"error", "scripted failure"}}.dump(), "application/json");
            return;
        }
        if (reply->malformed) {
            res.set_content(R"({"unexpected": true})", "application/json");
            return;
        }
        auto text = reply->text.value_or("");
        json out{{"id", "mock-" + std::to_string(serial)},
                 {"object", "chat.completion"},
                 {"model", model},
                 {"choices", json::array({{{"index", 0},
                                           {"message", {{"role", "assistant"}, {"content", text}}},
                                           {"finish_reason", "stop"}}})},
                 {"usage",
                  {{"prompt_tokens", approx_token_count(prompt)},
                   {"completion_tokens", approx_token_count(text)},
                   {"total_tokens", approx_token_count(prompt) + approx_token_count(text)}}}};
        res.set_content(out.dump(), "application/json");
    }

    static std::optional<MockReply> select(const MockModelScript& m, const std::string& prompt, std::string& key) {
        if (m.key_pattern) {
            std::smatch match;
            if (std::regex_search(prompt, match, *m.key_pattern) && match.size() > 1) {
                key = match[1].str();
                if (auto it = m.by_key.find(key); it != m.by_key.end()) return it->second;
            }
        }
        for (const auto& [needle, reply] : m.rules)
            if (prompt.find(needle) != std::string::npos) return reply;
        return m.fallback;
    }

    MockScript script_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
    mutable std::mutex mu_;
    std::map<std::string, int> served_;
    std::vector<MockRequestRecord> log_;
};

}  // namespace factlab
