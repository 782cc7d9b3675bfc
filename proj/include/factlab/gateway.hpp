#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include "factlab/util.hpp"

namespace factlab {

struct ChatMessage {
    std::string role;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

using Messages = std::vector<ChatMessage>;

inline json messages_to_json(const Messages& messages) {
    json arr = json::array();
    for (const auto& m : messages) arr.push_back({{"role", m.role}, {"content", m.content}});
    return arr;
}

inline Messages messages_from_json(const json& arr) {
    Messages out;
    for (const auto& m : arr) out.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
    return out;
}

struct EndpointConfig {
    std::string name;
    std::string base_url;
    std::string model_id;
    std::optional<std::string> api_key_env;
    double temperature = 0.0;
    int max_output_tokens = 512;
    int requests_per_minute = 60;
    int burst = 1;
    int max_retries = 3;
    std::chrono::milliseconds timeout{60'000};
    std::chrono::milliseconds retry_backoff{500};
    // Model family, used by the judge's self-enhancement guard.
    std::string family;
};

inline json endpoint_to_json(const EndpointConfig& e) {
    json j{{"name", e.name},
           {"base_url", e.base_url},
           {"model_id", e.model_id},
           {"temperature", e.temperature},
           {"max_output_tokens", e.max_output_tokens},
           {"requests_per_minute", e.requests_per_minute},
           {"burst", e.burst},
           {"max_retries", e.max_retries},
           {"timeout_ms", e.timeout.count()},
           {"retry_backoff_ms", e.retry_backoff.count()},
           {"family", e.family}};
    j["api_key_env"] = e.api_key_env ? json(*e.api_key_env) : json(nullptr);
    return j;
}

inline void validate_endpoint(const EndpointConfig& e) {
    auto fail = [&](const std::string& what) { throw Error("config", "endpoint '" + e.name + "': " + what); };
    if (e.name.empty()) throw Error("config", "endpoint name is empty");
    if (e.base_url.empty()) fail("base_url is empty");
    if (e.model_id.empty()) fail("model_id is empty");
    if (!(e.temperature >= 0.0 && e.temperature <= 2.0)) fail("temperature must be within [0, 2]");
    if (e.max_output_tokens <= 0) fail("max_output_tokens must be positive");
    if (e.requests_per_minute <= 0) fail("requests_per_minute must be positive");
    if (e.burst <= 0) fail("burst must be positive");
    if (e.max_retries < 0) fail("max_retries must be non-negative");
    if (e.timeout.count() <= 0) fail("timeout must be positive");
}

inline EndpointConfig endpoint_from_json(const json& j) {
    EndpointConfig e;
    try {
        e.name = j.at("name").get<std::string>();
        e.base_url = j.at("base_url").get<std::string>();
        e.model_id = j.value("model_id", e.name);
        if (j.contains("api_key_env") && !j["api_key_env"].is_null())
            e.api_key_env = j["api_key_env"].get<std::string>();
        e.temperature = j.value("temperature", e.temperature);
        e.max_output_tokens = j.value("max_output_tokens", e.max_output_tokens);
        e.requests_per_minute = j.value("requests_per_minute", e.requests_per_minute);
        e.burst = j.value("burst", e.burst);
        e.max_retries = j.value("max_retries", e.max_retries);
        e.timeout = std::chrono::milliseconds(j.value("timeout_ms", e.timeout.count()));
        e.retry_backoff = std::chrono::milliseconds(j.value("retry_backoff_ms", e.retry_backoff.count()));
        e.family = j.value("family", std::string{});
    } catch (const json::exception& ex) {
        throw Error("config", std::string("bad endpoint entry: ") + ex.what());
    }
    validate_endpoint(e);
    return e;
}

using Panel = std::vector<EndpointConfig>;

/// Accepts either a bare list of endpoints or `{"endpoints": [...]}`.
inline Panel panel_from_json(const json& doc) {
    const json& list = doc.is_object() && doc.contains("endpoints") ? doc["endpoints"] : doc;
    if (!list.is_array()) throw Error("config", "panel must be a list of endpoints");
    Panel panel;
    std::set<std::string> names;
    for (const auto& item : list) {
        auto e = endpoint_from_json(item);
        if (!names.insert(e.name).second) throw Error("config", "duplicate endpoint name: " + e.name);
        panel.push_back(std::move(e));
    }
    return panel;
}

inline Panel load_panel(const std::filesystem::path& path) { return panel_from_json(load_document(path)); }

inline std::string panel_hash(const Panel& panel) {
    json arr = json::array();
    for (const auto& e : panel) arr.push_back(endpoint_to_json(e));
    return sha256_hex(arr.dump());
}

// ---------------------------------------------------------------------------
// Exchanges

struct ChatExchange {
    std::string id;
    std::string endpoint_name;
    Messages request_messages;
    std::string response_text;
    std::chrono::milliseconds latency{0};
    std::int64_t input_tokens = 0;
    std::int64_t output_tokens = 0;
    int attempt_count = 1;
    TimePoint timestamp{};
};

inline json exchange_to_json(const ChatExchange& x) {
    return json{{"id", x.id},
                {"endpoint", x.endpoint_name},
                {"messages", messages_to_json(x.request_messages)},
                {"response", x.response_text},
                {"latency_ms", x.latency.count()},
                {"input_tokens", x.input_tokens},
                {"output_tokens", x.output_tokens},
                {"attempts", x.attempt_count},
                {"timestamp", format_rfc3339(x.timestamp, true)}};
}

inline ChatExchange exchange_from_json(const json& j) {
    ChatExchange x;
    x.id = j.at("id").get<std::string>();
    x.endpoint_name = j.at("endpoint").get<std::string>();
    x.request_messages = messages_from_json(j.at("messages"));
    x.response_text = j.at("response").get<std::string>();
    x.latency = std::chrono::milliseconds(j.at("latency_ms").get<std::int64_t>());
    x.input_tokens = j.at("input_tokens").get<std::int64_t>();
    x.output_tokens = j.at("output_tokens").get<std::int64_t>();
    x.attempt_count = j.at("attempts").get<int>();
    parse_rfc3339(j.at("timestamp").get<std::string>(), x.timestamp);
    return x;
}

/// Retries exhausted or a non-retryable HTTP status.
class TransportError : public Error {
public:
    TransportError(const std::string& what, int last_status, int attempts)
        : Error("transport", what), last_status_(last_status), attempts_(attempts) {}
    int last_status() const noexcept { return last_status_; }
    int attempts() const noexcept { return attempts_; }

private:
    int last_status_;
    int attempts_;
};

/// The endpoint answered 2xx with a body that is not a chat completion.
class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& what) : Error("protocol", what) {}
};

/// Single-writer append-only JSON-lines log. Each record is flushed before
/// `append` returns.
class ExchangeLog {
public:
    explicit ExchangeLog(const std::filesystem::path& path) : path_(path) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        out_.open(path, std::ios::app | std::ios::binary);
        if (!out_) throw Error("io", "cannot open exchange log: " + path.string());
    }

    void append(const json& record) {
        std::lock_guard lock(mu_);
        out_ << record.dump() << '\n';
        out_.flush();
    }

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::mutex mu_;
    std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Rate limiting

/// Token bucket expressed as a theoretical-arrival-time schedule: admission
/// slots are `60s / rpm` apart, with up to `burst` slots available at once.
class RateLimiter {
public:
    using SteadyClock = std::chrono::steady_clock;

    RateLimiter(int requests_per_minute, int burst)
        : interval_(std::chrono::duration_cast<SteadyClock::duration>(std::chrono::minutes(1)) /
                    requests_per_minute),
          burst_(burst) {}

    /// Reserves the next admission slot and sleeps until it opens.
    void acquire() { std::this_thread::sleep_until(reserve(SteadyClock::now())); }

    SteadyClock::time_point reserve(SteadyClock::time_point now) {
        std::lock_guard lock(mu_);
        if (tat_ < now) tat_ = now;
        auto allowed = tat_ - interval_ * (burst_ - 1);
        tat_ += interval_;
        return std::max(allowed, now);
    }

    SteadyClock::duration interval() const { return interval_; }

private:
    SteadyClock::duration interval_;
    int burst_;
    std::mutex mu_;
    SteadyClock::time_point tat_{};
};

// ---------------------------------------------------------------------------
// Client

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path;  // without trailing slash
};

inline ParsedUrl parse_base_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error("config", "base_url lacks a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl out;
    out.scheme_host_port = url.substr(0, path_start);
    out.path = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
    return out;
}

inline std::int64_t approx_token_count(std::string_view text) {
    std::int64_t n = 0;
    bool in_word = false;
    for (unsigned char c : text) {
        bool space = std::isspace(c) != 0;
        if (!space && !in_word) ++n;
        in_word = !space;
    }
    return n;
}

inline bool is_retryable_status(int status) { return status == 429 || (status >= 500 && status <= 599); }

/// Uniform chat-completions client. Thread-safe; one limiter per endpoint.
class Gateway {
public:
    explicit Gateway(std::shared_ptr<ExchangeLog> log = nullptr) : log_(std::move(log)) {}

    ChatExchange complete(const EndpointConfig& endpoint, const Messages& messages,
                          const std::string& exchange_id = {}) {
        if (messages.empty()) throw Error("usage", "complete() needs at least one message");
        auto url = parse_base_url(endpoint.base_url);
        auto route = url.path + "/chat/completions";

        json body{{"model", endpoint.model_id},
                  {"messages", messages_to_json(messages)},
                  {"temperature", endpoint.temperature},
                  {"max_tokens", endpoint.max_output_tokens}};
        auto payload = body.dump();

        httplib::Headers headers;
        if (endpoint.api_key_env) {
            if (const char* key = std::getenv(endpoint.api_key_env->c_str()); key && *key)
                headers.emplace("Authorization", std::string("Bearer ") + key);
        }

        ChatExchange x;
        x.id = exchange_id.empty() ? endpoint.name + "#" + std::to_string(next_seq_++) : exchange_id;
        x.endpoint_name = endpoint.name;
        x.request_messages = messages;
        x.timestamp = now_utc();
        record({{"event", "request"},
                {"id", x.id},
                {"endpoint", endpoint.name},
                {"timestamp", format_rfc3339(x.timestamp, true)},
                {"body", body}});

        auto& limiter = limiter_for(endpoint);
        int last_status = 0;
        std::string last_error;
        auto backoff = endpoint.retry_backoff;
        const int max_attempts = endpoint.max_retries + 1;
        for (int attempt = 1; attempt <= max_attempts; ++attempt) {
            limiter.acquire();
            httplib::Client client(url.scheme_host_port);
            auto secs = std::chrono::duration_cast<std::chrono::seconds>(endpoint.timeout);
            auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(endpoint.timeout - secs);
            client.set_connection_timeout(secs.count(), usecs.count());
            client.set_read_timeout(secs.count(), usecs.count());
            client.set_write_timeout(secs.count(), usecs.count());

            auto started = std::chrono::steady_clock::now();
            auto res = client.Post(route, headers, payload, "application/json");
            auto latency =
                std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);

            bool retryable = false;
            if (!res) {
                last_status = 0;
                last_error = "connection error: " + httplib::to_string(res.error());
                retryable = true;
            } else if (res->status >= 200 && res->status < 300) {
                x.attempt_count = attempt;
                x.latency = latency;
                try {
                    parse_completion(res->body, x);
                } catch (const ProtocolError& e) {
                    record({{"event", "error"},
                            {"id", x.id},
                            {"endpoint", endpoint.name},
                            {"kind", "protocol"},
                            {"status", res->status},
                            {"attempts", attempt},
                            {"message", e.what()},
                            {"raw", res->body}});
                    throw;
                }
                auto entry = exchange_to_json(x);
                entry["event"] = "response";
                record(entry);
                return x;
            } else {
                last_status = res->status;
                last_error = "HTTP " + std::to_string(res->status);
                retryable = is_retryable_status(res->status);
                if (res->status == 429 && res->has_header("Retry-After")) {
                    try {
                        auto hinted = std::chrono::milliseconds(
                            static_cast<std::int64_t>(std::stod(res->get_header_value("Retry-After")) * 1000));
                        backoff = std::max(backoff, std::min(hinted, kMaxBackoff));
                    } catch (const std::exception&) {
                    }
                }
            }
            if (!retryable || attempt == max_attempts) {
                record({{"event", "error"},
                        {"id", x.id},
                        {"endpoint", endpoint.name},
                        {"kind", "transport"},
                        {"status", last_status},
                        {"attempts", attempt},
                        {"message", last_error}});
                throw TransportError(endpoint.name + ": " + last_error + " after " + std::to_string(attempt) +
                                         " attempt(s)",
                                     last_status, attempt);
            }
            std::this_thread::sleep_for(backoff);
            backoff = std::min(backoff * 2, kMaxBackoff);
        }
        throw TransportError(endpoint.name + ": no attempts made", 0, 0);  // unreachable
    }

private:
    static constexpr std::chrono::milliseconds kMaxBackoff{30'000};

    static void parse_completion(const std::string& body, ChatExchange& x) {
        json j;
        try {
            j = json::parse(body);
        } catch (const json::exception& e) {
            throw ProtocolError(std::string("response is not JSON: ") + e.what());
        }
        try {
            const auto& content = j.at("choices").at(0).at("message").at("content");
            if (!content.is_string()) throw ProtocolError("message content is not a string");
            x.response_text = content.get<std::string>();
        } catch (const json::exception& e) {
            throw ProtocolError(std::string("missing choices[0].message.content: ") + e.what());
        }
        std::int64_t prompt_tokens = -1, completion_tokens = -1;
        if (j.contains("usage") && j["usage"].is_object()) {
            prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{-1});
            completion_tokens = j["usage"].value("completion_tokens", std::int64_t{-1});
        }
        if (prompt_tokens < 0) {
            prompt_tokens = 0;
            for (const auto& m : x.request_messages) prompt_tokens += approx_token_count(m.content);
        }
        if (completion_tokens < 0) completion_tokens = approx_token_count(x.response_text);
        x.input_tokens = prompt_tokens;
        x.output_tokens = completion_tokens;
    }

    void record(const json& entry) {
        if (log_) log_->append(entry);
    }

    RateLimiter& limiter_for(const EndpointConfig& endpoint) {
        std::lock_guard lock(mu_);
        auto& slot = limiters_[endpoint.name];
        if (!slot) slot = std::make_unique<RateLimiter>(endpoint.requests_per_minute, endpoint.burst);
        return *slot;
    }

    std::shared_ptr<ExchangeLog> log_;
    std::mutex mu_;
    std::map<std::string, std::unique_ptr<RateLimiter>> limiters_;
    std::atomic<std::uint64_t> next_seq_{1};
};

// ---------------------------------------------------------------------------
// Cost accounting

struct Price {
    double input_per_million = 0.0;
    double output_per_million = 0.0;
};

struct EndpointCost {
    std::int64_t input_tokens = 0;
    std::int64_t output_tokens = 0;
    std::int64_t requests = 0;
    double cost = 0.0;
};

struct CostLedger {
    std::map<std::string, EndpointCost> endpoints;

    double total_cost() const {
        double sum = 0.0;
        for (const auto& [_, c] : endpoints) sum += c.cost;
        return sum;
    }

    CostLedger& operator+=(const CostLedger& other) {
        for (const auto& [name, c] : other.endpoints) {
            auto& mine = endpoints[name];
            mine.input_tokens += c.input_tokens;
            mine.output_tokens += c.output_tokens;
            mine.requests += c.requests;
            mine.cost += c.cost;
        }
        return *this;
    }

    friend CostLedger operator+(CostLedger a, const CostLedger& b) { return a += b; }
};

inline double token_cost(std::int64_t input_tokens, std::int64_t output_tokens, const Price& price) {
    return (static_cast<double>(input_tokens) * price.input_per_million +
            static_cast<double>(output_tokens) * price.output_per_million) /
           1e6;
}

inline CostLedger cost_report(const std::vector<ChatExchange>& exchanges, const std::map<std::string, Price>& prices) {
    CostLedger ledger;
    for (const auto& x : exchanges) {
        if (!prices.count(x.endpoint_name)) throw Error("config", "no price configured for endpoint " + x.endpoint_name);
        auto& c = ledger.endpoints[x.endpoint_name];
        c.input_tokens += x.input_tokens;
        c.output_tokens += x.output_tokens;
        c.requests += 1;
    }
    for (auto& [name, c] : ledger.endpoints) c.cost = token_cost(c.input_tokens, c.output_tokens, prices.at(name));
    return ledger;
}

inline json ledger_to_json(const CostLedger& ledger) {
    json j = json::object();
    for (const auto& [name, c] : ledger.endpoints)
        j[name] = {{"input_tokens", c.input_tokens},
                   {"output_tokens", c.output_tokens},
                   {"requests", c.requests},
                   {"cost_usd", c.cost}};
    return json{{"endpoints", j}, {"total_cost_usd", ledger.total_cost()}};
}

// ---------------------------------------------------------------------------
// Bounded worker pool

/// Runs `task(i)` for i in [0, count) on `width` threads.
inline void parallel_for(std::size_t count, std::size_t width, const std::function<void(std::size_t)>& task) {
    width = std::max<std::size_t>(1, std::min(width, count));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto worker = [&] {
        for (;;) {
            auto i = next.fetch_add(1);
            if (i >= count) return;
            try {
                task(i);
            } catch (...) {
                std::lock_guard lock(failure_mu);
                if (!failure) failure = std::current_exception();
                next = count;
                return;
            }
        }
    };
    if (width == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (std::size_t t = 0; t < width; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    if (failure) std::rethrow_exception(failure);
}

}  // namespace factlab
