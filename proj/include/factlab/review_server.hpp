#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>

#include "factlab/gateway.hpp"  // httplib with TLS support
#include "factlab/review.hpp"

namespace factlab {

/// Maps a bearer token to a reviewer id; nullopt rejects the request.
using Authenticator = std::function<std::optional<std::string>(const std::string& token)>;

/// Token file: one `token reviewer_id` pair per line, `#` comments allowed.
inline std::map<std::string, std::string> load_token_file(const std::filesystem::path& path) {
    std::map<std::string, std::string> tokens;
    for (const auto& line : split_lines(read_file(path))) {
        auto t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        std::istringstream in{std::string(t)};
        std::string token, reviewer;
        if (!(in >> token >> reviewer)) throw Error("config", path.string() + ": expected 'token reviewer_id'");
        tokens[token] = reviewer;
    }
    return tokens;
}

inline Authenticator token_table_authenticator(std::map<std::string, std::string> tokens) {
    return [tokens = std::move(tokens)](const std::string& token) -> std::optional<std::string> {
        auto it = tokens.find(token);
        if (it == tokens.end()) return std::nullopt;
        return it->second;
    };
}

struct ReviewServerOptions {
    std::string run_id;
    json run_summary = json::object();            // merged into GET /runs/{id}/summary
    std::optional<std::filesystem::path> static_dir;  // reviewer UI bundle
    std::optional<std::filesystem::path> gold_out;    // POST /promote writes here
    std::optional<std::chrono::milliseconds> stale_after;
    bool blind = true;  // default for task payloads; `?blind=0|1` overrides per request
};

/// HTTP JSON front end over a ReviewStore.
///
///   GET  /tasks?state=open|awaiting_escalation|resolved[&blind=0|1]
///   GET  /tasks/{id}[?blind=0|1]
///   POST /tasks/{id}/decisions   {"label", "note", "expected_version"?}
///   POST /tasks/{id}/escalate    {"reason"?, "expected_version"?}
///   POST /promote                (Senior only)
///   GET  /reviewers/me
///   GET  /runs/{id}/summary
class ReviewServer {
public:
    ReviewServer(ReviewStore& store, Authenticator auth, ReviewServerOptions opts = {})
        : store_(store), auth_(std::move(auth)), opts_(std::move(opts)) {
        routes();
    }

    ~ReviewServer() { stop(); }
    ReviewServer(const ReviewServer&) = delete;
    ReviewServer& operator=(const ReviewServer&) = delete;

    int start(const std::string& host = "127.0.0.1", int port = 0) {
        port_ = bind(host, port);
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    void run(const std::string& host, int port, const std::function<void(int)>& on_ready = {}) {
        port_ = bind(host, port);
        if (on_ready) on_ready(port_);
        server_.listen_after_bind();
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }

private:
    int bind(const std::string& host, int port) {
        int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (bound < 0) throw Error("io", "review server cannot bind " + host + ":" + std::to_string(port));
        return bound;
    }

    static void send_json(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
        send_json(res, status, {{"error", kind}, {"message", message}});
    }

    static int status_for(const std::string& kind) {
        if (kind == "unknown_task") return 404;
        if (kind == "unknown_reviewer" || kind == "forbidden") return 403;
        if (kind == "wrong_state" || kind == "duplicate_reviewer" || kind == "version_conflict") return 409;
        if (kind == "label" || kind == "usage" || kind == "parse") return 400;
        return 500;
    }

    std::optional<Reviewer> authenticate(const httplib::Request& req, httplib::Response& res) {
        auto header = req.get_header_value("Authorization");
        const std::string prefix = "Bearer ";
        if (header.rfind(prefix, 0) != 0) {
            send_error(res, 401, "unauthorized", "missing bearer token");
            return std::nullopt;
        }
        auto id = auth_(std::string(trim(header.substr(prefix.size()))));
        if (!id) {
            send_error(res, 401, "unauthorized", "unknown token");
            return std::nullopt;
        }
        auto reviewer = store_.reviewer(*id);
        if (!reviewer) {
            send_error(res, 403, "unknown_reviewer", "token maps to unknown reviewer " + *id);
            return std::nullopt;
        }
        return reviewer;
    }

    void sweep() {
        if (opts_.stale_after) store_.escalate_stale(now_utc(), *opts_.stale_after);
    }

    // Runs `body` with authentication, lazy deadline escalation, and error mapping.
    template <typename F>
    httplib::Server::Handler guarded(F body) {
        return [this, body](const httplib::Request& req, httplib::Response& res) {
            auto who = authenticate(req, res);
            if (!who) return;
            try {
                sweep();
                body(*who, req, res);
            } catch (const Error& e) {
                send_error(res, status_for(e.kind()), e.kind(), e.what());
            } catch (const json::exception& e) {
                send_error(res, 400, "parse", e.what());
            }
        };
    }

    static std::optional<std::uint64_t> expected_version(const json& body) {
        if (body.contains("expected_version") && !body["expected_version"].is_null())
            return body["expected_version"].get<std::uint64_t>();
        return std::nullopt;
    }

    static json parse_body(const httplib::Request& req) {
        if (trim(req.body).empty()) return json::object();
        auto j = json::parse(req.body);
        if (!j.is_object()) throw Error("parse", "request body must be a JSON object");
        return j;
    }

    bool blind(const httplib::Request& req) const {
        if (!req.has_param("blind")) return opts_.blind;
        auto v = req.get_param_value("blind");
        if (v == "1" || v == "true") return true;
        if (v == "0" || v == "false") return false;
        throw Error("usage", "blind must be 0 or 1");
    }

    json summary() const {
        json counts = {{"open", 0}, {"awaiting_escalation", 0}, {"resolved", 0}};
        std::map<std::string, int> by;
        for (const auto& t : store_.list()) {
            counts[std::string(to_string(t.state))] = counts[std::string(to_string(t.state))].get<int>() + 1;
            if (t.resolved_by) ++by[std::string(to_string(*t.resolved_by))];
        }
        json out = opts_.run_summary;
        out["run_id"] = opts_.run_id;
        out["tasks"] = counts;
        out["resolved_by"] = by;
        return out;
    }

    void routes() {
        server_.Get("/tasks", guarded([this](const Reviewer&, const httplib::Request& req, httplib::Response& res) {
                        std::optional<TaskState> state;
                        if (req.has_param("state")) state = parse_task_state(req.get_param_value("state"));
                        json arr = json::array();
                        for (const auto& t : store_.list(state)) arr.push_back(task_to_json(t, blind(req)));
                        send_json(res, 200, {{"tasks", arr}});
                    }));
        server_.Get(R"(/tasks/([^/]+))",
                    guarded([this](const Reviewer&, const httplib::Request& req, httplib::Response& res) {
                        auto task = store_.get(req.matches[1]);
                        if (!task) throw ReviewError("unknown_task", "no review task for article " + req.matches[1].str());
                        send_json(res, 200, task_to_json(*task, blind(req)));
                    }));
        server_.Post(R"(/tasks/([^/]+)/decisions)",
                     guarded([this](const Reviewer& who, const httplib::Request& req, httplib::Response& res) {
                         auto body = parse_body(req);
                         auto label = parse_label(body.at("label").get<std::string>());
                         auto task = store_.submit(req.matches[1], who.id, label, body.value("note", std::string{}),
                                                   expected_version(body));
                         send_json(res, 201, task_to_json(task, opts_.blind));
                     }));
        server_.Post(R"(/tasks/([^/]+)/escalate)",
                     guarded([this](const Reviewer& who, const httplib::Request& req, httplib::Response& res) {
                         auto body = parse_body(req);
                         auto task = store_.flag_escalation(req.matches[1], who.id, body.value("reason", std::string{}),
                                                            expected_version(body));
                         send_json(res, 200, task_to_json(task, opts_.blind));
                     }));
        server_.Post("/promote", guarded([this](const Reviewer& who, const httplib::Request&, httplib::Response& res) {
                         if (who.role != ReviewerRole::Senior)
                             throw ReviewError("forbidden", "only senior reviewers may promote gold labels");
                         auto gold = store_.promote();
                         if (opts_.gold_out) write_file_atomic(*opts_.gold_out, gold_to_csv(gold));
                         json arr = json::array();
                         for (const auto& [id, g] : gold)
                             arr.push_back({{"article_id", id},
                                            {"label", to_string(g.label)},
                                            {"provenance", to_string(g.provenance)}});
                         send_json(res, 200, {{"gold", arr}, {"count", gold.size()}});
                     }));
        server_.Get("/reviewers/me", guarded([](const Reviewer& who, const httplib::Request&, httplib::Response& res) {
                        send_json(res, 200, reviewer_to_json(who));
                    }));
        server_.Get(R"(/runs/([^/]+)/summary)",
                    guarded([this](const Reviewer&, const httplib::Request& req, httplib::Response& res) {
                        if (req.matches[1] != opts_.run_id)
                            return send_error(res, 404, "unknown_run", "no run " + req.matches[1].str());
                        send_json(res, 200, summary());
                    }));
        if (opts_.static_dir) server_.set_mount_point("/", opts_.static_dir->string());
    }

    ReviewStore& store_;
    Authenticator auth_;
    ReviewServerOptions opts_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
};

}  // namespace factlab
