#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "factlab/aggregator.hpp"
#include "factlab/annotator.hpp"
#include "factlab/corpus.hpp"

namespace factlab {

enum class ReviewerRole { Reviewer, Senior };

inline std::string_view to_string(ReviewerRole r) { return r == ReviewerRole::Senior ? "Senior" : "Reviewer"; }

inline ReviewerRole parse_reviewer_role(std::string_view s) {
    auto n = to_lower(trim(s));
    if (n == "senior") return ReviewerRole::Senior;
    if (n == "reviewer") return ReviewerRole::Reviewer;
    throw Error("config", "unknown reviewer role: " + std::string(s));
}

struct Reviewer {
    std::string id;
    std::string display_name;
    ReviewerRole role = ReviewerRole::Reviewer;
};

using Roster = std::map<std::string, Reviewer>;

inline json reviewer_to_json(const Reviewer& r) {
    return json{{"id", r.id}, {"display_name", r.display_name}, {"role", to_string(r.role)}};
}

/// `{"reviewers": [{"id", "display_name", "role"}]}` or a bare list.
inline Roster roster_from_json(const json& doc) {
    const json& list = doc.is_object() && doc.contains("reviewers") ? doc["reviewers"] : doc;
    if (!list.is_array()) throw Error("config", "reviewer roster must be a list");
    Roster roster;
    for (const auto& item : list) {
        Reviewer r;
        r.id = item.at("id").get<std::string>();
        r.display_name = item.value("display_name", r.id);
        r.role = parse_reviewer_role(item.value("role", std::string("Reviewer")));
        if (!roster.emplace(r.id, r).second) throw Error("config", "duplicate reviewer id: " + r.id);
    }
    return roster;
}

inline Roster load_roster(const std::filesystem::path& path) { return roster_from_json(load_document(path)); }

enum class TaskState { Open, AwaitingEscalation, Resolved };

inline std::string_view to_string(TaskState s) {
    switch (s) {
    case TaskState::Open: return "open";
    case TaskState::AwaitingEscalation: return "awaiting_escalation";
    case TaskState::Resolved: return "resolved";
    }
    return "";
}

inline TaskState parse_task_state(std::string_view s) {
    auto n = to_lower(trim(s));
    if (n == "open") return TaskState::Open;
    if (n == "awaiting_escalation" || n == "awaitingescalation") return TaskState::AwaitingEscalation;
    if (n == "resolved") return TaskState::Resolved;
    throw Error("usage", "unknown task state: " + std::string(s));
}

enum class ResolvedBy { ReviewerMajority, SeniorDecision, Consensus };

inline std::string_view to_string(ResolvedBy r) {
    switch (r) {
    case ResolvedBy::ReviewerMajority: return "ReviewerMajority";
    case ResolvedBy::SeniorDecision: return "SeniorDecision";
    case ResolvedBy::Consensus: return "Consensus";
    }
    return "";
}

inline ResolvedBy parse_resolved_by(std::string_view s) {
    if (s == "ReviewerMajority") return ResolvedBy::ReviewerMajority;
    if (s == "SeniorDecision") return ResolvedBy::SeniorDecision;
    if (s == "Consensus") return ResolvedBy::Consensus;
    throw Error("parse", "unknown resolution kind: " + std::string(s));
}

struct ReviewerDecision {
    std::string article_id;
    std::string reviewer_id;
    ReviewerRole role = ReviewerRole::Reviewer;
    Label label = Label::FactuallyCorrect;
    std::string note;
    TimePoint decided_at{};

    bool operator==(const ReviewerDecision&) const = default;
};

struct ReviewTask {
    std::string article_id;
    VoteRecord vote_record;
    std::vector<Annotation> annotations;
    TaskState state = TaskState::Open;
    std::vector<ReviewerDecision> decisions;
    std::optional<Label> resolution;
    std::optional<ResolvedBy> resolved_by;
    std::string escalation_reason;
    TimePoint opened_at{};
    std::uint64_t version = 1;

    bool operator==(const ReviewTask&) const = default;
};

/// Rejections of a review operation. `kind()` is one of `duplicate_reviewer`,
/// `wrong_state`, `unknown_reviewer`, `unknown_task`, `version_conflict`,
/// `forbidden`.
class ReviewError : public Error {
public:
    using Error::Error;
};

inline constexpr std::size_t kReviewersPerTask = 3;

// ---------------------------------------------------------------------------
// Pure transitions

/// Records one decision. Non-senior decisions are accepted while Open; three
/// of them always resolve the task (binary labels cannot tie at three).
/// Senior decisions are accepted only while AwaitingEscalation.
inline ReviewTask submit_decision(ReviewTask task, const ReviewerDecision& d) {
    if (task.state == TaskState::Resolved)
        throw ReviewError("wrong_state", "task " + task.article_id + " is already resolved");
    for (const auto& prior : task.decisions)
        if (prior.reviewer_id == d.reviewer_id)
            throw ReviewError("duplicate_reviewer",
                              "reviewer " + d.reviewer_id + " already decided task " + task.article_id);

    if (d.role == ReviewerRole::Senior) {
        if (task.state != TaskState::AwaitingEscalation)
            throw ReviewError("wrong_state", "senior decisions are only accepted on escalated tasks");
        task.decisions.push_back(d);
        task.state = TaskState::Resolved;
        task.resolution = d.label;
        task.resolved_by = ResolvedBy::SeniorDecision;
        ++task.version;
        return task;
    }

    if (task.state != TaskState::Open)
        throw ReviewError("wrong_state", "task " + task.article_id + " awaits a senior decision");
    task.decisions.push_back(d);
    ++task.version;

    std::vector<Label> labels;
    for (const auto& x : task.decisions)
        if (x.role == ReviewerRole::Reviewer) labels.push_back(x.label);
    if (labels.size() >= kReviewersPerTask) {
        auto tally = majority_vote(labels);
        if (tally.majority) {
            task.state = TaskState::Resolved;
            task.resolution = tally.majority;
            bool unanimous = tally.counts[0] == 0 || tally.counts[1] == 0;
            task.resolved_by = unanimous ? ResolvedBy::Consensus : ResolvedBy::ReviewerMajority;
        }
    }
    return task;
}

/// Open → AwaitingEscalation, by explicit flag or a fired deadline.
inline ReviewTask escalate(ReviewTask task, const std::string& reason) {
    if (task.state != TaskState::Open)
        throw ReviewError("wrong_state", "only open tasks can be escalated (task " + task.article_id + " is " +
                                             std::string(to_string(task.state)) + ")");
    task.state = TaskState::AwaitingEscalation;
    task.escalation_reason = reason;
    ++task.version;
    return task;
}

inline bool is_stale(const ReviewTask& task, TimePoint now, std::chrono::milliseconds deadline) {
    return task.state == TaskState::Open && task.decisions.size() < kReviewersPerTask &&
           now - task.opened_at >= deadline;
}

/// One Open task per queued id, carrying that article's annotations.
inline std::vector<ReviewTask> open_tasks(const std::vector<std::string>& queue, const std::vector<Annotation>& run,
                                          const std::vector<VoteRecord>& records, TimePoint now = now_utc()) {
    std::map<std::string, const VoteRecord*> by_id;
    for (const auto& r : records) by_id[r.article_id] = &r;
    std::vector<ReviewTask> tasks;
    std::set<std::string> seen;
    for (const auto& id : queue) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw Error("review", "queued article " + id + " has no vote record");
        if (!seen.insert(id).second) continue;
        ReviewTask t;
        t.article_id = id;
        t.vote_record = *it->second;
        for (const auto& a : run)
            if (a.article_id == id) t.annotations.push_back(a);
        t.opened_at = now;
        tasks.push_back(std::move(t));
    }
    return tasks;
}

/// HumanReviewed gold labels from resolved tasks; repeated ids collapse.
inline GoldSet promote_resolutions(const std::vector<ReviewTask>& tasks) {
    GoldSet gold;
    for (const auto& t : tasks) {
        if (t.state != TaskState::Resolved || !t.resolution)
            throw ReviewError("wrong_state", "task " + t.article_id + " is not resolved");
        gold[t.article_id] = GoldLabel{t.article_id, *t.resolution, Provenance::HumanReviewed};
    }
    return gold;
}

// ---------------------------------------------------------------------------
// Serialization

inline json decision_to_json(const ReviewerDecision& d) {
    return json{{"article_id", d.article_id},
                {"reviewer_id", d.reviewer_id},
                {"role", to_string(d.role)},
                {"label", to_string(d.label)},
                {"note", d.note},
                {"decided_at", format_rfc3339(d.decided_at, true)}};
}

inline ReviewerDecision decision_from_json(const json& j) {
    ReviewerDecision d;
    d.article_id = j.at("article_id").get<std::string>();
    d.reviewer_id = j.at("reviewer_id").get<std::string>();
    d.role = parse_reviewer_role(j.at("role").get<std::string>());
    d.label = parse_label(j.at("label").get<std::string>());
    d.note = j.value("note", std::string{});
    if (!parse_rfc3339(j.at("decided_at").get<std::string>(), d.decided_at))
        throw Error("parse", "bad decided_at in decision");
    return d;
}

/// `hide_models` replaces endpoint names with stable aliases ("Model A", ...).
inline json task_to_json(const ReviewTask& t, bool hide_models = false) {
    json annotations = json::array();
    for (std::size_t i = 0; i < t.annotations.size(); ++i) {
        auto j = annotation_to_json(t.annotations[i]);
        if (hide_models) {
            j["endpoint"] = "Model " + std::string(1, static_cast<char>('A' + i % 26));
            j.erase("exchange_ref");
        }
        annotations.push_back(std::move(j));
    }
    json decisions = json::array();
    for (const auto& d : t.decisions) decisions.push_back(decision_to_json(d));
    auto votes = vote_record_to_json(t.vote_record);
    if (hide_models) {
        json anonymous = json::array();
        for (const auto& [_, l] : t.vote_record.votes) anonymous.push_back(to_string(l));
        votes["votes"] = anonymous;
    }
    return json{{"article_id", t.article_id},
                {"state", to_string(t.state)},
                {"version", t.version},
                {"vote_record", votes},
                {"annotations", annotations},
                {"decisions", decisions},
                {"resolution", t.resolution ? json(to_string(*t.resolution)) : json(nullptr)},
                {"resolved_by", t.resolved_by ? json(to_string(*t.resolved_by)) : json(nullptr)},
                {"escalation_reason", t.escalation_reason},
                {"opened_at", format_rfc3339(t.opened_at, true)}};
}

// ---------------------------------------------------------------------------
// Event log + store

/// Append-only review event stream. Every state change is one JSON line;
/// replaying the stream through the pure transitions rebuilds all tasks.
class ReviewEventLog {
public:
    explicit ReviewEventLog(std::filesystem::path path) : path_(std::move(path)) {
        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        out_.open(path_, std::ios::app | std::ios::binary);
        if (!out_) throw Error("io", "cannot open review event log " + path_.string());
    }

    void append(json event) {
        out_ << event.dump() << '\n';
        out_.flush();
    }

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

struct ReplayResult {
    std::map<std::string, ReviewTask> tasks;
    std::uint64_t last_seq = 0;
};

/// Applies one event to the task map. Derived `task_resolved` events are
/// cross-checked against the recomputed state.
inline void apply_event(std::map<std::string, ReviewTask>& tasks, const json& ev) {
    auto type = ev.at("type").get<std::string>();
    if (type == "task_opened") {
        const auto& tj = ev.at("task");
        ReviewTask t;
        t.article_id = tj.at("article_id").get<std::string>();
        t.vote_record = vote_record_from_json(tj.at("vote_record"));
        for (const auto& a : tj.at("annotations")) t.annotations.push_back(annotation_from_json(a));
        if (!parse_rfc3339(tj.at("opened_at").get<std::string>(), t.opened_at))
            throw Error("replay", "bad opened_at for " + t.article_id);
        if (!tasks.emplace(t.article_id, std::move(t)).second)
            throw Error("replay", "task opened twice: " + tj.at("article_id").get<std::string>());
        return;
    }
    auto id = ev.at("article_id").get<std::string>();
    auto it = tasks.find(id);
    if (it == tasks.end()) throw Error("replay", "event for unknown task " + id);
    auto& task = it->second;
    if (type == "decision_submitted") {
        task = submit_decision(task, decision_from_json(ev.at("decision")));
    } else if (type == "task_escalated") {
        task = escalate(task, ev.value("reason", std::string{}));
    } else if (type == "task_resolved") {
        auto label = parse_label(ev.at("resolution").get<std::string>());
        auto by = parse_resolved_by(ev.at("resolved_by").get<std::string>());
        if (task.state != TaskState::Resolved || task.resolution != label || task.resolved_by != by)
            throw Error("replay", "logged resolution of " + id + " disagrees with replayed state");
    } else {
        throw Error("replay", "unknown event type: " + type);
    }
}

inline ReplayResult replay_events(const std::vector<json>& events) {
    ReplayResult out;
    for (const auto& ev : events) {
        apply_event(out.tasks, ev);
        out.last_seq = std::max(out.last_seq, ev.value("seq", std::uint64_t{0}));
    }
    return out;
}

inline ReplayResult replay_event_log(const std::filesystem::path& path) {
    return replay_events(read_jsonl(path, true));
}

/// Thread-safe task store. Mutations are serialized and each is logged
/// before it becomes visible.
class ReviewStore {
public:
    ReviewStore(Roster roster, std::shared_ptr<ReviewEventLog> log = nullptr)
        : roster_(std::move(roster)), log_(std::move(log)) {
        if (log_ && std::filesystem::exists(log_->path())) {
            auto replayed = replay_event_log(log_->path());
            tasks_ = std::move(replayed.tasks);
            seq_ = replayed.last_seq;
        }
    }

    /// Opens tasks for queued ids that have no task yet; returns the new ones.
    std::vector<ReviewTask> open(const std::vector<std::string>& queue, const std::vector<Annotation>& run,
                                 const std::vector<VoteRecord>& records, TimePoint now = now_utc()) {
        std::lock_guard lock(mu_);
        std::vector<std::string> fresh;
        for (const auto& id : queue)
            if (!tasks_.count(id)) fresh.push_back(id);
        auto created = open_tasks(fresh, run, records, now);
        for (const auto& t : created) {
            json tj = task_to_json(t);
            emit({{"type", "task_opened"}, {"article_id", t.article_id}, {"task", tj}});
            tasks_.emplace(t.article_id, t);
        }
        return created;
    }

    ReviewTask submit(const std::string& article_id, const std::string& reviewer_id, Label label,
                      const std::string& note, std::optional<std::uint64_t> expected_version = std::nullopt,
                      TimePoint now = now_utc()) {
        std::lock_guard lock(mu_);
        const auto& reviewer = lookup_reviewer(reviewer_id);
        auto& task = lookup_task(article_id);
        check_version(task, expected_version);
        ReviewerDecision d{article_id, reviewer.id, reviewer.role, label, note, now};
        auto next = submit_decision(task, d);
        emit({{"type", "decision_submitted"}, {"article_id", article_id}, {"decision", decision_to_json(d)}});
        if (next.state == TaskState::Resolved)
            emit({{"type", "task_resolved"},
                  {"article_id", article_id},
                  {"resolution", to_string(*next.resolution)},
                  {"resolved_by", to_string(*next.resolved_by)}});
        task = std::move(next);
        return task;
    }

    ReviewTask flag_escalation(const std::string& article_id, const std::string& reviewer_id,
                               const std::string& reason, std::optional<std::uint64_t> expected_version = std::nullopt) {
        std::lock_guard lock(mu_);
        lookup_reviewer(reviewer_id);
        auto& task = lookup_task(article_id);
        check_version(task, expected_version);
        auto why = reason.empty() ? "flagged by " + reviewer_id : reason;
        auto next = escalate(task, why);
        emit({{"type", "task_escalated"}, {"article_id", article_id}, {"reason", why}, {"by", reviewer_id}});
        task = std::move(next);
        return task;
    }

    /// Escalates every Open task with fewer than three decisions whose age
    /// reached `deadline`. Returns the escalated ids.
    std::vector<std::string> escalate_stale(TimePoint now, std::chrono::milliseconds deadline) {
        std::lock_guard lock(mu_);
        std::vector<std::string> ids;
        for (auto& [id, task] : tasks_) {
            if (!is_stale(task, now, deadline)) continue;
            auto next = escalate(task, "deadline");
            emit({{"type", "task_escalated"}, {"article_id", id}, {"reason", "deadline"}, {"by", "system"}});
            task = std::move(next);
            ids.push_back(id);
        }
        return ids;
    }

    std::vector<ReviewTask> list(std::optional<TaskState> state = std::nullopt) const {
        std::lock_guard lock(mu_);
        std::vector<ReviewTask> out;
        for (const auto& [_, t] : tasks_)
            if (!state || t.state == *state) out.push_back(t);
        return out;
    }

    std::optional<ReviewTask> get(const std::string& article_id) const {
        std::lock_guard lock(mu_);
        auto it = tasks_.find(article_id);
        if (it == tasks_.end()) return std::nullopt;
        return it->second;
    }

    /// Gold labels for every resolved task.
    GoldSet promote() const {
        std::lock_guard lock(mu_);
        std::vector<ReviewTask> resolved;
        for (const auto& [_, t] : tasks_)
            if (t.state == TaskState::Resolved) resolved.push_back(t);
        return promote_resolutions(resolved);
    }

    const Roster& roster() const { return roster_; }

    std::optional<Reviewer> reviewer(const std::string& id) const {
        auto it = roster_.find(id);
        if (it == roster_.end()) return std::nullopt;
        return it->second;
    }

private:
    const Reviewer& lookup_reviewer(const std::string& id) const {
        auto it = roster_.find(id);
        if (it == roster_.end()) throw ReviewError("unknown_reviewer", "unknown reviewer " + id);
        return it->second;
    }

    ReviewTask& lookup_task(const std::string& id) {
        auto it = tasks_.find(id);
        if (it == tasks_.end()) throw ReviewError("unknown_task", "no review task for article " + id);
        return it->second;
    }

    static void check_version(const ReviewTask& task, std::optional<std::uint64_t> expected) {
        if (expected && *expected != task.version)
            throw ReviewError("version_conflict", "task " + task.article_id + " is at version " +
                                                      std::to_string(task.version) + ", not " + std::to_string(*expected));
    }

    void emit(json event) {
        event["seq"] = ++seq_;
        event["at"] = format_rfc3339(now_utc(), true);
        if (log_) log_->append(event);
    }

    Roster roster_;
    std::shared_ptr<ReviewEventLog> log_;
    mutable std::mutex mu_;
    std::map<std::string, ReviewTask> tasks_;
    std::uint64_t seq_ = 0;
};

}  // namespace factlab
