#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "factlab/annotator.hpp"
#include "factlab/label.hpp"

namespace factlab {

struct VoteTally {
    std::optional<Label> majority;  // nullopt is a tie (including the empty electorate)
    std::array<std::size_t, 2> counts{0, 0};  // indexed by index_of(Label)

    std::size_t count(Label l) const { return counts[index_of(l)]; }
};

/// Strict plurality over the binary labels; equal counts are a tie.
inline VoteTally majority_vote(std::span<const Label> votes) {
    VoteTally t;
    for (auto v : votes) ++t.counts[index_of(v)];
    if (t.counts[0] > t.counts[1]) t.majority = Label::FactuallyCorrect;
    if (t.counts[1] > t.counts[0]) t.majority = Label::FactuallyIncorrect;
    return t;
}

struct VoteRecord {
    std::string article_id;
    std::map<std::string, Label> votes;  // endpoint → label, failures excluded
    std::optional<Label> majority_label;  // nullopt = Tie
    bool unanimous = false;
    std::size_t valid_vote_count = 0;
    std::size_t excluded_count = 0;
    std::array<std::size_t, 2> counts{0, 0};

    bool tie() const { return !majority_label; }
    bool operator==(const VoteRecord&) const = default;
};

inline json vote_record_to_json(const VoteRecord& r) {
    json votes = json::object();
    for (const auto& [e, l] : r.votes) votes[e] = to_string(l);
    return json{{"article_id", r.article_id},
                {"votes", votes},
                {"majority_label", r.majority_label ? json(to_string(*r.majority_label)) : json("Tie")},
                {"unanimous", r.unanimous},
                {"valid_vote_count", r.valid_vote_count},
                {"excluded_count", r.excluded_count},
                {"counts", {{"Factually Correct", r.counts[0]}, {"Factually Incorrect", r.counts[1]}}}};
}

inline VoteRecord vote_record_from_json(const json& j) {
    VoteRecord r;
    r.article_id = j.at("article_id").get<std::string>();
    for (const auto& [e, l] : j.at("votes").items()) r.votes[e] = parse_label(l.get<std::string>());
    auto m = j.at("majority_label").get<std::string>();
    if (m != "Tie") r.majority_label = parse_label(m);
    r.unanimous = j.at("unanimous").get<bool>();
    r.valid_vote_count = j.at("valid_vote_count").get<std::size_t>();
    r.excluded_count = j.at("excluded_count").get<std::size_t>();
    for (const auto& [_, l] : r.votes) ++r.counts[index_of(l)];
    return r;
}

inline std::vector<VoteRecord> load_vote_records(const std::filesystem::path& path) {
    std::vector<VoteRecord> out;
    for (const auto& j : read_jsonl(path)) out.push_back(vote_record_from_json(j));
    return out;
}

inline std::string vote_records_to_jsonl(const std::vector<VoteRecord>& records) {
    std::string out;
    for (const auto& r : records) out += vote_record_to_json(r).dump() + "\n";
    return out;
}

/// One record per article, in first-appearance order.
inline std::vector<VoteRecord> build_vote_records(const std::vector<Annotation>& run) {
    std::vector<VoteRecord> records;
    std::map<std::string, std::size_t> index;
    for (const auto& a : run) {
        auto [it, inserted] = index.emplace(a.article_id, records.size());
        if (inserted) {
            records.emplace_back();
            records.back().article_id = a.article_id;
        }
        auto& r = records[it->second];
        if (a.labeled())
            r.votes[a.endpoint_name] = *a.label;
        else
            ++r.excluded_count;
    }
    for (auto& r : records) {
        std::vector<Label> labels;
        for (const auto& [_, l] : r.votes) labels.push_back(l);
        auto tally = majority_vote(labels);
        r.majority_label = tally.majority;
        r.counts = tally.counts;
        r.valid_vote_count = r.votes.size();
        r.unanimous = r.majority_label && (tally.counts[0] == 0 || tally.counts[1] == 0);
    }
    return records;
}

enum class ReviewPolicy {
    Default,    // ties, split votes, and records with excluded votes
    TiesOnly,
    AuditAll,   // every record
};

inline ReviewPolicy parse_review_policy(std::string_view name) {
    auto n = to_lower(trim(name));
    if (n == "default") return ReviewPolicy::Default;
    if (n == "ties-only" || n == "ties_only") return ReviewPolicy::TiesOnly;
    if (n == "audit-all" || n == "audit_all") return ReviewPolicy::AuditAll;
    throw Error("usage", "unknown review policy: " + std::string(name));
}

inline std::vector<std::string> select_for_review(const std::vector<VoteRecord>& records, ReviewPolicy policy) {
    std::vector<std::string> ids;
    for (const auto& r : records) {
        bool take = false;
        switch (policy) {
        case ReviewPolicy::Default: take = r.tie() || !r.unanimous || r.excluded_count > 0; break;
        case ReviewPolicy::TiesOnly: take = r.tie(); break;
        case ReviewPolicy::AuditAll: take = true; break;
        }
        if (take) ids.push_back(r.article_id);
    }
    return ids;
}

inline std::string review_queue_to_jsonl(const std::vector<std::string>& ids, const std::vector<VoteRecord>& records) {
    std::map<std::string, const VoteRecord*> by_id;
    for (const auto& r : records) by_id[r.article_id] = &r;
    std::string out;
    for (const auto& id : ids) {
        json j{{"article_id", id}};
        if (auto it = by_id.find(id); it != by_id.end()) {
            const auto& r = *it->second;
            j["reason"] = r.tie() ? "tie" : !r.unanimous ? "split" : r.excluded_count ? "excluded" : "audit";
        }
        out += j.dump() + "\n";
    }
    return out;
}

inline std::vector<std::string> load_review_queue(const std::filesystem::path& path) {
    std::vector<std::string> ids;
    for (const auto& j : read_jsonl(path)) ids.push_back(j.at("article_id").get<std::string>());
    return ids;
}

}  // namespace factlab
