#include "forkspace/version_tree.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

namespace forkspace {

std::string_view to_string(BranchStatus s) {
    switch (s) {
    case BranchStatus::Running: return "running";
    case BranchStatus::Frozen: return "frozen";
    case BranchStatus::Discarded: return "discarded";
    case BranchStatus::Promoted: return "promoted";
    }
    return "?";
}

namespace {

BranchStatus status_from(const std::string& s) {
    for (auto st : {BranchStatus::Running, BranchStatus::Frozen, BranchStatus::Discarded, BranchStatus::Promoted}) {
        if (to_string(st) == s) return st;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown branch status " + s);
}

CheckpointState checkpoint_from(const std::string& s) {
    for (auto st : {CheckpointState::Pending, CheckpointState::Durable, CheckpointState::Failed}) {
        if (to_string(st) == s) return st;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown checkpoint state " + s);
}

} // namespace

void VersionTree::add_node(VersionNode node) {
    if (nodes_.count(node.id)) throw Error(ErrorCode::Conflict, "duplicate version " + std::to_string(node.id));
    if (node.parent && !nodes_.count(*node.parent)) {
        throw Error(ErrorCode::NotFound, "parent version " + std::to_string(*node.parent) + " does not exist");
    }
    nodes_.emplace(node.id, node);
}

const VersionNode& VersionTree::node(VersionId id) const {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw Error(ErrorCode::NotFound, "unknown version " + std::to_string(id));
    return it->second;
}

void VersionTree::set_checkpoint(VersionId id, CheckpointState s) {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw Error(ErrorCode::NotFound, "unknown version " + std::to_string(id));
    it->second.checkpoint = s;
}

void VersionTree::set_branch(BranchEntry entry) {
    if (entry.node && !nodes_.count(*entry.node)) {
        throw Error(ErrorCode::NotFound, "branch points at unknown version " + std::to_string(*entry.node));
    }
    branches_[entry.id] = entry;
}

const BranchEntry& VersionTree::branch(BranchId id) const {
    auto it = branches_.find(id);
    if (it == branches_.end()) throw Error(ErrorCode::NotFound, "unknown branch " + std::to_string(id));
    return it->second;
}

std::vector<VersionId> VersionTree::lineage(VersionId id) const {
    std::vector<VersionId> out;
    std::optional<VersionId> cur = id;
    while (cur) {
        out.push_back(*cur);
        cur = node(*cur).parent;
    }
    return out;
}

bool VersionTree::is_ancestor(VersionId ancestor, VersionId id) const {
    const auto l = lineage(id);
    return std::find(l.begin(), l.end(), ancestor) != l.end();
}

std::optional<VersionId> VersionTree::common_ancestor(const std::vector<VersionId>& ids) const {
    if (ids.empty()) return std::nullopt;
    std::set<VersionId> common;
    {
        const auto l = lineage(ids.front());
        common.insert(l.begin(), l.end());
    }
    for (std::size_t i = 1; i < ids.size(); ++i) {
        const auto l = lineage(ids[i]);
        std::set<VersionId> next;
        for (auto v : l) {
            if (common.count(v)) next.insert(v);
        }
        common = std::move(next);
    }
    // Walking the first lineage from the leaf finds the deepest shared node.
    for (auto v : lineage(ids.front())) {
        if (common.count(v)) return v;
    }
    return std::nullopt;
}

nlohmann::json VersionTree::to_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& [id, n] : nodes_) {
        nodes.push_back({{"id", n.id},
                         {"source_branch", n.source_branch},
                         {"image", n.image},
                         {"checkpoint", std::string(to_string(n.checkpoint))},
                         {"fs_version", n.fs_version},
                         {"created_at", n.created_at}});
        if (n.parent) edges.push_back({{"parent", *n.parent}, {"child", n.id}});
    }
    nlohmann::json branches = nlohmann::json::array();
    for (const auto& [id, b] : branches_) {
        branches.push_back({{"id", b.id},
                            {"node", b.node ? nlohmann::json(*b.node) : nlohmann::json(nullptr)},
                            {"status", std::string(to_string(b.status))},
                            {"user", b.user}});
    }
    return {{"nodes", nodes}, {"edges", edges}, {"branches", branches}};
}

VersionTree VersionTree::from_json(const nlohmann::json& j) {
    std::map<VersionId, VersionId> parent_of;
    for (const auto& e : j.at("edges")) {
        const auto child = e.at("child").get<VersionId>();
        if (parent_of.count(child)) throw Error(ErrorCode::InvalidArgument, "version with two parents");
        parent_of[child] = e.at("parent").get<VersionId>();
    }
    std::vector<VersionNode> pending;
    for (const auto& n : j.at("nodes")) {
        VersionNode v;
        v.id = n.at("id").get<VersionId>();
        v.source_branch = n.at("source_branch").get<BranchId>();
        v.image = n.at("image").get<ImageId>();
        v.checkpoint = checkpoint_from(n.at("checkpoint").get<std::string>());
        v.fs_version = n.at("fs_version").get<std::uint64_t>();
        v.created_at = n.at("created_at").get<std::uint64_t>();
        if (auto it = parent_of.find(v.id); it != parent_of.end()) v.parent = it->second;
        pending.push_back(v);
    }
    VersionTree t;
    // Insert parents first; anything left over is a cycle or a dangling edge.
    while (!pending.empty()) {
        const auto before = pending.size();
        std::vector<VersionNode> rest;
        for (auto& v : pending) {
            if (!v.parent || t.contains(*v.parent)) {
                t.add_node(v);
            } else {
                rest.push_back(v);
            }
        }
        pending = std::move(rest);
        if (pending.size() == before) throw Error(ErrorCode::InvalidArgument, "version graph is cyclic or dangling");
    }
    for (const auto& b : j.at("branches")) {
        BranchEntry e;
        e.id = b.at("id").get<BranchId>();
        if (!b.at("node").is_null()) e.node = b.at("node").get<VersionId>();
        e.status = status_from(b.at("status").get<std::string>());
        e.user = b.at("user").get<bool>();
        t.set_branch(e);
    }
    return t;
}

std::string VersionTree::dump() const { return to_json().dump(2); }

} // namespace forkspace
