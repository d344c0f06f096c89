#pragma once

#include "forkspace/memory.hpp"

#include <map>
#include <optional>

#include <nlohmann/json_fwd.hpp>

namespace forkspace {

enum class BranchStatus { Running, Frozen, Discarded, Promoted };

std::string_view to_string(BranchStatus s);

struct VersionNode {
    VersionId id = 0;
    std::optional<VersionId> parent;
    BranchId source_branch = 0;
    ImageId image = 0;
    CheckpointState checkpoint = CheckpointState::Pending;
    std::uint64_t fs_version = 0;
    std::uint64_t created_at = 0;

    friend bool operator==(const VersionNode&, const VersionNode&) = default;
};

struct BranchEntry {
    BranchId id = 0;
    /// Creation point or last rollback target; none for a root workspace.
    std::optional<VersionId> node;
    BranchStatus status = BranchStatus::Running;
    bool user = false;

    friend bool operator==(const BranchEntry&, const BranchEntry&) = default;
};

/// Branch-point DAG (a forest: every non-root node has one parent).
class VersionTree {
  public:
    /// Parents must already exist, which keeps the graph acyclic.
    void add_node(VersionNode node);
    bool contains(VersionId id) const { return nodes_.count(id) != 0; }
    const VersionNode& node(VersionId id) const;
    void set_checkpoint(VersionId id, CheckpointState s);

    void set_branch(BranchEntry entry);
    const BranchEntry& branch(BranchId id) const;
    bool has_branch(BranchId id) const { return branches_.count(id) != 0; }

    /// `id` first, then its parent chain.
    std::vector<VersionId> lineage(VersionId id) const;
    bool is_ancestor(VersionId ancestor, VersionId id) const;
    /// Deepest node shared by every lineage; none if they live in different trees.
    std::optional<VersionId> common_ancestor(const std::vector<VersionId>& ids) const;

    const std::map<VersionId, VersionNode>& nodes() const noexcept { return nodes_; }
    const std::map<BranchId, BranchEntry>& branches() const noexcept { return branches_; }

    nlohmann::json to_json() const;
    static VersionTree from_json(const nlohmann::json& j);
    std::string dump() const;

    friend bool operator==(const VersionTree&, const VersionTree&) = default;

  private:
    std::map<VersionId, VersionNode> nodes_;
    std::map<BranchId, BranchEntry> branches_;
};

} // namespace forkspace
