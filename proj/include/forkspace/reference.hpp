#pragma once

#include "forkspace/version_tree.hpp"
#include "forkspace/workspace.hpp"

#include <optional>
#include <span>

namespace forkspace {

/// Eager deep-copy model of the lifecycle. Every branch and version is a full
/// WorkspaceState value; nothing is shared. Used as the correctness oracle for
/// the engine's fast paths. Branches and versions are numbered densely from 0
/// in creation order.
class ReferenceModel {
  public:
    struct Branch {
        WorkspaceState ws;
        BranchStatus status = BranchStatus::Running;
        std::optional<std::size_t> node;
    };
    struct Version {
        WorkspaceState ws;
        std::optional<std::size_t> parent;
    };

    /// Branch 0 is the user workspace.
    explicit ReferenceModel(WorkspaceState root);

    std::size_t record(std::size_t b);
    std::vector<std::size_t> fork(std::size_t v, std::size_t n);
    void rollback(std::size_t b, std::size_t v);
    void discard(std::size_t b);
    void promote(std::size_t b);
    void write_page(std::size_t b, LocalPid pid, VmaId vma, std::uint32_t slot, std::size_t offset,
                    std::span<const std::uint8_t> data);
    void fs_write(std::size_t b, const std::string& path, std::uint32_t page, std::size_t offset,
                  std::span<const std::uint8_t> data);

    bool is_running(std::size_t b) const;
    /// True iff `v` is `b`'s current node or one of its ancestors.
    bool in_lineage(std::size_t b, std::size_t v) const;

    const std::vector<Branch>& branches() const noexcept { return branches_; }
    const std::vector<Version>& versions() const noexcept { return versions_; }
    const WorkspaceState& state(std::size_t b) const { return at(b).ws; }

  private:
    Branch& at(std::size_t b);
    const Branch& at(std::size_t b) const;
    Branch& running(std::size_t b);

    std::vector<Branch> branches_;
    std::vector<Version> versions_;
};

/// Drops external connections and closes the descriptors that referenced them.
void sever_externals(WorkspaceState& ws);

} // namespace forkspace
