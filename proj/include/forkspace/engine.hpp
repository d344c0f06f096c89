#pragma once

#include "forkspace/filesystem.hpp"
#include "forkspace/io.hpp"
#include "forkspace/memory.hpp"
#include "forkspace/process.hpp"
#include "forkspace/security.hpp"
#include "forkspace/version_tree.hpp"

#include <functional>
#include <memory>
#include <mutex>

namespace forkspace {

struct EngineConfig {
    std::size_t branch_cap = 256;
    /// Mirror checkpoint images to this directory when set.
    std::optional<std::filesystem::path> image_dir;
    EgressMode egress = EgressMode::DelayedCommit;
    std::vector<std::string> sensitive_patterns = {"/home/user/.ssh/", "/home/user/.config/credentials/",
                                                   "/etc/shadow"};
    /// Fixed per-branch metadata charged by footprint().
    std::uint64_t branch_bookkeeping_bytes = 16 * 1024;
};

struct ProcessState {
    ProcessRecord record;
    std::vector<VmaMapping> vmas;
};

enum class MemoryMode { CopyOnWrite, Eager };
enum class DumpMode { Async, Sync };

struct ForkOptions {
    MemoryMode memory = MemoryMode::CopyOnWrite;
    /// Share the sealed page-cache chain; otherwise each branch gets a deep
    /// filesystem copy and a cold cache.
    bool share_fs_cache = true;
    ExecPolicy policy = ExecPolicy::Parallel;
    std::optional<EgressMode> egress;
};

struct BranchForkStats {
    BranchId branch = 0;
    std::uint64_t processes = 0;
    std::uint64_t pte_installs = 0;
    /// Shareable pages copied (eager memory only).
    std::uint64_t pages_copied = 0;
    /// Shared segments and GUI buffers rebuilt per branch.
    std::uint64_t branch_local_bytes = 0;
    std::uint64_t severed = 0;
    std::uint64_t wall_ns = 0;
};

struct ForkReport {
    std::vector<BranchForkStats> branches;
    /// Page-store bytes_copied delta across the whole fork.
    std::uint64_t bytes_copied = 0;
    std::uint64_t wall_ns = 0;
};

struct RecordResult {
    VersionId version = 0;
    ImageId image = 0;
    CheckpointHandlePtr handle;
    std::uint64_t processes = 0;
    /// Metadata operations inside the freeze interval.
    std::uint64_t freeze_ops = 0;
    /// Snapshot holders plus their VMA references.
    std::uint64_t holder_ops = 0;
    /// Page-store activity between freeze and resume; all stay zero.
    std::uint64_t freeze_bytes_copied = 0;
    std::uint64_t freeze_allocations = 0;
    std::uint64_t freeze_pte_installs = 0;
    std::uint64_t dirty_pages = 0;
    bool chained = false;
    std::uint64_t wall_ns = 0;
};

enum class MergeChoice { TakeBranch, KeepUser, Abort };

struct MergeQuestion {
    std::string path;
    bool conflict = false;
    bool sensitive = false;
    /// Branches whose version of the path differs from the ancestor.
    std::vector<BranchId> candidates;
};

struct MergeAnswer {
    MergeChoice choice = MergeChoice::KeepUser;
    BranchId branch = 0;
};

struct MergePolicy {
    /// Sensitive patterns; empty means the engine defaults.
    std::vector<std::string> sensitive;
    /// Programmatic approval point. Without one, gated paths stay unmerged.
    std::function<MergeAnswer(const MergeQuestion&)> approve;
    /// Volatile process state (memory, tree, connections, GUI) comes from here.
    std::optional<BranchId> volatile_from;
};

struct MergeReport {
    VersionId ancestor = 0;
    std::vector<std::string> merged;
    std::vector<std::string> conflicted;
    std::vector<std::string> approval_gated;
    std::vector<std::string> unresolved;
    std::uint64_t pages_applied = 0;
};

struct RefcountAudit {
    bool ok = true;
    std::uint64_t pages_checked = 0;
    std::uint64_t mismatches = 0;
    std::uint64_t leaked = 0;
    std::uint64_t expected_refs = 0;
    std::uint64_t actual_refs = 0;
};

struct Footprint {
    std::uint64_t page_bytes = 0;
    std::uint64_t cache_bytes = 0;
    std::uint64_t gui_bytes = 0;
    std::uint64_t bookkeeping_bytes = 0;
    std::uint64_t total() const { return page_bytes + cache_bytes + gui_bytes + bookkeeping_bytes; }
};

struct PromotionRecord {
    BranchId promoted = 0;
    BranchId user = 0;
    /// Processes whose address space was replaced in place.
    std::vector<LocalPid> replaced;
    std::vector<LocalPid> created;
    std::vector<LocalPid> removed;
};

/// Versioned-workspace engine: branches, the version tree and the shared
/// page, extent and checkpoint stores.
class Engine {
  public:
    explicit Engine(EngineConfig config = {});
    ~Engine();
    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    BranchId create_branch(const WorkspaceState& state, SecurityProfile profile = {}, bool user = true);
    WorkspaceState snapshot(BranchId b) const;
    BranchStatus status(BranchId b) const;
    std::vector<BranchId> live_branches() const;
    std::optional<BranchId> user_branch() const;

    FrozenMeta freeze(BranchId b);
    void resume(BranchId b);

    RecordResult record_version(BranchId b, DumpMode mode = DumpMode::Async);
    std::vector<BranchId> fork(VersionId v, std::size_t n, const SecurityProfile& profile,
                               const ForkOptions& options = {}, ForkReport* report = nullptr);
    void rollback(BranchId b, VersionId v);
    void discard(BranchId b);
    PromotionRecord commit_promote(BranchId b);
    MergeReport commit_merge(const std::vector<BranchId>& branches, const MergePolicy& policy);

    WriteOutcome write_page(BranchId b, LocalPid pid, VmaId vma, std::uint32_t slot, std::size_t offset,
                            std::span<const std::uint8_t> data);
    std::optional<PageContent> read_page(BranchId b, LocalPid pid, VmaId vma, std::uint32_t slot) const;
    PageContent fs_read(BranchId b, const std::string& path, std::uint32_t page);
    void fs_write(BranchId b, const std::string& path, std::uint32_t page, std::size_t offset,
                  std::span<const std::uint8_t> data);
    void gui_paint(BranchId b, GuiBufferId id, std::uint32_t page, std::span<const std::uint8_t> data);
    void transmit(BranchId b, ConnectionId c, std::span<const std::uint8_t> data);

    /// Checks the branch profile; denied events under Enforce are blocked and logged.
    Decision access(BranchId b, const AccessEvent& event);
    /// File write gated by the profile; returns false (state untouched) when denied.
    bool guarded_fs_write(BranchId b, const std::string& path, std::uint32_t page, std::size_t offset,
                          std::span<const std::uint8_t> data);
    /// External side effect from a branch, handled per its egress mode. Returns the
    /// outbox action id when the action was queued.
    std::optional<std::uint64_t> attempt_external(BranchId b, const std::string& description);
    /// Releases a held action of a promoted branch.
    void release_external(std::uint64_t action_id);
    std::vector<OutboxEntry> outbox(BranchId b) const;
    std::vector<OutboxEntry> held_actions() const;
    std::vector<OutboxEntry> released_actions() const;
    std::vector<PolicyEvent> policy_events(BranchId b) const;
    std::vector<std::string> audit_lines(BranchId b) const;

    /// Rebuilds the branch address spaces from a durable image chain.
    void restore_memory(ImageId image, BranchId b);

    RefcountAudit audit_refcounts();
    RefcountAudit audit_extents();
    Footprint footprint() const;

    VersionTree tree() const;
    WorkspaceState version_state(VersionId v) const;
    CheckpointHandlePtr checkpoint(VersionId v) const;
    ImageId image_of(VersionId v) const;
    std::vector<PromotionRecord> promotions() const;
    std::vector<LayerPtr> layer_heads() const;
    const FsView& fs_view(BranchId b) const;
    std::uint64_t branch_local_bytes(BranchId b) const;
    std::vector<ConnectionId> connections(BranchId b) const;

    PageStore& pages() noexcept { return *pages_; }
    ExtentStore& extents() noexcept { return *extents_; }
    CheckpointStore& checkpoints() noexcept { return *checkpoints_; }
    DumpDaemon& daemon() noexcept { return *daemon_; }
    NamespaceRegistry& namespaces() noexcept { return namespaces_; }
    const EngineConfig& config() const noexcept { return config_; }

  private:
    struct Branch;
    struct VersionPin;

    Branch& live(BranchId b) const;
    Branch* find(BranchId b) const;
    std::unique_ptr<Branch> build_from_pin(BranchId id, VersionId v, const VersionPin& pin,
                                           const SecurityProfile& profile, const ForkOptions& options,
                                           BranchForkStats& stats);
    FrozenMeta freeze_locked(Branch& br);
    void resume_locked(Branch& br);
    void restore_locked(Branch& br, ImageId image);
    void restore_network(Branch& br, const std::vector<Connection>& source);
    void release_branch(Branch& br);
    void set_status(Branch& br, BranchStatus s);
    void log_event(Branch& br, PolicyEvent e);

    EngineConfig config_;
    std::unique_ptr<PageStore> pages_;
    std::shared_ptr<ExtentStore> extents_;
    std::unique_ptr<CheckpointStore> checkpoints_;
    std::unique_ptr<DumpDaemon> daemon_;
    NamespaceRegistry namespaces_;
    ProcHandleTable handles_;

    mutable std::mutex mu_;
    std::map<BranchId, std::unique_ptr<Branch>> branches_;
    std::map<VersionId, std::shared_ptr<const VersionPin>> pins_;
    std::map<VersionId, CheckpointHandlePtr> handles_by_version_;
    VersionTree tree_;
    std::optional<BranchId> user_;
    std::vector<PromotionRecord> promotions_;
    std::vector<OutboxEntry> held_;
    std::vector<OutboxEntry> released_;
    BranchId next_branch_ = 1;
    VersionId next_version_ = 1;
    std::atomic<std::uint64_t> next_view_{1};
    std::atomic<std::uint64_t> next_layer_{1};
    std::atomic<std::uint64_t> next_action_{1};
    std::atomic<std::uint64_t> clock_{1};
};

} // namespace forkspace
