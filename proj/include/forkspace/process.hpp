#pragma once

#include "forkspace/workspace.hpp"

#include <atomic>
#include <map>
#include <mutex>
#include <set>
#include <unordered_map>

namespace forkspace {

/// Stable reference to a frozen process, opened before any namespace switch.
/// It never encodes a namespace-local pid.
struct ProcHandle {
    std::uint64_t token = 0;

    friend bool operator==(const ProcHandle&, const ProcHandle&) = default;
};

struct FrozenMeta {
    BranchId branch = 0;
    std::vector<ProcessRecord> tree;
    std::vector<NamespaceId> namespaces;
    std::uint64_t frozen_at = 0;
    std::vector<ProcHandle> proc_handles;
    /// Operations performed inside the freeze interval.
    std::uint64_t freeze_ops = 0;
};

struct ProcessPlanEntry {
    LocalPid local_pid = 0;
    std::optional<LocalPid> parent_local_pid;
    std::vector<Descriptor> descriptors;
    std::vector<std::uint32_t> threads;
    Blob register_state;
    Blob tls_state;
    Blob signal_state;
    Blob futex_state;

    friend bool operator==(const ProcessPlanEntry&, const ProcessPlanEntry&) = default;
};

/// Creation plan for a process tree: parents always precede children.
struct ProcessTreeImage {
    static constexpr std::uint32_t kFormatVersion = 1;

    std::vector<ProcessPlanEntry> plan;

    Blob serialize() const;
    static ProcessTreeImage deserialize(const Blob& bytes);

    friend bool operator==(const ProcessTreeImage&, const ProcessTreeImage&) = default;
};

/// Depth-first, siblings in ascending local pid.
ProcessTreeImage capture_metadata(const FrozenMeta& frozen);
ProcessTreeImage capture_metadata(const std::vector<ProcessRecord>& tree);

/// Namespaces and the engine-wide host pid space.
class NamespaceRegistry {
  public:
    NamespaceId create();
    void release(NamespaceId ns);
    bool alive(NamespaceId ns) const;

    /// Throws Conflict when `pid` is already taken inside `ns`.
    void claim_local_pid(NamespaceId ns, LocalPid pid);
    void claim_port(NamespaceId ns, std::uint16_t port);
    bool port_in_use(NamespaceId ns, std::uint16_t port) const;

    HostPid allocate_host_pid() noexcept { return next_host_pid_.fetch_add(1); }

    std::size_t live_namespaces() const;

  private:
    struct Space {
        std::set<LocalPid> pids;
        std::set<std::uint16_t> ports;
    };
    mutable std::mutex mu_;
    std::unordered_map<NamespaceId, Space> spaces_;
    NamespaceId next_ns_ = 1;
    std::atomic<HostPid> next_host_pid_{10000};
};

/// Replays `image` into the fresh namespace `dest`: local pids are preserved,
/// host pids are newly allocated.
std::vector<ProcessRecord> reconstruct_tree(const ProcessTreeImage& image, NamespaceId dest,
                                            NamespaceRegistry& registry);

/// Maps proc handles to (branch, host pid) independent of any namespace.
class ProcHandleTable {
  public:
    ProcHandle open(BranchId branch, HostPid host_pid);
    std::optional<std::pair<BranchId, HostPid>> resolve(ProcHandle handle) const;
    void close(ProcHandle handle);

  private:
    mutable std::mutex mu_;
    std::unordered_map<std::uint64_t, std::pair<BranchId, HostPid>> handles_;
    std::uint64_t next_ = 1;
};

} // namespace forkspace
