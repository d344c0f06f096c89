#pragma once

#include "forkspace/process.hpp"
#include "forkspace/workspace.hpp"

#include <filesystem>
#include <mutex>

namespace forkspace {

struct ConnectionImage {
    ConnectionId id = 0;
    ConnectionKind kind = ConnectionKind::Internal;
    Endpoint local;
    Endpoint remote;
    Blob proto_state;

    friend bool operator==(const ConnectionImage&, const ConnectionImage&) = default;
};

struct ConnectionPartition {
    std::vector<ConnectionImage> internal;
    std::vector<ConnectionImage> external;
};

/// Internal iff both endpoints resolve to processes of `state`.
ConnectionPartition classify_connections(const WorkspaceState& state);
ConnectionPartition classify_connections(const std::vector<Connection>& connections,
                                         const std::vector<ProcessRecord>& processes);

/// Speculative egress handling for a branch.
enum class EgressMode { Restricted, DelayedCommit, RequireApproval };

std::string_view to_string(EgressMode m);

enum class PolicyEventKind { Severed, EgressDenied, EgressQueued, EgressAwaitingApproval, Released };

std::string_view to_string(PolicyEventKind k);

struct PolicyEvent {
    BranchId branch = 0;
    PolicyEventKind kind = PolicyEventKind::Severed;
    std::optional<ConnectionId> connection;
    std::string detail;
    std::uint64_t sequence = 0;

    std::string to_json_line() const;
    static PolicyEvent from_json_line(const std::string& line);

    friend bool operator==(const PolicyEvent&, const PolicyEvent&) = default;
};

/// Append-only JSON-lines audit log; thread-safe appends.
class AuditLog {
  public:
    AuditLog() = default;
    explicit AuditLog(std::filesystem::path file) : file_(std::move(file)) {}

    void append(const std::string& json_line);
    std::vector<std::string> lines() const;
    std::size_t size() const;

  private:
    mutable std::mutex mu_;
    std::vector<std::string> lines_;
    std::optional<std::filesystem::path> file_;
};

struct OutboxEntry {
    std::uint64_t action_id = 0;
    BranchId origin = 0;
    std::string description;
    bool released = false;
};

/// Restored branch network state.
struct NetworkState {
    std::vector<Connection> connections;
};

/// Re-creates internal connections inside `dest`, binding each endpoint port
/// in the destination's own network namespace.
void restore_internal(const std::vector<ConnectionImage>& images, NamespaceId dest,
                      const std::vector<ProcessRecord>& dest_processes, NamespaceRegistry& registry,
                      NetworkState& out);

/// Drops external connections, closes their descriptors (keeping descriptor
/// indices stable) and reports one Severed event each.
std::vector<PolicyEvent> sever_external(const std::vector<ConnectionImage>& images, BranchId dest_branch,
                                        std::vector<ProcessRecord>& dest_processes, EgressMode mode);

/// Byte copies owned solely by the destination.
std::vector<GuiBuffer> rebuild_gui(const std::vector<GuiBuffer>& source_buffers);

/// Advances an internal connection by `bytes` from the local endpoint.
void transmit(Connection& connection, std::span<const std::uint8_t> bytes);

} // namespace forkspace
