#pragma once

#include "forkspace/page.hpp"
#include "forkspace/types.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace forkspace {

enum class MemoryClass { Anonymous, FileBacked, Shared };
enum class DescriptorKind { File, Socket, Pipe, Device };
enum class ConnectionKind { Internal, External };

std::string_view to_string(MemoryClass c);
std::string_view to_string(ConnectionKind k);

struct Descriptor {
    int fd = 0;
    DescriptorKind kind = DescriptorKind::File;
    std::string target;
    std::optional<ConnectionId> connection;
    bool closed = false;

    friend bool operator==(const Descriptor&, const Descriptor&) = default;
};

struct ProcessRecord {
    HostPid host_pid = 0;
    LocalPid local_pid = 0;
    std::optional<LocalPid> parent_local_pid;
    std::vector<Descriptor> descriptors;
    std::vector<std::uint32_t> threads;
    Blob register_state;
    Blob tls_state;
    Blob signal_state;
    Blob futex_state;
};

/// Everything except host_pid; host pids are identity, not state.
bool same_observable_process(const ProcessRecord& a, const ProcessRecord& b);

struct MemoryRegion {
    VmaId vma_id = 0;
    LocalPid owner = 0;
    MemoryClass cls = MemoryClass::Anonymous;
    std::uint64_t start = 0;
    std::uint32_t length = 0;
    std::optional<std::string> backing_file;
    std::uint32_t file_page_offset = 0;
    /// One entry per slot; nullopt for never-touched pages.
    std::vector<std::optional<PageContent>> pages;
};

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;
    std::optional<LocalPid> pid;

    friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

struct Connection {
    ConnectionId id = 0;
    ConnectionKind kind = ConnectionKind::Internal;
    Endpoint local;
    Endpoint remote;
    Blob proto_state;

    friend bool operator==(const Connection&, const Connection&) = default;
};

/// Sequence numbers and queued bytes captured for a connection.
struct TcpRepairState {
    std::uint32_t local_seq = 0;
    std::uint32_t remote_seq = 0;
    Blob local_queue;
    Blob remote_queue;

    Blob encode() const;
    static TcpRepairState decode(const Blob& blob);

    friend bool operator==(const TcpRepairState&, const TcpRepairState&) = default;
};

struct GuiBuffer {
    GuiBufferId id = 0;
    std::uint64_t size = 0;
    std::vector<PageContent> contents;
    double mutation_rate_hint = 0.0;
};

using FileContents = std::map<std::string, std::vector<PageContent>>;

/// Value snapshot of a workspace. Live branches export to this form so every
/// subsystem can be checked against the same comparator.
struct WorkspaceState {
    std::vector<ProcessRecord> processes;
    std::vector<MemoryRegion> regions;
    std::uint64_t fs_view = 0;
    FileContents files;
    std::vector<Connection> connections;
    std::vector<GuiBuffer> gui_buffers;
    NamespaceId namespace_id = 0;

    std::uint64_t page_count() const;
};

struct FileSpec {
    std::string path;
    std::uint64_t bytes = 0;
};

struct WorkspaceSpec {
    std::uint32_t processes = 1;
    std::uint64_t tree_seed = 1;
    std::uint64_t anon_bytes = 0;
    std::uint64_t file_backed_bytes = 0;
    std::uint64_t shared_bytes = 0;
    std::uint32_t vmas_per_process = 2;
    std::uint32_t descriptors_per_process = 2;
    std::vector<FileSpec> file_manifest;
    std::uint32_t internal_connections = 0;
    std::uint32_t external_connections = 0;
    std::uint32_t gui_buffers = 0;
    std::uint64_t gui_buffer_bytes = kPageSize;
    /// Fraction of anonymous slots left never-touched.
    double sparse_fraction = 0.0;

    /// 168 processes, about 2 GiB of anonymous memory.
    static WorkspaceSpec chromium_scale(std::uint64_t seed = 7);
};

void to_json(nlohmann::json& j, const WorkspaceSpec& spec);
void from_json(const nlohmann::json& j, WorkspaceSpec& spec);

/// Deterministic synthetic workload generator.
WorkspaceState build_workspace(const WorkspaceSpec& spec);

/// Re-checks every type invariant; returns one message per violation.
std::vector<std::string> validate(const WorkspaceState& state);

enum class DiffKind { Process, Descriptor, Region, Page, File, FilePage, Connection, Gui };

std::string_view to_string(DiffKind k);

struct DiffEntry {
    DiffKind kind;
    std::string location;

    friend bool operator==(const DiffEntry&, const DiffEntry&) = default;
    friend auto operator<=>(const DiffEntry&, const DiffEntry&) = default;
};

struct DiffReport {
    std::vector<DiffEntry> entries;

    bool empty() const noexcept { return entries.empty(); }
    std::size_t count(DiffKind kind) const;
};

/// Lists every divergent location. Host pids and namespace ids never count.
DiffReport diff(const WorkspaceState& a, const WorkspaceState& b,
                ExecPolicy policy = ExecPolicy::Parallel);

} // namespace forkspace
