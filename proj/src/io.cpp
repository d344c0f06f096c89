#include "forkspace/io.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace forkspace {

ConnectionPartition classify_connections(const WorkspaceState& state) {
    return classify_connections(state.connections, state.processes);
}

ConnectionPartition classify_connections(const std::vector<Connection>& connections,
                                         const std::vector<ProcessRecord>& processes) {
    std::set<LocalPid> members;
    for (const auto& p : processes) members.insert(p.local_pid);
    auto inside = [&](const Endpoint& e) { return e.pid && members.count(*e.pid) != 0; };
    ConnectionPartition out;
    for (const auto& c : connections) {
        ConnectionImage img{c.id, c.kind, c.local, c.remote, c.proto_state};
        if (inside(c.local) && inside(c.remote)) {
            img.kind = ConnectionKind::Internal;
            out.internal.push_back(std::move(img));
        } else {
            img.kind = ConnectionKind::External;
            out.external.push_back(std::move(img));
        }
    }
    return out;
}

std::string_view to_string(EgressMode m) {
    switch (m) {
    case EgressMode::Restricted: return "restricted";
    case EgressMode::DelayedCommit: return "delayed-commit";
    case EgressMode::RequireApproval: return "require-approval";
    }
    return "?";
}

std::string_view to_string(PolicyEventKind k) {
    switch (k) {
    case PolicyEventKind::Severed: return "severed";
    case PolicyEventKind::EgressDenied: return "egress-denied";
    case PolicyEventKind::EgressQueued: return "egress-queued";
    case PolicyEventKind::EgressAwaitingApproval: return "egress-awaiting-approval";
    case PolicyEventKind::Released: return "released";
    }
    return "?";
}

namespace {

PolicyEventKind event_kind_from(const std::string& s) {
    for (auto k : {PolicyEventKind::Severed, PolicyEventKind::EgressDenied, PolicyEventKind::EgressQueued,
                   PolicyEventKind::EgressAwaitingApproval, PolicyEventKind::Released}) {
        if (to_string(k) == s) return k;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown policy event kind " + s);
}

} // namespace

std::string PolicyEvent::to_json_line() const {
    nlohmann::json j{{"type", "policy"},
                     {"branch", branch},
                     {"kind", std::string(to_string(kind))},
                     {"detail", detail},
                     {"seq", sequence}};
    j["connection"] = connection ? nlohmann::json(*connection) : nlohmann::json(nullptr);
    return j.dump();
}

PolicyEvent PolicyEvent::from_json_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    PolicyEvent e;
    e.branch = j.at("branch").get<BranchId>();
    e.kind = event_kind_from(j.at("kind").get<std::string>());
    e.detail = j.at("detail").get<std::string>();
    e.sequence = j.at("seq").get<std::uint64_t>();
    if (!j.at("connection").is_null()) e.connection = j.at("connection").get<ConnectionId>();
    return e;
}

void AuditLog::append(const std::string& json_line) {
    std::lock_guard lock(mu_);
    lines_.push_back(json_line);
    if (file_) {
        std::ofstream out(*file_, std::ios::app);
        out << json_line << '\n';
    }
}

std::vector<std::string> AuditLog::lines() const {
    std::lock_guard lock(mu_);
    return lines_;
}

std::size_t AuditLog::size() const {
    std::lock_guard lock(mu_);
    return lines_.size();
}

void restore_internal(const std::vector<ConnectionImage>& images, NamespaceId dest,
                      const std::vector<ProcessRecord>& dest_processes, NamespaceRegistry& registry,
                      NetworkState& out) {
    std::set<LocalPid> members;
    for (const auto& p : dest_processes) members.insert(p.local_pid);
    for (const auto& img : images) {
        if (img.kind != ConnectionKind::Internal) {
            throw Error(ErrorCode::InvalidArgument, "only internal connections are restorable");
        }
        for (const Endpoint* e : {&img.local, &img.remote}) {
            if (!e->pid || !members.count(*e->pid)) {
                throw Error(ErrorCode::NotFound,
                            "endpoint process missing in destination for connection " + std::to_string(img.id));
            }
        }
        registry.claim_port(dest, img.local.port);
        if (img.remote.port != img.local.port) registry.claim_port(dest, img.remote.port);
        out.connections.push_back({img.id, ConnectionKind::Internal, img.local, img.remote, img.proto_state});
    }
}

std::vector<PolicyEvent> sever_external(const std::vector<ConnectionImage>& images, BranchId dest_branch,
                                        std::vector<ProcessRecord>& dest_processes, EgressMode mode) {
    std::set<ConnectionId> severed;
    std::vector<PolicyEvent> events;
    for (const auto& img : images) {
        severed.insert(img.id);
        PolicyEvent e;
        e.branch = dest_branch;
        e.kind = PolicyEventKind::Severed;
        e.connection = img.id;
        e.detail = img.remote.host + ":" + std::to_string(img.remote.port) + " mode=" + std::string(to_string(mode));
        events.push_back(std::move(e));
    }
    for (auto& p : dest_processes) {
        for (auto& d : p.descriptors) {
            if (d.connection && severed.count(*d.connection)) d.closed = true;
        }
    }
    return events;
}

std::vector<GuiBuffer> rebuild_gui(const std::vector<GuiBuffer>& source_buffers) {
    std::vector<GuiBuffer> out;
    out.reserve(source_buffers.size());
    for (const auto& b : source_buffers) {
        GuiBuffer copy;
        copy.id = b.id;
        copy.size = b.size;
        copy.mutation_rate_hint = b.mutation_rate_hint;
        copy.contents.reserve(b.contents.size());
        for (const auto& page : b.contents) {
            // Materialize so the destination owns independent bytes.
            const auto bytes = page.bytes();
            copy.contents.push_back(PageContent::from_bytes(bytes));
        }
        out.push_back(std::move(copy));
    }
    return out;
}

void transmit(Connection& connection, std::span<const std::uint8_t> bytes) {
    if (connection.kind != ConnectionKind::Internal) {
        throw Error(ErrorCode::InvalidState, "transmit is only modeled for internal connections");
    }
    auto st = TcpRepairState::decode(connection.proto_state);
    st.local_seq += static_cast<std::uint32_t>(bytes.size());
    st.remote_queue.insert(st.remote_queue.end(), bytes.begin(), bytes.end());
    connection.proto_state = st.encode();
}

} // namespace forkspace
