#include "forkspace/reference.hpp"

#include <set>

namespace forkspace {

void sever_externals(WorkspaceState& ws) {
    std::set<LocalPid> members;
    for (const auto& p : ws.processes) members.insert(p.local_pid);
    auto inside = [&](const Endpoint& e) { return e.pid && members.count(*e.pid) != 0; };
    std::set<ConnectionId> cut;
    std::vector<Connection> kept;
    for (auto& c : ws.connections) {
        if (inside(c.local) && inside(c.remote)) {
            c.kind = ConnectionKind::Internal;
            kept.push_back(std::move(c));
        } else {
            cut.insert(c.id);
        }
    }
    ws.connections = std::move(kept);
    for (auto& p : ws.processes) {
        for (auto& d : p.descriptors) {
            if (d.connection && cut.count(*d.connection)) d.closed = true;
        }
    }
}

ReferenceModel::ReferenceModel(WorkspaceState root) { branches_.push_back({std::move(root), BranchStatus::Running, {}}); }

ReferenceModel::Branch& ReferenceModel::at(std::size_t b) {
    if (b >= branches_.size()) throw Error(ErrorCode::NotFound, "reference: unknown branch");
    return branches_[b];
}

const ReferenceModel::Branch& ReferenceModel::at(std::size_t b) const {
    if (b >= branches_.size()) throw Error(ErrorCode::NotFound, "reference: unknown branch");
    return branches_[b];
}

ReferenceModel::Branch& ReferenceModel::running(std::size_t b) {
    auto& br = at(b);
    if (br.status != BranchStatus::Running) throw Error(ErrorCode::InvalidState, "reference: branch not running");
    return br;
}

bool ReferenceModel::is_running(std::size_t b) const {
    return b < branches_.size() && branches_[b].status == BranchStatus::Running;
}

bool ReferenceModel::in_lineage(std::size_t b, std::size_t v) const {
    for (auto n = at(b).node; n; n = versions_[*n].parent) {
        if (*n == v) return true;
    }
    return false;
}

std::size_t ReferenceModel::record(std::size_t b) {
    auto& br = running(b);
    versions_.push_back({br.ws, br.node});
    br.node = versions_.size() - 1;
    return *br.node;
}

std::vector<std::size_t> ReferenceModel::fork(std::size_t v, std::size_t n) {
    if (v >= versions_.size()) throw Error(ErrorCode::NotFound, "reference: unknown version");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i) {
        Branch br{versions_[v].ws, BranchStatus::Running, v};
        sever_externals(br.ws);
        branches_.push_back(std::move(br));
        out.push_back(branches_.size() - 1);
    }
    return out;
}

void ReferenceModel::rollback(std::size_t b, std::size_t v) {
    auto& br = running(b);
    if (!in_lineage(b, v)) throw Error(ErrorCode::InvalidArgument, "reference: version outside lineage");
    br.ws = versions_[v].ws;
    sever_externals(br.ws);
    br.node = v;
}

void ReferenceModel::discard(std::size_t b) {
    auto& br = at(b);
    if (br.status == BranchStatus::Discarded || br.status == BranchStatus::Promoted) {
        throw Error(ErrorCode::InvalidState, "reference: branch already retired");
    }
    br.status = BranchStatus::Discarded;
    br.ws = {};
}

void ReferenceModel::promote(std::size_t b) {
    if (b == 0) throw Error(ErrorCode::InvalidArgument, "reference: cannot promote the user workspace");
    auto& br = running(b);
    auto& user = running(0);
    user.ws = std::move(br.ws);
    user.node = br.node;
    br.ws = {};
    br.status = BranchStatus::Promoted;
}

void ReferenceModel::write_page(std::size_t b, LocalPid pid, VmaId vma, std::uint32_t slot, std::size_t offset,
                                std::span<const std::uint8_t> data) {
    auto& ws = running(b).ws;
    for (auto& r : ws.regions) {
        if (r.owner != pid || r.vma_id != vma) continue;
        if (slot >= r.length) throw Error(ErrorCode::OutOfRange, "reference: slot out of range");
        auto& page = r.pages[slot];
        if (!page) {
            PageContent base;
            if (r.cls == MemoryClass::FileBacked && r.backing_file) {
                auto f = ws.files.find(*r.backing_file);
                const auto fpage = r.file_page_offset + slot;
                if (f != ws.files.end() && fpage < f->second.size()) base = f->second[fpage];
            }
            page = base;
        }
        page = page->with_write(offset, data);
        return;
    }
    throw Error(ErrorCode::NotFound, "reference: no such region");
}

void ReferenceModel::fs_write(std::size_t b, const std::string& path, std::uint32_t page, std::size_t offset,
                              std::span<const std::uint8_t> data) {
    auto& ws = running(b).ws;
    auto f = ws.files.find(path);
    if (f == ws.files.end()) throw Error(ErrorCode::NotFound, "reference: no such file");
    if (page >= f->second.size()) throw Error(ErrorCode::OutOfRange, "reference: page beyond end");
    f->second[page] = f->second[page].with_write(offset, data);
}

} // namespace forkspace
