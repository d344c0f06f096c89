#include "forkspace/process.hpp"

#include <algorithm>

namespace forkspace {

namespace {

class Writer {
  public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void bytes(const Blob& b) {
        u32(static_cast<std::uint32_t>(b.size()));
        out_.insert(out_.end(), b.begin(), b.end());
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.insert(out_.end(), s.begin(), s.end());
    }
    Blob take() { return std::move(out_); }

  private:
    Blob out_;
};

class Reader {
  public:
    explicit Reader(const Blob& in) : in_(in) {}
    std::uint8_t u8() {
        need(1);
        return in_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{in_[pos_ + i]} << (8 * i);
        pos_ += 4;
        return v;
    }
    Blob bytes() {
        const auto n = u32();
        need(n);
        Blob b(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
               in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return b;
    }
    std::string str() {
        auto b = bytes();
        return {b.begin(), b.end()};
    }
    bool done() const { return pos_ == in_.size(); }

  private:
    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) throw Error(ErrorCode::InvalidArgument, "truncated process tree image");
    }
    const Blob& in_;
    std::size_t pos_ = 0;
};

constexpr std::uint32_t kTreeMagic = 0x46535054; // "FSPT"

} // namespace

Blob ProcessTreeImage::serialize() const {
    Writer w;
    w.u32(kTreeMagic);
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(plan.size()));
    for (const auto& e : plan) {
        w.u32(e.local_pid);
        w.u8(e.parent_local_pid ? 1 : 0);
        w.u32(e.parent_local_pid.value_or(0));
        w.u32(static_cast<std::uint32_t>(e.threads.size()));
        for (auto t : e.threads) w.u32(t);
        w.u32(static_cast<std::uint32_t>(e.descriptors.size()));
        for (const auto& d : e.descriptors) {
            w.u32(static_cast<std::uint32_t>(d.fd));
            w.u8(static_cast<std::uint8_t>(d.kind));
            w.str(d.target);
            w.u8(d.connection ? 1 : 0);
            w.u32(static_cast<std::uint32_t>(d.connection.value_or(0)));
            w.u32(static_cast<std::uint32_t>(d.connection.value_or(0) >> 32));
            w.u8(d.closed ? 1 : 0);
        }
        w.bytes(e.register_state);
        w.bytes(e.tls_state);
        w.bytes(e.signal_state);
        w.bytes(e.futex_state);
    }
    return w.take();
}

ProcessTreeImage ProcessTreeImage::deserialize(const Blob& bytes) {
    Reader r(bytes);
    if (r.u32() != kTreeMagic) throw Error(ErrorCode::InvalidArgument, "not a process tree image");
    if (r.u32() != kFormatVersion) throw Error(ErrorCode::InvalidArgument, "unsupported tree image version");
    ProcessTreeImage img;
    const auto n = r.u32();
    img.plan.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        ProcessPlanEntry e;
        e.local_pid = r.u32();
        const bool has_parent = r.u8() != 0;
        const auto parent = r.u32();
        if (has_parent) e.parent_local_pid = parent;
        const auto nt = r.u32();
        for (std::uint32_t t = 0; t < nt; ++t) e.threads.push_back(r.u32());
        const auto nd = r.u32();
        for (std::uint32_t d = 0; d < nd; ++d) {
            Descriptor desc;
            desc.fd = static_cast<int>(r.u32());
            desc.kind = static_cast<DescriptorKind>(r.u8());
            desc.target = r.str();
            const bool has_conn = r.u8() != 0;
            const std::uint64_t lo = r.u32();
            const std::uint64_t hi = r.u32();
            if (has_conn) desc.connection = lo | (hi << 32);
            desc.closed = r.u8() != 0;
            e.descriptors.push_back(std::move(desc));
        }
        e.register_state = r.bytes();
        e.tls_state = r.bytes();
        e.signal_state = r.bytes();
        e.futex_state = r.bytes();
        img.plan.push_back(std::move(e));
    }
    if (!r.done()) throw Error(ErrorCode::InvalidArgument, "trailing bytes in tree image");
    return img;
}

ProcessTreeImage capture_metadata(const FrozenMeta& frozen) { return capture_metadata(frozen.tree); }

ProcessTreeImage capture_metadata(const std::vector<ProcessRecord>& tree) {
    std::map<LocalPid, const ProcessRecord*> by_pid;
    std::map<LocalPid, std::vector<LocalPid>> children;
    std::vector<LocalPid> roots;
    for (const auto& p : tree) by_pid[p.local_pid] = &p;
    for (const auto& p : tree) {
        if (p.parent_local_pid) {
            if (!by_pid.count(*p.parent_local_pid)) {
                throw Error(ErrorCode::InvalidArgument, "process tree references a missing parent");
            }
            children[*p.parent_local_pid].push_back(p.local_pid);
        } else {
            roots.push_back(p.local_pid);
        }
    }
    if (!tree.empty() && roots.size() != 1) {
        throw Error(ErrorCode::InvalidArgument, "process tree must have exactly one root");
    }
    for (auto& kv : children) std::sort(kv.second.begin(), kv.second.end());

    ProcessTreeImage img;
    img.plan.reserve(tree.size());
    std::vector<LocalPid> stack(roots.rbegin(), roots.rend());
    while (!stack.empty()) {
        const LocalPid pid = stack.back();
        stack.pop_back();
        const ProcessRecord& p = *by_pid.at(pid);
        img.plan.push_back({p.local_pid, p.parent_local_pid, p.descriptors, p.threads,
                            p.register_state, p.tls_state, p.signal_state, p.futex_state});
        auto it = children.find(pid);
        if (it != children.end()) stack.insert(stack.end(), it->second.rbegin(), it->second.rend());
    }
    if (img.plan.size() != tree.size()) {
        throw Error(ErrorCode::InvalidArgument, "process tree is not connected");
    }
    return img;
}

// --- namespaces --------------------------------------------------------------

NamespaceId NamespaceRegistry::create() {
    std::lock_guard lock(mu_);
    const NamespaceId id = next_ns_++;
    spaces_.emplace(id, Space{});
    return id;
}

void NamespaceRegistry::release(NamespaceId ns) {
    std::lock_guard lock(mu_);
    spaces_.erase(ns);
}

bool NamespaceRegistry::alive(NamespaceId ns) const {
    std::lock_guard lock(mu_);
    return spaces_.count(ns) != 0;
}

void NamespaceRegistry::claim_local_pid(NamespaceId ns, LocalPid pid) {
    std::lock_guard lock(mu_);
    auto it = spaces_.find(ns);
    if (it == spaces_.end()) throw Error(ErrorCode::NotFound, "unknown namespace");
    if (!it->second.pids.insert(pid).second) {
        throw Error(ErrorCode::Internal, "local pid " + std::to_string(pid) + " collides in namespace");
    }
}

void NamespaceRegistry::claim_port(NamespaceId ns, std::uint16_t port) {
    std::lock_guard lock(mu_);
    auto it = spaces_.find(ns);
    if (it == spaces_.end()) throw Error(ErrorCode::NotFound, "unknown namespace");
    if (!it->second.ports.insert(port).second) {
        throw Error(ErrorCode::Conflict, "port " + std::to_string(port) + " already bound in namespace");
    }
}

bool NamespaceRegistry::port_in_use(NamespaceId ns, std::uint16_t port) const {
    std::lock_guard lock(mu_);
    auto it = spaces_.find(ns);
    return it != spaces_.end() && it->second.ports.count(port) != 0;
}

std::size_t NamespaceRegistry::live_namespaces() const {
    std::lock_guard lock(mu_);
    return spaces_.size();
}

std::vector<ProcessRecord> reconstruct_tree(const ProcessTreeImage& image, NamespaceId dest,
                                            NamespaceRegistry& registry) {
    std::vector<ProcessRecord> out;
    out.reserve(image.plan.size());
    std::set<LocalPid> created;
    for (const auto& e : image.plan) {
        if (e.parent_local_pid && !created.count(*e.parent_local_pid)) {
            throw Error(ErrorCode::InvalidArgument, "creation plan is not topologically ordered");
        }
        registry.claim_local_pid(dest, e.local_pid);
        ProcessRecord p;
        p.host_pid = registry.allocate_host_pid();
        p.local_pid = e.local_pid;
        p.parent_local_pid = e.parent_local_pid;
        p.descriptors = e.descriptors;
        p.threads = e.threads;
        p.register_state = e.register_state;
        p.tls_state = e.tls_state;
        p.signal_state = e.signal_state;
        p.futex_state = e.futex_state;
        created.insert(e.local_pid);
        out.push_back(std::move(p));
    }
    return out;
}

// --- proc handles ------------------------------------------------------------

ProcHandle ProcHandleTable::open(BranchId branch, HostPid host_pid) {
    std::lock_guard lock(mu_);
    const auto token = next_++;
    handles_.emplace(token, std::pair{branch, host_pid});
    return ProcHandle{token};
}

std::optional<std::pair<BranchId, HostPid>> ProcHandleTable::resolve(ProcHandle handle) const {
    std::lock_guard lock(mu_);
    auto it = handles_.find(handle.token);
    if (it == handles_.end()) return std::nullopt;
    return it->second;
}

void ProcHandleTable::close(ProcHandle handle) {
    std::lock_guard lock(mu_);
    handles_.erase(handle.token);
}

} // namespace forkspace
