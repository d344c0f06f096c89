#include "forkspace/workspace.hpp"

#include <algorithm>
#include <cstring>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

namespace forkspace {

std::string_view to_string(MemoryClass c) {
    switch (c) {
    case MemoryClass::Anonymous: return "anonymous";
    case MemoryClass::FileBacked: return "file-backed";
    case MemoryClass::Shared: return "shared";
    }
    return "?";
}

std::string_view to_string(ConnectionKind k) {
    return k == ConnectionKind::Internal ? "internal" : "external";
}

std::string_view to_string(DiffKind k) {
    switch (k) {
    case DiffKind::Process: return "process";
    case DiffKind::Descriptor: return "descriptor";
    case DiffKind::Region: return "region";
    case DiffKind::Page: return "page";
    case DiffKind::File: return "file";
    case DiffKind::FilePage: return "file-page";
    case DiffKind::Connection: return "connection";
    case DiffKind::Gui: return "gui";
    }
    return "?";
}

bool same_observable_process(const ProcessRecord& a, const ProcessRecord& b) {
    return a.local_pid == b.local_pid && a.parent_local_pid == b.parent_local_pid &&
           a.descriptors == b.descriptors && a.threads == b.threads &&
           a.register_state == b.register_state && a.tls_state == b.tls_state &&
           a.signal_state == b.signal_state && a.futex_state == b.futex_state;
}

// --- TcpRepairState ----------------------------------------------------------

namespace {

void put_u32(Blob& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const Blob& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw Error(ErrorCode::InvalidArgument, "truncated tcp state");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{in[pos + i]} << (8 * i);
    pos += 4;
    return v;
}

Blob get_bytes(const Blob& in, std::size_t& pos) {
    const auto n = get_u32(in, pos);
    if (pos + n > in.size()) throw Error(ErrorCode::InvalidArgument, "truncated tcp state");
    Blob out(in.begin() + static_cast<std::ptrdiff_t>(pos),
             in.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return out;
}

} // namespace

Blob TcpRepairState::encode() const {
    Blob out;
    put_u32(out, local_seq);
    put_u32(out, remote_seq);
    put_u32(out, static_cast<std::uint32_t>(local_queue.size()));
    out.insert(out.end(), local_queue.begin(), local_queue.end());
    put_u32(out, static_cast<std::uint32_t>(remote_queue.size()));
    out.insert(out.end(), remote_queue.begin(), remote_queue.end());
    return out;
}

TcpRepairState TcpRepairState::decode(const Blob& blob) {
    TcpRepairState s;
    std::size_t pos = 0;
    s.local_seq = get_u32(blob, pos);
    s.remote_seq = get_u32(blob, pos);
    s.local_queue = get_bytes(blob, pos);
    s.remote_queue = get_bytes(blob, pos);
    if (pos != blob.size()) throw Error(ErrorCode::InvalidArgument, "trailing bytes in tcp state");
    return s;
}

std::uint64_t WorkspaceState::page_count() const {
    std::uint64_t n = 0;
    for (const auto& r : regions) n += r.length;
    return n;
}

// --- spec / JSON -------------------------------------------------------------

WorkspaceSpec WorkspaceSpec::chromium_scale(std::uint64_t seed) {
    WorkspaceSpec s;
    s.processes = 168;
    s.tree_seed = seed;
    s.anon_bytes = std::uint64_t{2} << 30;
    s.file_backed_bytes = std::uint64_t{64} << 20;
    s.shared_bytes = std::uint64_t{4} << 20;
    s.vmas_per_process = 2;
    s.descriptors_per_process = 2;
    for (int i = 0; i < 32; ++i) {
        s.file_manifest.push_back({"/usr/lib/chromium/lib" + std::to_string(i) + ".so", 2u << 20});
    }
    s.file_manifest.push_back({"/home/user/.config/chromium/Preferences", 64u << 10});
    s.internal_connections = 8;
    s.external_connections = 4;
    s.gui_buffers = 2;
    s.gui_buffer_bytes = 8u << 20;
    return s;
}

void to_json(nlohmann::json& j, const WorkspaceSpec& s) {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& f : s.file_manifest) manifest.push_back({{"path", f.path}, {"bytes", f.bytes}});
    j = nlohmann::json{
        {"processes", s.processes},
        {"tree_seed", s.tree_seed},
        {"anon_pages", s.anon_bytes / kPageSize},
        {"file_backed_bytes", s.file_backed_bytes},
        {"shared_bytes", s.shared_bytes},
        {"vmas_per_process", s.vmas_per_process},
        {"descriptors_per_process", s.descriptors_per_process},
        {"file_manifest", manifest},
        {"conn_mix", {{"internal", s.internal_connections}, {"external", s.external_connections}}},
        {"gui_buffers", {{"count", s.gui_buffers}, {"bytes", s.gui_buffer_bytes}}},
        {"sparse_fraction", s.sparse_fraction},
    };
}

void from_json(const nlohmann::json& j, WorkspaceSpec& s) {
    s = WorkspaceSpec{};
    s.processes = j.at("processes").get<std::uint32_t>();
    s.tree_seed = j.value("tree_seed", std::uint64_t{1});
    if (j.contains("anon_pages")) {
        s.anon_bytes = j.at("anon_pages").get<std::uint64_t>() * kPageSize;
    } else {
        s.anon_bytes = j.value("anon_bytes", std::uint64_t{0});
    }
    s.file_backed_bytes = j.value("file_backed_bytes", std::uint64_t{0});
    s.shared_bytes = j.value("shared_bytes", std::uint64_t{0});
    s.vmas_per_process = j.value("vmas_per_process", 2u);
    s.descriptors_per_process = j.value("descriptors_per_process", 2u);
    if (j.contains("file_manifest")) {
        for (const auto& f : j.at("file_manifest")) {
            s.file_manifest.push_back({f.at("path").get<std::string>(), f.at("bytes").get<std::uint64_t>()});
        }
    }
    if (j.contains("conn_mix")) {
        s.internal_connections = j["conn_mix"].value("internal", 0u);
        s.external_connections = j["conn_mix"].value("external", 0u);
    }
    if (j.contains("gui_buffers")) {
        const auto& g = j.at("gui_buffers");
        if (g.is_number()) {
            s.gui_buffers = g.get<std::uint32_t>();
        } else {
            s.gui_buffers = g.value("count", 0u);
            s.gui_buffer_bytes = g.value("bytes", std::uint64_t{kPageSize});
        }
    }
    s.sparse_fraction = j.value("sparse_fraction", 0.0);
}

// --- generator ---------------------------------------------------------------

namespace {

Blob random_blob(std::mt19937_64& rng, std::size_t n) {
    Blob b(n);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    return b;
}

void require_aligned(std::uint64_t bytes, const char* what) {
    if (bytes % kPageSize != 0) {
        throw Error(ErrorCode::InvalidArgument, std::string(what) + " is not page-aligned");
    }
}

} // namespace

WorkspaceState build_workspace(const WorkspaceSpec& spec) {
    if (spec.processes == 0) throw Error(ErrorCode::InvalidArgument, "workspace needs at least one process");
    if (spec.vmas_per_process == 0) throw Error(ErrorCode::InvalidArgument, "vmas_per_process must be positive");
    require_aligned(spec.anon_bytes, "anon_bytes");
    require_aligned(spec.file_backed_bytes, "file_backed_bytes");
    require_aligned(spec.shared_bytes, "shared_bytes");
    require_aligned(spec.gui_buffer_bytes, "gui_buffer_bytes");
    for (const auto& f : spec.file_manifest) {
        require_aligned(f.bytes, "file size");
        if (f.path.empty() || f.path.front() != '/') {
            throw Error(ErrorCode::InvalidArgument, "file paths must be absolute");
        }
    }
    if ((spec.internal_connections > 0 || spec.file_backed_bytes > 0) && spec.processes == 0) {
        throw Error(ErrorCode::InvalidArgument, "connections need processes");
    }

    std::mt19937_64 rng(spec.tree_seed);
    WorkspaceState ws;
    ws.processes.reserve(spec.processes);
    for (std::uint32_t i = 0; i < spec.processes; ++i) {
        ProcessRecord p;
        p.local_pid = i + 1;
        p.host_pid = 1000 + i;
        if (i > 0) p.parent_local_pid = static_cast<LocalPid>(1 + rng() % i);
        const auto nthreads = 1 + rng() % 4;
        for (std::uint32_t t = 0; t < nthreads; ++t) p.threads.push_back(p.local_pid * 100 + t);
        p.register_state = random_blob(rng, 32);
        p.tls_state = random_blob(rng, 16);
        p.signal_state = random_blob(rng, 8);
        p.futex_state = random_blob(rng, 8);
        for (std::uint32_t d = 0; d < spec.descriptors_per_process; ++d) {
            Descriptor desc;
            desc.fd = static_cast<int>(d);
            desc.kind = d < 3 ? DescriptorKind::Device : DescriptorKind::File;
            desc.target = d < 3 ? "/dev/pts/0" : "/tmp/proc" + std::to_string(p.local_pid);
            p.descriptors.push_back(desc);
        }
        ws.processes.push_back(std::move(p));
    }

    // Anonymous memory, spread evenly over every process's VMAs.
    const std::uint64_t anon_pages = spec.anon_bytes / kPageSize;
    const std::uint64_t vma_total = std::uint64_t{spec.processes} * spec.vmas_per_process;
    std::uint64_t page_serial = 0;
    const std::uint64_t content_base = mix64(spec.tree_seed ^ 0xa5a5a5a5ULL);
    VmaId next_vma = 1;
    for (std::uint64_t v = 0; v < vma_total; ++v) {
        const std::uint64_t len = anon_pages / vma_total + (v < anon_pages % vma_total ? 1 : 0);
        if (len == 0) continue;
        MemoryRegion r;
        r.vma_id = next_vma++;
        r.owner = static_cast<LocalPid>(v / spec.vmas_per_process + 1);
        r.cls = MemoryClass::Anonymous;
        r.start = std::uint64_t{0x7f0000000000} + std::uint64_t{r.vma_id} * (std::uint64_t{1} << 32);
        r.length = static_cast<std::uint32_t>(len);
        r.pages.resize(len);
        for (std::uint64_t s = 0; s < len; ++s) {
            const std::uint64_t key = mix64(content_base + page_serial++);
            const bool sparse = spec.sparse_fraction > 0.0 &&
                                static_cast<double>(key % 1000000) < spec.sparse_fraction * 1e6;
            if (!sparse) r.pages[s] = PageContent::synthetic(key);
        }
        ws.regions.push_back(std::move(r));
    }

    for (const auto& f : spec.file_manifest) {
        std::vector<PageContent> pages;
        const std::uint64_t n = f.bytes / kPageSize;
        pages.reserve(n);
        for (std::uint64_t i = 0; i < n; ++i) {
            pages.push_back(PageContent::synthetic(mix64(fnv1a(f.path) ^ mix64(spec.tree_seed + i))));
        }
        ws.files.emplace(f.path, std::move(pages));
    }

    // File-backed mappings bind to the largest files, one per process round-robin.
    std::uint64_t fb_pages = spec.file_backed_bytes / kPageSize;
    if (fb_pages > 0 && !ws.files.empty()) {
        std::vector<const std::pair<const std::string, std::vector<PageContent>>*> files;
        for (const auto& kv : ws.files) {
            if (!kv.second.empty()) files.push_back(&kv);
        }
        std::size_t idx = 0;
        while (fb_pages > 0 && !files.empty()) {
            const auto* file = files[idx % files.size()];
            const auto len = static_cast<std::uint32_t>(std::min<std::uint64_t>(fb_pages, file->second.size()));
            MemoryRegion r;
            r.vma_id = next_vma++;
            r.owner = static_cast<LocalPid>(idx % spec.processes + 1);
            r.cls = MemoryClass::FileBacked;
            r.start = std::uint64_t{0x5500000000} + std::uint64_t{r.vma_id} * (std::uint64_t{1} << 32);
            r.length = len;
            r.backing_file = file->first;
            r.pages.resize(len);
            ws.regions.push_back(std::move(r));
            fb_pages -= len;
            ++idx;
        }
    }

    if (spec.shared_bytes > 0) {
        MemoryRegion r;
        r.vma_id = next_vma++;
        r.owner = 1;
        r.cls = MemoryClass::Shared;
        r.start = 0x6000000000;
        r.length = static_cast<std::uint32_t>(spec.shared_bytes / kPageSize);
        for (std::uint32_t s = 0; s < r.length; ++s) {
            r.pages.push_back(PageContent::synthetic(mix64(content_base ^ (0x5eedULL << 32) ^ s)));
        }
        ws.regions.push_back(std::move(r));
    }

    ConnectionId next_conn = 1;
    auto add_socket = [&](LocalPid pid, ConnectionId conn) {
        auto& p = ws.processes[pid - 1];
        Descriptor d;
        d.fd = static_cast<int>(p.descriptors.size());
        d.kind = DescriptorKind::Socket;
        d.target = "socket:" + std::to_string(conn);
        d.connection = conn;
        p.descriptors.push_back(d);
    };
    for (std::uint32_t i = 0; i < spec.internal_connections; ++i) {
        Connection c;
        c.id = next_conn++;
        c.kind = ConnectionKind::Internal;
        const auto a = static_cast<LocalPid>(1 + rng() % spec.processes);
        const auto b = static_cast<LocalPid>(1 + rng() % spec.processes);
        c.local = {"127.0.0.1", static_cast<std::uint16_t>(40000 + i), a};
        c.remote = {"127.0.0.1", static_cast<std::uint16_t>(50000 + i), b};
        TcpRepairState t;
        t.local_seq = static_cast<std::uint32_t>(rng());
        t.remote_seq = static_cast<std::uint32_t>(rng());
        t.local_queue = random_blob(rng, rng() % 16);
        c.proto_state = t.encode();
        add_socket(a, c.id);
        if (b != a) add_socket(b, c.id);
        ws.connections.push_back(std::move(c));
    }
    for (std::uint32_t i = 0; i < spec.external_connections; ++i) {
        Connection c;
        c.id = next_conn++;
        c.kind = ConnectionKind::External;
        const auto a = static_cast<LocalPid>(1 + rng() % spec.processes);
        c.local = {"10.0.0.2", static_cast<std::uint16_t>(33000 + i), a};
        c.remote = {"203.0.113." + std::to_string(1 + i % 250), 443, std::nullopt};
        TcpRepairState t;
        t.local_seq = static_cast<std::uint32_t>(rng());
        t.remote_seq = static_cast<std::uint32_t>(rng());
        c.proto_state = t.encode();
        add_socket(a, c.id);
        ws.connections.push_back(std::move(c));
    }

    for (std::uint32_t g = 0; g < spec.gui_buffers; ++g) {
        GuiBuffer buf;
        buf.id = g + 1;
        buf.size = spec.gui_buffer_bytes;
        buf.mutation_rate_hint = 60.0;
        for (std::uint64_t i = 0; i < spec.gui_buffer_bytes / kPageSize; ++i) {
            buf.contents.push_back(PageContent::synthetic(mix64(content_base ^ (std::uint64_t{g + 1} << 40) ^ i)));
        }
        ws.gui_buffers.push_back(std::move(buf));
    }
    ws.namespace_id = 0;
    return ws;
}

// --- validation --------------------------------------------------------------

std::vector<std::string> validate(const WorkspaceState& state) {
    std::vector<std::string> problems;
    std::set<LocalPid> locals;
    std::set<HostPid> hosts;
    std::size_t roots = 0;
    for (const auto& p : state.processes) {
        if (!locals.insert(p.local_pid).second) {
            problems.push_back("duplicate local pid " + std::to_string(p.local_pid));
        }
        if (!hosts.insert(p.host_pid).second) {
            problems.push_back("duplicate host pid " + std::to_string(p.host_pid));
        }
        if (!p.parent_local_pid) ++roots;
    }
    if (!state.processes.empty() && roots != 1) {
        problems.push_back("process tree has " + std::to_string(roots) + " roots");
    }
    for (const auto& p : state.processes) {
        if (p.parent_local_pid && !locals.count(*p.parent_local_pid)) {
            problems.push_back("pid " + std::to_string(p.local_pid) + " has unknown parent");
        }
    }
    // Cycle check: every chain of parents must reach the root.
    std::map<LocalPid, std::optional<LocalPid>> parent;
    for (const auto& p : state.processes) parent[p.local_pid] = p.parent_local_pid;
    for (const auto& p : state.processes) {
        auto cur = p.parent_local_pid;
        std::size_t steps = 0;
        while (cur && steps <= state.processes.size()) {
            auto it = parent.find(*cur);
            if (it == parent.end()) break;
            cur = it->second;
            ++steps;
        }
        if (steps > state.processes.size()) {
            problems.push_back("cycle through pid " + std::to_string(p.local_pid));
            break;
        }
    }

    std::set<std::pair<LocalPid, VmaId>> vmas;
    for (const auto& r : state.regions) {
        if (!locals.count(r.owner)) {
            problems.push_back("region " + std::to_string(r.vma_id) + " has no owning process");
        }
        if (!vmas.insert({r.owner, r.vma_id}).second) {
            problems.push_back("duplicate vma " + std::to_string(r.vma_id));
        }
        if ((r.cls == MemoryClass::FileBacked) != r.backing_file.has_value()) {
            problems.push_back("region " + std::to_string(r.vma_id) + " backing file mismatch");
        }
        if (r.backing_file && !state.files.empty() && !state.files.count(*r.backing_file)) {
            problems.push_back("region " + std::to_string(r.vma_id) + " maps a missing file");
        }
        if (r.pages.size() != r.length) {
            problems.push_back("region " + std::to_string(r.vma_id) + " slot count != length");
        }
        if (r.start % kPageSize != 0) {
            problems.push_back("region " + std::to_string(r.vma_id) + " is not page-aligned");
        }
    }

    for (const auto& c : state.connections) {
        const bool inside = c.local.pid && c.remote.pid && locals.count(*c.local.pid) &&
                            locals.count(*c.remote.pid);
        if (inside != (c.kind == ConnectionKind::Internal)) {
            problems.push_back("connection " + std::to_string(c.id) + " kind does not match endpoints");
        }
    }
    for (const auto& g : state.gui_buffers) {
        if (g.size != g.contents.size() * kPageSize) {
            problems.push_back("gui buffer " + std::to_string(g.id) + " size mismatch");
        }
    }
    return problems;
}

// --- diff --------------------------------------------------------------------

std::size_t DiffReport::count(DiffKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [&](const DiffEntry& e) { return e.kind == kind; }));
}

namespace {

template <typename T, typename KeyFn>
std::map<decltype(std::declval<KeyFn>()(std::declval<const T&>())), const T*>
index_by(const std::vector<T>& items, KeyFn key) {
    std::map<decltype(key(items.front())), const T*> out;
    for (const auto& it : items) out.emplace(key(it), &it);
    return out;
}

std::string region_loc(const MemoryRegion& r) {
    return "pid " + std::to_string(r.owner) + " vma " + std::to_string(r.vma_id);
}

void diff_pages(const MemoryRegion& a, const MemoryRegion& b, std::vector<DiffEntry>& out) {
    const std::size_t n = std::max(a.pages.size(), b.pages.size());
    for (std::size_t s = 0; s < n; ++s) {
        const std::optional<PageContent> none;
        const auto& x = s < a.pages.size() ? a.pages[s] : none;
        const auto& y = s < b.pages.size() ? b.pages[s] : none;
        if (x.has_value() != y.has_value() || (x && !(*x == *y))) {
            out.push_back({DiffKind::Page, region_loc(a) + " slot " + std::to_string(s)});
        }
    }
}

} // namespace

DiffReport diff(const WorkspaceState& a, const WorkspaceState& b, ExecPolicy policy) {
    DiffReport report;
    auto& out = report.entries;

    auto pa = index_by(a.processes, [](const ProcessRecord& p) { return p.local_pid; });
    auto pb = index_by(b.processes, [](const ProcessRecord& p) { return p.local_pid; });
    std::set<LocalPid> pids;
    for (auto& kv : pa) pids.insert(kv.first);
    for (auto& kv : pb) pids.insert(kv.first);
    for (auto pid : pids) {
        const std::string loc = "pid " + std::to_string(pid);
        auto ia = pa.find(pid);
        auto ib = pb.find(pid);
        if (ia == pa.end() || ib == pb.end()) {
            out.push_back({DiffKind::Process, loc});
            continue;
        }
        const auto& x = *ia->second;
        const auto& y = *ib->second;
        if (x.parent_local_pid != y.parent_local_pid || x.threads != y.threads ||
            x.register_state != y.register_state || x.tls_state != y.tls_state ||
            x.signal_state != y.signal_state || x.futex_state != y.futex_state) {
            out.push_back({DiffKind::Process, loc});
        }
        std::map<int, const Descriptor*> da;
        std::map<int, const Descriptor*> db;
        for (const auto& d : x.descriptors) da[d.fd] = &d;
        for (const auto& d : y.descriptors) db[d.fd] = &d;
        std::set<int> fds;
        for (auto& kv : da) fds.insert(kv.first);
        for (auto& kv : db) fds.insert(kv.first);
        for (int fd : fds) {
            auto xa = da.find(fd);
            auto xb = db.find(fd);
            if (xa == da.end() || xb == db.end() || !(*xa->second == *xb->second)) {
                out.push_back({DiffKind::Descriptor, loc + " fd " + std::to_string(fd)});
            }
        }
    }

    auto key = [](const MemoryRegion& r) { return std::pair<LocalPid, VmaId>{r.owner, r.vma_id}; };
    auto ra = index_by(a.regions, key);
    auto rb = index_by(b.regions, key);
    std::vector<std::pair<const MemoryRegion*, const MemoryRegion*>> both;
    std::set<std::pair<LocalPid, VmaId>> keys;
    for (auto& kv : ra) keys.insert(kv.first);
    for (auto& kv : rb) keys.insert(kv.first);
    for (const auto& k : keys) {
        auto ia = ra.find(k);
        auto ib = rb.find(k);
        if (ia == ra.end() || ib == rb.end()) {
            const MemoryRegion& r = ia != ra.end() ? *ia->second : *ib->second;
            out.push_back({DiffKind::Region, region_loc(r)});
            continue;
        }
        const auto& x = *ia->second;
        const auto& y = *ib->second;
        if (x.cls != y.cls || x.start != y.start || x.length != y.length ||
            x.backing_file != y.backing_file || x.file_page_offset != y.file_page_offset) {
            out.push_back({DiffKind::Region, region_loc(x)});
        }
        both.emplace_back(&x, &y);
    }

    // Page comparison dominates on large fixtures; regions compare independently.
    std::vector<std::vector<DiffEntry>> page_entries(both.size());
    const auto nregions = static_cast<std::int64_t>(both.size());
    if (policy == ExecPolicy::Parallel) {
#pragma omp parallel for schedule(dynamic, 4)
        for (std::int64_t i = 0; i < nregions; ++i) {
            diff_pages(*both[i].first, *both[i].second, page_entries[i]);
        }
    } else {
        for (std::int64_t i = 0; i < nregions; ++i) {
            diff_pages(*both[i].first, *both[i].second, page_entries[i]);
        }
    }
    for (auto& v : page_entries) out.insert(out.end(), v.begin(), v.end());

    std::set<std::string> paths;
    for (auto& kv : a.files) paths.insert(kv.first);
    for (auto& kv : b.files) paths.insert(kv.first);
    for (const auto& path : paths) {
        auto ia = a.files.find(path);
        auto ib = b.files.find(path);
        if (ia == a.files.end() || ib == b.files.end() || ia->second.size() != ib->second.size()) {
            out.push_back({DiffKind::File, path});
            continue;
        }
        for (std::size_t i = 0; i < ia->second.size(); ++i) {
            if (!(ia->second[i] == ib->second[i])) {
                out.push_back({DiffKind::FilePage, path + " page " + std::to_string(i)});
            }
        }
    }

    auto ca = index_by(a.connections, [](const Connection& c) { return c.id; });
    auto cb = index_by(b.connections, [](const Connection& c) { return c.id; });
    std::set<ConnectionId> cids;
    for (auto& kv : ca) cids.insert(kv.first);
    for (auto& kv : cb) cids.insert(kv.first);
    for (auto id : cids) {
        auto ia = ca.find(id);
        auto ib = cb.find(id);
        if (ia == ca.end() || ib == cb.end() || !(*ia->second == *ib->second)) {
            out.push_back({DiffKind::Connection, "conn " + std::to_string(id)});
        }
    }

    auto ga = index_by(a.gui_buffers, [](const GuiBuffer& g) { return g.id; });
    auto gb = index_by(b.gui_buffers, [](const GuiBuffer& g) { return g.id; });
    std::set<GuiBufferId> gids;
    for (auto& kv : ga) gids.insert(kv.first);
    for (auto& kv : gb) gids.insert(kv.first);
    for (auto id : gids) {
        auto ia = ga.find(id);
        auto ib = gb.find(id);
        if (ia == ga.end() || ib == gb.end() || ia->second->size != ib->second->size ||
            ia->second->contents.size() != ib->second->contents.size() ||
            !std::equal(ia->second->contents.begin(), ia->second->contents.end(),
                        ib->second->contents.begin())) {
            out.push_back({DiffKind::Gui, "gui " + std::to_string(id)});
        }
    }

    std::sort(out.begin(), out.end());
    return report;
}

} // namespace forkspace
