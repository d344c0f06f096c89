#include "forkspace/engine.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <set>

namespace forkspace {

namespace {

std::uint64_t now_ns() {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
            .count());
}

std::uint64_t populated(const PageTable& t) {
    std::uint64_t n = 0;
    for (const auto& s : t.slots()) n += s.page != kNoPage ? 1 : 0;
    return n;
}

std::uint64_t gui_pages(const std::vector<GuiBuffer>& gui) {
    std::uint64_t n = 0;
    for (const auto& g : gui) n += g.contents.size();
    return n;
}

} // namespace

struct Engine::Branch {
    BranchId id = 0;
    BranchStatus status = BranchStatus::Running;
    bool user = false;
    NamespaceId ns = 0;
    std::vector<ProcessState> procs;
    std::unique_ptr<FsView> fs;
    std::vector<Connection> connections;
    std::vector<GuiBuffer> gui;
    SecurityProfile profile;
    EgressMode egress = EgressMode::DelayedCommit;
    std::optional<VersionId> node;
    std::optional<ImageId> last_image;
    CheckpointHandlePtr last_handle;
    DirtySet dirty;
    std::vector<OutboxEntry> outbox;
    std::vector<PolicyEvent> events;
    AuditLog audit;
    std::uint64_t local_bytes = 0;
    std::optional<FrozenMeta> frozen;
    std::uint64_t event_seq = 0;
    mutable std::mutex mu;

    ProcessState* proc(LocalPid pid) {
        for (auto& p : procs) {
            if (p.record.local_pid == pid) return &p;
        }
        return nullptr;
    }
    VmaMapping& vma(LocalPid pid, VmaId id) {
        auto* p = proc(pid);
        if (!p) throw Error(ErrorCode::NotFound, "no process " + std::to_string(pid));
        for (auto& m : p->vmas) {
            if (m.vma_id == id) return m;
        }
        throw Error(ErrorCode::NotFound, "no vma " + std::to_string(id) + " in process " + std::to_string(pid));
    }
};

/// In-memory view of a recorded version. Page tables are shared by pointer
/// with the branch at record time, so pinning copies nothing.
struct Engine::VersionPin {
    std::vector<ProcessRecord> processes;
    std::vector<std::pair<LocalPid, std::vector<VmaMapping>>> memory;
    FsVersion fs;
    LayerPtr layer;
    std::vector<Connection> connections;
    std::vector<GuiBuffer> gui;
    ProcessTreeImage tree;
    ImageId image = 0;
    CheckpointHandlePtr handle;
};

namespace {

void require_running(BranchStatus s, BranchId id) {
    switch (s) {
    case BranchStatus::Running: return;
    case BranchStatus::Frozen: throw Error(ErrorCode::InvalidState, "branch " + std::to_string(id) + " is frozen");
    case BranchStatus::Discarded:
    case BranchStatus::Promoted:
        throw Error(ErrorCode::InvalidState,
                    "branch " + std::to_string(id) + " is " + std::string(to_string(s)) + " and accepts no operations");
    }
}

void require_live(BranchStatus s, BranchId id) {
    if (s == BranchStatus::Discarded || s == BranchStatus::Promoted) require_running(s, id);
}

std::vector<ProcessRecord> sorted_records(std::vector<ProcessRecord> recs) {
    std::sort(recs.begin(), recs.end(),
              [](const ProcessRecord& a, const ProcessRecord& b) { return a.local_pid < b.local_pid; });
    return recs;
}

} // namespace

Engine::Engine(EngineConfig config)
    : config_(std::move(config)),
      pages_(std::make_unique<PageStore>()),
      extents_(std::make_shared<ExtentStore>()),
      checkpoints_(config_.image_dir ? std::make_unique<CheckpointStore>(*config_.image_dir)
                                     : std::make_unique<CheckpointStore>()),
      daemon_(std::make_unique<DumpDaemon>(*checkpoints_)) {}

Engine::~Engine() {
    daemon_->unstall();
    daemon_->drain();
    // Branches and pins hold page references; release them before the store.
    branches_.clear();
    pins_.clear();
    daemon_.reset();
}

Engine::Branch* Engine::find(BranchId b) const {
    std::lock_guard lock(mu_);
    auto it = branches_.find(b);
    return it == branches_.end() ? nullptr : it->second.get();
}

Engine::Branch& Engine::live(BranchId b) const {
    auto* br = find(b);
    if (!br) throw Error(ErrorCode::NotFound, "unknown branch " + std::to_string(b));
    return *br;
}

void Engine::set_status(Branch& br, BranchStatus s) {
    br.status = s;
    std::lock_guard lock(mu_);
    tree_.set_branch({br.id, br.node, s, br.user});
}

void Engine::log_event(Branch& br, PolicyEvent e) {
    e.branch = br.id;
    e.sequence = ++br.event_seq;
    br.audit.append(e.to_json_line());
    br.events.push_back(std::move(e));
}

// --- creation and inspection -------------------------------------------------

BranchId Engine::create_branch(const WorkspaceState& state, SecurityProfile profile, bool user) {
    if (auto problems = validate(state); !problems.empty()) {
        throw Error(ErrorCode::InvalidArgument, "invalid workspace: " + problems.front());
    }
    auto br = std::make_unique<Branch>();
    {
        std::lock_guard lock(mu_);
        std::size_t live_count = 0;
        for (const auto& [id, b] : branches_) {
            live_count += (b->status == BranchStatus::Running || b->status == BranchStatus::Frozen) ? 1 : 0;
        }
        if (live_count + 1 > config_.branch_cap) throw Error(ErrorCode::OutOfRange, "branch cap reached");
        br->id = next_branch_++;
    }
    br->ns = namespaces_.create();
    for (const auto& rec : sorted_records(state.processes)) {
        ProcessState ps;
        ps.record = rec;
        ps.record.host_pid = namespaces_.allocate_host_pid();
        namespaces_.claim_local_pid(br->ns, rec.local_pid);
        br->procs.push_back(std::move(ps));
    }
    for (const auto& r : state.regions) {
        auto* p = br->proc(r.owner);
        VmaMapping m;
        m.vma_id = r.vma_id;
        m.cls = r.cls;
        m.start = r.start;
        m.backing_file = r.backing_file;
        m.file_page_offset = r.file_page_offset;
        m.table = std::make_shared<PageTable>(*pages_, r.length);
        for (std::uint32_t i = 0; i < r.length; ++i) {
            if (r.pages[i]) m.table->install(i, *r.pages[i]);
        }
        p->vmas.push_back(std::move(m));
    }
    for (auto& p : br->procs) {
        std::sort(p.vmas.begin(), p.vmas.end(), [](const VmaMapping& a, const VmaMapping& b) { return a.vma_id < b.vma_id; });
    }
    FsVersion version(extents_);
    for (const auto& [path, pages] : state.files) version.add_file(path, pages);
    br->fs = std::make_unique<FsView>(next_view_++, std::move(version), nullptr);
    restore_network(*br, state.connections);
    // The root workspace keeps its external connections; only derived branches sever them.
    for (const auto& c : state.connections) {
        if (c.kind == ConnectionKind::External) br->connections.push_back(c);
    }
    std::sort(br->connections.begin(), br->connections.end(),
              [](const Connection& a, const Connection& b) { return a.id < b.id; });
    br->gui = state.gui_buffers;
    br->profile = std::move(profile);
    br->egress = config_.egress;
    const BranchId id = br->id;
    std::lock_guard lock(mu_);
    if (user && !user_) {
        user_ = id;
        br->user = true;
    }
    tree_.set_branch({id, std::nullopt, BranchStatus::Running, br->user});
    branches_.emplace(id, std::move(br));
    return id;
}

void Engine::restore_network(Branch& br, const std::vector<Connection>& source) {
    std::vector<ProcessRecord> recs;
    for (const auto& p : br.procs) recs.push_back(p.record);
    auto part = classify_connections(source, recs);
    NetworkState net;
    restore_internal(part.internal, br.ns, recs, namespaces_, net);
    br.connections = std::move(net.connections);
}

WorkspaceState Engine::snapshot(BranchId b) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_live(br.status, b);
    WorkspaceState ws;
    for (const auto& p : br.procs) {
        ws.processes.push_back(p.record);
        for (const auto& m : p.vmas) {
            MemoryRegion r;
            r.vma_id = m.vma_id;
            r.owner = p.record.local_pid;
            r.cls = m.cls;
            r.start = m.start;
            r.length = m.length();
            r.backing_file = m.backing_file;
            r.file_page_offset = m.file_page_offset;
            r.pages.reserve(r.length);
            for (std::uint32_t i = 0; i < r.length; ++i) r.pages.push_back(m.table->read(i));
            ws.regions.push_back(std::move(r));
        }
    }
    ws.fs_view = br.fs->id();
    ws.files = br.fs->version().materialize();
    ws.connections = br.connections;
    ws.gui_buffers = br.gui;
    ws.namespace_id = br.ns;
    return ws;
}

BranchStatus Engine::status(BranchId b) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    return br.status;
}

std::vector<BranchId> Engine::live_branches() const {
    std::lock_guard lock(mu_);
    std::vector<BranchId> out;
    for (const auto& [id, b] : branches_) {
        if (b->status == BranchStatus::Running || b->status == BranchStatus::Frozen) out.push_back(id);
    }
    return out;
}

std::optional<BranchId> Engine::user_branch() const {
    std::lock_guard lock(mu_);
    return user_;
}

// --- freeze / record ----------------------------------------------------------

FrozenMeta Engine::freeze_locked(Branch& br) {
    if (br.status == BranchStatus::Frozen) throw Error(ErrorCode::InvalidState, "branch is already frozen");
    require_running(br.status, br.id);
    FrozenMeta meta;
    meta.branch = br.id;
    meta.namespaces = {br.ns};
    meta.frozen_at = clock_++;
    std::uint64_t ops = 0;
    for (const auto& p : br.procs) {
        meta.tree.push_back(p.record);
        meta.proc_handles.push_back(handles_.open(br.id, p.record.host_pid));
        ops += 1 + p.record.descriptors.size() + p.record.threads.size();
    }
    meta.freeze_ops = ops;
    br.frozen = meta;
    set_status(br, BranchStatus::Frozen);
    return meta;
}

void Engine::resume_locked(Branch& br) {
    if (br.status != BranchStatus::Frozen || !br.frozen) {
        throw Error(ErrorCode::InvalidState, "branch " + std::to_string(br.id) + " was never frozen");
    }
    for (const auto& h : br.frozen->proc_handles) handles_.close(h);
    br.frozen.reset();
    set_status(br, BranchStatus::Running);
}

FrozenMeta Engine::freeze(BranchId b) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    return freeze_locked(br);
}

void Engine::resume(BranchId b) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    resume_locked(br);
}

RecordResult Engine::record_version(BranchId b, DumpMode mode) {
    const auto t0 = now_ns();
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    RecordResult res;
    const auto before = pages_->counters();
    const FrozenMeta meta = freeze_locked(br);
    res.processes = meta.tree.size();
    res.freeze_ops = meta.freeze_ops;

    std::vector<std::pair<LocalPid, std::vector<VmaMapping>*>> procs;
    for (auto& p : br.procs) procs.emplace_back(p.record.local_pid, &p.vmas);
    auto holders = create_snapshot_holders(procs);
    res.holder_ops = holders.size();
    for (const auto& h : holders) res.holder_ops += h.vmas.size();

    auto pin = std::make_shared<VersionPin>(VersionPin{{}, {}, br.fs->version(), nullptr, {}, {}, {}, 0, nullptr});
    pin->processes = meta.tree;
    for (const auto& p : br.procs) pin->memory.emplace_back(p.record.local_pid, p.vmas);
    pin->layer = br.fs->seal(next_layer_++);
    pin->connections = br.connections;
    pin->gui = br.gui;
    pin->tree = capture_metadata(meta);

    const auto after = pages_->counters();
    res.freeze_bytes_copied = after.bytes_copied - before.bytes_copied;
    res.freeze_allocations = after.allocations - before.allocations;
    res.freeze_pte_installs = after.pte_installs - before.pte_installs;

    DumpJob job;
    job.holders = std::move(holders);
    const bool parent_ok = br.last_image && br.last_handle && br.last_handle->state() != CheckpointState::Failed;
    if (parent_ok) job.parent = br.last_image;
    res.chained = parent_ok;
    res.dirty_pages = br.dirty.size();
    job.dirty = std::move(br.dirty);
    br.dirty = {};
    job.tree_image = pin->tree.serialize();
    job.handle = std::make_shared<CheckpointHandle>(checkpoints_->next_id());
    pin->image = job.handle->image_id();
    pin->handle = job.handle;
    res.image = pin->image;
    res.handle = job.handle;

    if (mode == DumpMode::Async) {
        daemon_->dump_async(std::move(job));
        resume_locked(br);
    } else {
        // Baseline: the source stays stopped until its image is durable.
        daemon_->dump_sync(std::move(job));
        resume_locked(br);
    }

    {
        std::lock_guard elock(mu_);
        res.version = next_version_++;
        VersionNode node;
        node.id = res.version;
        node.parent = br.node;
        node.source_branch = b;
        node.image = res.image;
        node.checkpoint = res.handle->state();
        node.fs_version = pin->layer->id();
        node.created_at = meta.frozen_at;
        tree_.add_node(node);
        pins_[res.version] = pin;
        handles_by_version_[res.version] = res.handle;
        br.node = res.version;
        tree_.set_branch({br.id, br.node, br.status, br.user});
    }
    br.last_image = res.image;
    br.last_handle = res.handle;
    res.wall_ns = now_ns() - t0;
    return res;
}

// --- fork ----------------------------------------------------------------------

std::unique_ptr<Engine::Branch> Engine::build_from_pin(BranchId id, VersionId v, const VersionPin& pin,
                                                       const SecurityProfile& profile, const ForkOptions& options,
                                                       BranchForkStats& stats) {
    const auto t0 = now_ns();
    auto br = std::make_unique<Branch>();
    br->id = id;
    br->ns = namespaces_.create();
    auto recs = reconstruct_tree(pin.tree, br->ns, namespaces_);
    for (auto& rec : sorted_records(std::move(recs))) br->procs.push_back({std::move(rec), {}});
    stats.branch = id;
    stats.processes = br->procs.size();

    for (const auto& [pid, vmas] : pin.memory) {
        auto* p = br->proc(pid);
        if (!p) throw Error(ErrorCode::Internal, "pinned memory for unknown process");
        for (const auto& src : vmas) {
            VmaMapping dst;
            dst.vma_id = src.vma_id;
            dst.cls = src.cls;
            dst.start = src.start;
            dst.backing_file = src.backing_file;
            dst.file_page_offset = src.file_page_offset;
            const bool shareable = src.cls != MemoryClass::Shared;
            if (shareable && options.memory == MemoryMode::CopyOnWrite) {
                if (src.cls == MemoryClass::Anonymous) {
                    share_vma_cow(src, dst);
                } else {
                    // File-backed: already-private pages keep intra-branch CoW;
                    // everything else faults in from this branch's own view.
                    dst.table = std::make_shared<PageTable>(*src.table);
                }
                stats.pte_installs += populated(*dst.table);
            } else {
                dst.table = std::make_shared<PageTable>(*pages_, src.length());
                std::uint64_t copied = 0;
                for (std::uint32_t i = 0; i < src.length(); ++i) {
                    if (auto c = src.table->read(i)) {
                        dst.table->install(i, *c);
                        ++copied;
                    }
                }
                if (shareable) {
                    stats.pages_copied += copied;
                } else {
                    stats.branch_local_bytes += copied * kPageSize;
                }
            }
            p->vmas.push_back(std::move(dst));
        }
    }

    br->egress = options.egress.value_or(config_.egress);
    restore_network(*br, pin.connections);
    {
        std::vector<ProcessRecord> recs_now;
        for (const auto& p : br->procs) recs_now.push_back(p.record);
        auto part = classify_connections(pin.connections, recs_now);
        auto events = sever_external(part.external, id, recs_now, br->egress);
        for (std::size_t i = 0; i < br->procs.size(); ++i) br->procs[i].record = std::move(recs_now[i]);
        stats.severed = events.size();
        for (auto& e : events) log_event(*br, std::move(e));
    }
    br->gui = rebuild_gui(pin.gui);
    stats.branch_local_bytes += gui_pages(br->gui) * kPageSize;
    br->local_bytes = stats.branch_local_bytes;

    if (options.share_fs_cache) {
        br->fs = std::make_unique<FsView>(next_view_++, pin.fs, pin.layer);
    } else {
        br->fs = std::make_unique<FsView>(next_view_++, pin.fs.deep_copy(), nullptr);
    }
    br->profile = profile;
    br->node = v;
    br->last_image = pin.image;
    br->last_handle = pin.handle;
    stats.wall_ns = now_ns() - t0;
    return br;
}

std::vector<BranchId> Engine::fork(VersionId v, std::size_t n, const SecurityProfile& profile,
                                   const ForkOptions& options, ForkReport* report) {
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "fork needs n >= 1");
    const auto t0 = now_ns();
    std::shared_ptr<const VersionPin> pin;
    std::vector<BranchId> ids;
    {
        std::lock_guard lock(mu_);
        auto it = pins_.find(v);
        if (it == pins_.end()) throw Error(ErrorCode::NotFound, "unknown version " + std::to_string(v));
        pin = it->second;
        std::size_t live_count = 0;
        for (const auto& [id, b] : branches_) {
            live_count += (b->status == BranchStatus::Running || b->status == BranchStatus::Frozen) ? 1 : 0;
        }
        if (live_count + n > config_.branch_cap) {
            throw Error(ErrorCode::OutOfRange, "fork of " + std::to_string(n) + " exceeds the branch cap");
        }
        for (std::size_t i = 0; i < n; ++i) ids.push_back(next_branch_++);
    }
    const auto copied_before = pages_->counters().bytes_copied;
    std::vector<std::unique_ptr<Branch>> built(n);
    std::vector<BranchForkStats> stats(n);
    std::vector<std::exception_ptr> errors(n);
    const auto count = static_cast<std::int64_t>(n);
    auto one = [&](std::int64_t i) {
        try {
            built[i] = build_from_pin(ids[i], v, *pin, profile, options, stats[i]);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    // No serialization point between siblings beyond page-store refcounts.
    if (options.policy == ExecPolicy::Parallel) {
#pragma omp parallel for schedule(dynamic, 1)
        for (std::int64_t i = 0; i < count; ++i) one(i);
    } else {
        for (std::int64_t i = 0; i < count; ++i) one(i);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (errors[i]) {
            for (auto& b : built) {
                if (b) release_branch(*b);
            }
            std::rethrow_exception(errors[i]);
        }
    }
    {
        std::lock_guard lock(mu_);
        for (auto& b : built) {
            tree_.set_branch({b->id, b->node, BranchStatus::Running, false});
            branches_.emplace(b->id, std::move(b));
        }
    }
    if (report) {
        report->branches = std::move(stats);
        report->bytes_copied = pages_->counters().bytes_copied - copied_before;
        for (const auto& s : report->branches) report->bytes_copied += s.pages_copied * kPageSize;
        report->wall_ns = now_ns() - t0;
    }
    return ids;
}

// --- rollback / discard ----------------------------------------------------------

void Engine::restore_locked(Branch& br, ImageId image) {
    const FlatImage flat = checkpoints_->flatten(image);
    const auto img = checkpoints_->get(image);
    const auto tree = ProcessTreeImage::deserialize(img->tree_image);
    const NamespaceId old_ns = br.ns;
    br.ns = namespaces_.create();
    std::vector<ProcessState> procs;
    for (auto& rec : sorted_records(reconstruct_tree(tree, br.ns, namespaces_))) procs.push_back({std::move(rec), {}});
    for (const auto& info : img->vmas) {
        ProcessState* p = nullptr;
        for (auto& ps : procs) {
            if (ps.record.local_pid == info.pid) p = &ps;
        }
        if (!p) throw Error(ErrorCode::BrokenChain, "image vma for a process missing from its tree");
        VmaMapping m;
        m.vma_id = info.vma_id;
        m.cls = info.cls;
        m.start = info.start;
        m.backing_file = info.backing_file;
        m.file_page_offset = info.file_page_offset;
        m.table = std::make_shared<PageTable>(*pages_, info.length);
        for (auto it = flat.lower_bound(SlotKey{info.pid, info.vma_id, 0});
             it != flat.end() && it->first.pid == info.pid && it->first.vma == info.vma_id; ++it) {
            m.table->install(it->first.slot, it->second);
        }
        p->vmas.push_back(std::move(m));
    }
    for (auto& p : procs) {
        std::sort(p.vmas.begin(), p.vmas.end(), [](const VmaMapping& a, const VmaMapping& b) { return a.vma_id < b.vma_id; });
    }
    br.procs = std::move(procs);
    namespaces_.release(old_ns);
    br.dirty.clear();
}

void Engine::restore_memory(ImageId image, BranchId b) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_running(br.status, b);
    auto conns = br.connections;
    restore_locked(br, image);
    br.connections.clear();
    restore_network(br, conns);
    br.last_image.reset();
    br.last_handle.reset();
}

void Engine::rollback(BranchId b, VersionId v) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_running(br.status, b);
    std::shared_ptr<const VersionPin> pin;
    {
        std::lock_guard elock(mu_);
        if (!tree_.contains(v)) throw Error(ErrorCode::NotFound, "unknown version " + std::to_string(v));
        if (!br.node || !tree_.is_ancestor(v, *br.node)) {
            throw Error(ErrorCode::InvalidArgument,
                        "version " + std::to_string(v) + " is not in the lineage of branch " + std::to_string(b));
        }
        pin = pins_.at(v);
    }
    // A pending checkpoint is waited for rather than read from its holders.
    if (pin->handle->wait() == CheckpointState::Failed) {
        throw Error(ErrorCode::StorageFailure, "checkpoint of version " + std::to_string(v) + " failed");
    }
    restore_locked(br, pin->image);
    restore_network(br, pin->connections);
    {
        std::vector<ProcessRecord> recs;
        for (const auto& p : br.procs) recs.push_back(p.record);
        auto part = classify_connections(pin->connections, recs);
        auto events = sever_external(part.external, b, recs, br.egress);
        for (std::size_t i = 0; i < br.procs.size(); ++i) br.procs[i].record = std::move(recs[i]);
        for (auto& e : events) log_event(br, std::move(e));
    }
    br.fs = std::make_unique<FsView>(next_view_++, pin->fs, pin->layer);
    br.gui = rebuild_gui(pin->gui);
    br.node = v;
    br.last_image = pin->image;
    br.last_handle = pin->handle;
    set_status(br, br.status);
}

void Engine::release_branch(Branch& br) {
    br.procs.clear();
    br.fs.reset();
    br.gui.clear();
    br.connections.clear();
    br.dirty.clear();
    if (br.ns) namespaces_.release(br.ns);
    br.ns = 0;
}

void Engine::discard(BranchId b) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_live(br.status, b);
    if (br.status == BranchStatus::Frozen) resume_locked(br);
    release_branch(br);
    set_status(br, BranchStatus::Discarded);
    std::lock_guard elock(mu_);
    if (user_ == b) user_.reset();
}

// --- commit ------------------------------------------------------------------------

PromotionRecord Engine::commit_promote(BranchId b) {
    std::optional<BranchId> user;
    {
        std::lock_guard lock(mu_);
        user = user_;
    }
    if (!user) throw Error(ErrorCode::InvalidState, "no user workspace to promote into");
    if (*user == b) throw Error(ErrorCode::InvalidArgument, "cannot promote the user workspace into itself");
    auto& br = live(b);
    auto& u = live(*user);
    std::scoped_lock lock(br.mu, u.mu);
    require_running(br.status, b);
    require_running(u.status, *user);

    PromotionRecord rec;
    rec.promoted = b;
    rec.user = *user;
    std::vector<ProcessState> next;
    std::set<LocalPid> seen;
    for (auto& p : br.procs) {
        seen.insert(p.record.local_pid);
        if (auto* existing = u.proc(p.record.local_pid)) {
            // Same process, new address space and register state.
            const HostPid host = existing->record.host_pid;
            ProcessState ps{std::move(p.record), std::move(p.vmas)};
            ps.record.host_pid = host;
            next.push_back(std::move(ps));
            rec.replaced.push_back(next.back().record.local_pid);
        } else {
            namespaces_.claim_local_pid(u.ns, p.record.local_pid);
            next.push_back({std::move(p.record), std::move(p.vmas)});
            rec.created.push_back(next.back().record.local_pid);
        }
    }
    for (const auto& p : u.procs) {
        if (!seen.count(p.record.local_pid)) rec.removed.push_back(p.record.local_pid);
    }
    u.procs = std::move(next);
    br.procs.clear();

    auto layer = br.fs->seal(next_layer_++);
    u.fs = std::make_unique<FsView>(next_view_++, br.fs->version(), layer);
    for (const auto& c : br.connections) {
        if (c.kind != ConnectionKind::Internal) continue;
        for (auto port : {c.local.port, c.remote.port}) {
            if (!namespaces_.port_in_use(u.ns, port)) namespaces_.claim_port(u.ns, port);
        }
    }
    u.connections = std::move(br.connections);
    u.gui = std::move(br.gui);
    u.dirty.clear();
    u.last_image.reset();
    u.last_handle.reset();
    u.node = br.node;

    std::vector<OutboxEntry> held;
    for (auto& e : br.outbox) {
        if (!e.released) held.push_back(e);
    }
    br.outbox.clear();
    release_branch(br);
    br.status = BranchStatus::Promoted;
    std::lock_guard elock(mu_);
    tree_.set_branch({br.id, br.node, BranchStatus::Promoted, false});
    tree_.set_branch({u.id, u.node, u.status, true});
    held_.insert(held_.end(), held.begin(), held.end());
    promotions_.push_back(rec);
    return rec;
}

MergeReport Engine::commit_merge(const std::vector<BranchId>& ids, const MergePolicy& policy) {
    if (ids.empty()) throw Error(ErrorCode::InvalidArgument, "merge needs at least one branch");
    std::optional<BranchId> user;
    {
        std::lock_guard lock(mu_);
        user = user_;
    }
    if (!user) throw Error(ErrorCode::InvalidState, "no user workspace to merge into");
    std::vector<BranchId> order(ids.begin(), ids.end());
    std::sort(order.begin(), order.end());
    order.erase(std::unique(order.begin(), order.end()), order.end());
    if (std::find(order.begin(), order.end(), *user) != order.end()) {
        throw Error(ErrorCode::InvalidArgument, "the user workspace cannot be a merge source");
    }
    if (policy.volatile_from && std::find(order.begin(), order.end(), *policy.volatile_from) == order.end()) {
        throw Error(ErrorCode::InvalidArgument, "volatile state must come from a merged branch");
    }
    std::vector<BranchId> lock_order = order;
    lock_order.push_back(*user);
    std::sort(lock_order.begin(), lock_order.end());
    std::vector<std::unique_lock<std::mutex>> locks;
    for (auto id : lock_order) locks.emplace_back(live(id).mu);

    auto& u = live(*user);
    require_running(u.status, *user);
    std::vector<Branch*> srcs;
    std::vector<VersionId> nodes;
    for (auto id : order) {
        auto& br = live(id);
        require_running(br.status, id);
        if (!br.node) throw Error(ErrorCode::InvalidArgument, "branch " + std::to_string(id) + " has no version");
        srcs.push_back(&br);
        nodes.push_back(*br.node);
    }
    if (!u.node) throw Error(ErrorCode::InvalidArgument, "user workspace has no recorded version");
    nodes.push_back(*u.node);
    std::shared_ptr<const VersionPin> pin;
    MergeReport report;
    {
        std::lock_guard elock(mu_);
        auto lca = tree_.common_ancestor(nodes);
        if (!lca) throw Error(ErrorCode::InvalidArgument, "branches share no common ancestor version");
        report.ancestor = *lca;
        pin = pins_.at(*lca);
    }
    const auto& sensitive = policy.sensitive.empty() ? config_.sensitive_patterns : policy.sensitive;
    const FsVersion& base = pin->fs;

    for (const auto& [path, base_file] : base.files()) {
        if (!u.fs->version().has_file(path)) continue;
        const std::uint32_t npages = base_file.pages;
        // Per page: the distinct changed values and who made them.
        std::map<std::uint32_t, std::vector<std::pair<BranchId, PageContent>>> changes;
        std::set<BranchId> candidates;
        auto scan = [&](BranchId who, const FsVersion& ver) {
            const auto& f = ver.files().at(path);
            for (std::size_t e = 0; e < base_file.extents.size(); ++e) {
                if (f.extents[e] == base_file.extents[e]) continue;
                const auto first = static_cast<std::uint32_t>(e * kExtentPages);
                const auto last = std::min<std::uint32_t>(npages, first + kExtentPages);
                for (std::uint32_t pg = first; pg < last; ++pg) {
                    auto mine = ver.read_block(path, pg);
                    if (mine == base.read_block(path, pg)) continue;
                    changes[pg].emplace_back(who, std::move(mine));
                    if (who != u.id) candidates.insert(who);
                }
            }
        };
        scan(u.id, u.fs->version());
        for (auto* br : srcs) {
            if (br->fs->version().has_file(path)) scan(br->id, br->fs->version());
        }
        if (candidates.empty()) continue;

        bool conflict = false;
        for (const auto& [pg, list] : changes) {
            for (const auto& [who, content] : list) {
                if (!(content == list.front().second)) conflict = true;
            }
        }
        const bool is_sensitive = std::any_of(sensitive.begin(), sensitive.end(),
                                              [&](const std::string& pat) { return path_matches(pat, path); });
        std::optional<BranchId> winner;
        if (conflict || is_sensitive) {
            if (conflict) report.conflicted.push_back(path);
            if (is_sensitive) report.approval_gated.push_back(path);
            if (!policy.approve) {
                report.unresolved.push_back(path);
                continue;
            }
            MergeQuestion q{path, conflict, is_sensitive, {candidates.begin(), candidates.end()}};
            const auto ans = policy.approve(q);
            if (ans.choice == MergeChoice::Abort) {
                throw Error(ErrorCode::PolicyRejected, "merge of " + path + " rejected by policy");
            }
            if (ans.choice == MergeChoice::KeepUser) {
                report.unresolved.push_back(path);
                continue;
            }
            if (!candidates.count(ans.branch)) {
                throw Error(ErrorCode::InvalidArgument, "approval picked a branch that did not change " + path);
            }
            winner = ans.branch;
        }
        for (const auto& [pg, list] : changes) {
            const PageContent* chosen = nullptr;
            bool page_conflict = false;
            for (const auto& [who, content] : list) {
                if (!(content == list.front().second)) page_conflict = true;
            }
            if (page_conflict) {
                for (const auto& [who, content] : list) {
                    if (who == *winner) chosen = &content;
                }
                if (!chosen) continue; // winner left this page at the ancestor; user keeps theirs
            } else {
                chosen = &list.front().second;
            }
            if (u.fs->version().read_block(path, pg) == *chosen) continue;
            const auto bytes = chosen->bytes();
            u.fs->write(path, pg, 0, bytes);
            ++report.pages_applied;
        }
        report.merged.push_back(path);
    }

    if (policy.volatile_from) {
        auto& src = live(*policy.volatile_from);
        std::vector<ProcessState> next;
        for (const auto& p : src.procs) {
            ProcessState ps;
            ps.record = p.record;
            if (auto* existing = u.proc(p.record.local_pid)) {
                ps.record.host_pid = existing->record.host_pid;
            } else {
                namespaces_.claim_local_pid(u.ns, p.record.local_pid);
                ps.record.host_pid = namespaces_.allocate_host_pid();
            }
            for (const auto& m : p.vmas) {
                VmaMapping copy = m;
                copy.table = std::make_shared<PageTable>(*m.table);
                ps.vmas.push_back(std::move(copy));
            }
            next.push_back(std::move(ps));
        }
        u.procs = std::move(next);
        for (const auto& c : src.connections) {
            for (auto port : {c.local.port, c.remote.port}) {
                if (!namespaces_.port_in_use(u.ns, port)) namespaces_.claim_port(u.ns, port);
            }
        }
        u.connections = src.connections;
        u.gui = rebuild_gui(src.gui);
        u.dirty.clear();
        u.last_image.reset();
        u.last_handle.reset();
    }
    return report;
}

// --- branch operations ---------------------------------------------------------------

WriteOutcome Engine::write_page(BranchId b, LocalPid pid, VmaId vma, std::uint32_t slot, std::size_t offset,
                                std::span<const std::uint8_t> data) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_running(br.status, b);
    auto& m = br.vma(pid, vma);
    if (slot >= m.length()) throw Error(ErrorCode::OutOfRange, "slot out of range");
    if (offset + data.size() > kPageSize) throw Error(ErrorCode::OutOfRange, "write crosses the page boundary");
    auto& table = m.writable();
    WriteOutcome outcome;
    if (m.cls == MemoryClass::FileBacked && table.slot(slot).page == kNoPage) {
        // First touch of a private file mapping faults the page in from this branch's view.
        PageContent base;
        const auto fpage = m.file_page_offset + slot;
        if (m.backing_file && br.fs->version().has_file(*m.backing_file) &&
            fpage < br.fs->version().file_pages(*m.backing_file)) {
            base = br.fs->version().read_block(*m.backing_file, fpage);
        }
        table.install(slot, base.with_write(offset, data));
        outcome = WriteOutcome::Populated;
    } else {
        outcome = table.write(slot, offset, data);
    }
    br.dirty.insert(SlotKey{pid, vma, slot});
    return outcome;
}

std::optional<PageContent> Engine::read_page(BranchId b, LocalPid pid, VmaId vma, std::uint32_t slot) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_live(br.status, b);
    return br.vma(pid, vma).table->read(slot);
}

PageContent Engine::fs_read(BranchId b, const std::string& path, std::uint32_t page) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_live(br.status, b);
    return br.fs->read(path, page);
}

void Engine::fs_write(BranchId b, const std::string& path, std::uint32_t page, std::size_t offset,
                      std::span<const std::uint8_t> data) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_running(br.status, b);
    br.fs->write(path, page, offset, data);
}

void Engine::gui_paint(BranchId b, GuiBufferId id, std::uint32_t page, std::span<const std::uint8_t> data) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_running(br.status, b);
    for (auto& g : br.gui) {
        if (g.id != id) continue;
        if (page >= g.contents.size()) throw Error(ErrorCode::OutOfRange, "gui page out of range");
        g.contents[page] = g.contents[page].with_write(0, data);
        return;
    }
    throw Error(ErrorCode::NotFound, "no gui buffer " + std::to_string(id));
}

void Engine::transmit(BranchId b, ConnectionId c, std::span<const std::uint8_t> data) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_running(br.status, b);
    for (auto& conn : br.connections) {
        if (conn.id == c) {
            forkspace::transmit(conn, data);
            return;
        }
    }
    throw Error(ErrorCode::NotFound, "no connection " + std::to_string(c));
}

Decision Engine::access(BranchId b, const AccessEvent& event) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_live(br.status, b);
    AccessEvent e = event;
    e.branch = b;
    return enforce(br.profile, e, &br.audit);
}

bool Engine::guarded_fs_write(BranchId b, const std::string& path, std::uint32_t page, std::size_t offset,
                              std::span<const std::uint8_t> data) {
    AccessEvent e;
    e.kind = AccessKind::File;
    e.target = path;
    e.timestamp = clock_++;
    e.actor = Actor::Agent;
    if (access(b, e) == Decision::Deny) return false;
    fs_write(b, path, page, offset, data);
    return true;
}

std::optional<std::uint64_t> Engine::attempt_external(BranchId b, const std::string& description) {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_running(br.status, b);
    PolicyEvent e;
    e.detail = description;
    if (br.user) {
        // The user workspace is not speculative; its effects go out directly.
        const auto id = next_action_++;
        e.kind = PolicyEventKind::Released;
        e.detail = "direct " + description;
        log_event(br, std::move(e));
        std::lock_guard elock(mu_);
        released_.push_back({id, b, description, true});
        return std::nullopt;
    }
    switch (br.egress) {
    case EgressMode::Restricted:
        e.kind = PolicyEventKind::EgressDenied;
        log_event(br, std::move(e));
        return std::nullopt;
    case EgressMode::DelayedCommit:
    case EgressMode::RequireApproval: {
        const auto id = next_action_++;
        br.outbox.push_back({id, b, description, false});
        e.kind = br.egress == EgressMode::DelayedCommit ? PolicyEventKind::EgressQueued
                                                        : PolicyEventKind::EgressAwaitingApproval;
        e.detail = "action " + std::to_string(id) + " " + description;
        log_event(br, std::move(e));
        return id;
    }
    }
    return std::nullopt;
}

void Engine::release_external(std::uint64_t action_id) {
    std::lock_guard lock(mu_);
    for (auto it = held_.begin(); it != held_.end(); ++it) {
        if (it->action_id != action_id) continue;
        it->released = true;
        released_.push_back(*it);
        held_.erase(it);
        return;
    }
    for (const auto& [id, br] : branches_) {
        for (const auto& e : br->outbox) {
            if (e.action_id == action_id) {
                throw Error(ErrorCode::PolicyRejected, "action " + std::to_string(action_id) +
                                                           " belongs to an unpromoted branch");
            }
        }
    }
    throw Error(ErrorCode::NotFound, "unknown action " + std::to_string(action_id));
}

std::vector<OutboxEntry> Engine::outbox(BranchId b) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    return br.outbox;
}

std::vector<OutboxEntry> Engine::held_actions() const {
    std::lock_guard lock(mu_);
    return held_;
}

std::vector<OutboxEntry> Engine::released_actions() const {
    std::lock_guard lock(mu_);
    return released_;
}

std::vector<PolicyEvent> Engine::policy_events(BranchId b) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    return br.events;
}

std::vector<std::string> Engine::audit_lines(BranchId b) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    return br.audit.lines();
}

// --- audits and accounting -----------------------------------------------------------

RefcountAudit Engine::audit_refcounts() {
    daemon_->drain();
    std::lock_guard lock(mu_);
    std::set<const PageTable*> tables;
    for (const auto& [id, br] : branches_) {
        std::lock_guard bl(br->mu);
        for (const auto& p : br->procs) {
            for (const auto& m : p.vmas) tables.insert(m.table.get());
        }
    }
    for (const auto& [v, pin] : pins_) {
        for (const auto& [pid, vmas] : pin->memory) {
            for (const auto& m : vmas) tables.insert(m.table.get());
        }
    }
    std::unordered_map<PageId, std::uint64_t> expected;
    for (const auto* t : tables) {
        for (const auto& s : t->slots()) {
            if (s.page != kNoPage) ++expected[s.page];
        }
    }
    RefcountAudit a;
    pages_->for_each_live([&](PageId id, std::uint32_t refs) {
        ++a.pages_checked;
        a.actual_refs += refs;
        auto it = expected.find(id);
        if (it == expected.end()) {
            ++a.leaked;
        } else if (it->second != refs) {
            ++a.mismatches;
        }
    });
    for (const auto& [id, n] : expected) {
        a.expected_refs += n;
        if (pages_->refcount(id) == 0) ++a.mismatches;
    }
    a.ok = a.mismatches == 0 && a.leaked == 0 && a.expected_refs == a.actual_refs;
    return a;
}

RefcountAudit Engine::audit_extents() {
    std::lock_guard lock(mu_);
    std::unordered_map<ExtentId, std::uint64_t> expected;
    std::set<const PageCacheLayer*> layers;
    auto add_version = [&](const FsVersion& v) {
        for (const auto& [path, f] : v.files()) {
            for (auto e : f.extents) ++expected[e];
        }
    };
    auto add_chain = [&](const LayerPtr& head) {
        for (const PageCacheLayer* l = head.get(); l; l = l->parent().get()) {
            if (!layers.insert(l).second) break;
        }
    };
    for (const auto& [id, br] : branches_) {
        std::lock_guard bl(br->mu);
        if (!br->fs) continue;
        add_version(br->fs->version());
        add_chain(br->fs->head());
    }
    for (const auto& [v, pin] : pins_) {
        add_version(pin->fs);
        add_chain(pin->layer);
    }
    for (const auto* l : layers) {
        for (const auto& [key, e] : l->entries()) ++expected[e.extent];
    }
    RefcountAudit a;
    for (const auto& [id, refs] : extents_->refcounts()) {
        ++a.pages_checked;
        a.actual_refs += refs;
        auto it = expected.find(id);
        if (it == expected.end()) {
            ++a.leaked;
        } else if (it->second != refs) {
            ++a.mismatches;
        }
    }
    for (const auto& [id, n] : expected) a.expected_refs += n;
    a.ok = a.mismatches == 0 && a.leaked == 0 && a.expected_refs == a.actual_refs;
    return a;
}

Footprint Engine::footprint() const {
    std::lock_guard lock(mu_);
    Footprint f;
    f.page_bytes = pages_->live_pages() * kPageSize;
    std::set<const PageCacheLayer*> layers;
    auto add_chain = [&](const LayerPtr& head) {
        for (const PageCacheLayer* l = head.get(); l; l = l->parent().get()) {
            if (!layers.insert(l).second) break;
        }
    };
    std::uint64_t cached = 0;
    for (const auto& [id, br] : branches_) {
        std::lock_guard bl(br->mu);
        if (br->status != BranchStatus::Running && br->status != BranchStatus::Frozen) continue;
        f.bookkeeping_bytes += config_.branch_bookkeeping_bytes;
        f.gui_bytes += gui_pages(br->gui) * kPageSize;
        if (br->fs) {
            cached += br->fs->private_cached_pages();
            add_chain(br->fs->head());
        }
    }
    for (const auto& [v, pin] : pins_) add_chain(pin->layer);
    for (const auto* l : layers) cached += l->entries().size();
    f.cache_bytes = cached * kPageSize;
    return f;
}

VersionTree Engine::tree() const {
    std::lock_guard lock(mu_);
    VersionTree t = tree_;
    for (const auto& [v, h] : handles_by_version_) t.set_checkpoint(v, h->state());
    return t;
}

WorkspaceState Engine::version_state(VersionId v) const {
    std::shared_ptr<const VersionPin> pin;
    {
        std::lock_guard lock(mu_);
        auto it = pins_.find(v);
        if (it == pins_.end()) throw Error(ErrorCode::NotFound, "unknown version " + std::to_string(v));
        pin = it->second;
    }
    WorkspaceState ws;
    ws.processes = pin->processes;
    for (const auto& [pid, vmas] : pin->memory) {
        for (const auto& m : vmas) {
            MemoryRegion r;
            r.vma_id = m.vma_id;
            r.owner = pid;
            r.cls = m.cls;
            r.start = m.start;
            r.length = m.length();
            r.backing_file = m.backing_file;
            r.file_page_offset = m.file_page_offset;
            for (std::uint32_t i = 0; i < r.length; ++i) r.pages.push_back(m.table->read(i));
            ws.regions.push_back(std::move(r));
        }
    }
    ws.files = pin->fs.materialize();
    ws.connections = pin->connections;
    ws.gui_buffers = pin->gui;
    return ws;
}

CheckpointHandlePtr Engine::checkpoint(VersionId v) const {
    std::lock_guard lock(mu_);
    auto it = handles_by_version_.find(v);
    if (it == handles_by_version_.end()) throw Error(ErrorCode::NotFound, "unknown version " + std::to_string(v));
    return it->second;
}

ImageId Engine::image_of(VersionId v) const { return checkpoint(v)->image_id(); }

std::vector<PromotionRecord> Engine::promotions() const {
    std::lock_guard lock(mu_);
    return promotions_;
}

std::vector<LayerPtr> Engine::layer_heads() const {
    std::lock_guard lock(mu_);
    std::vector<LayerPtr> out;
    for (const auto& [id, br] : branches_) {
        std::lock_guard bl(br->mu);
        if (br->fs && br->fs->head()) out.push_back(br->fs->head());
    }
    for (const auto& [v, pin] : pins_) {
        if (pin->layer) out.push_back(pin->layer);
    }
    return out;
}

const FsView& Engine::fs_view(BranchId b) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    require_live(br.status, b);
    return *br.fs;
}

std::uint64_t Engine::branch_local_bytes(BranchId b) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    return br.local_bytes;
}

std::vector<ConnectionId> Engine::connections(BranchId b) const {
    auto& br = live(b);
    std::lock_guard lock(br.mu);
    std::vector<ConnectionId> out;
    for (const auto& c : br.connections) out.push_back(c.id);
    return out;
}

} // namespace forkspace
