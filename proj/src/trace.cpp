#include "forkspace/harness.hpp"
#include "forkspace/reference.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

namespace forkspace {

namespace {

constexpr std::array<std::pair<TraceOp, const char*>, 10> kOpNames{{
    {TraceOp::Fork, "fork"},
    {TraceOp::Write, "write"},
    {TraceOp::FsRead, "fs_read"},
    {TraceOp::FsWrite, "fs_write"},
    {TraceOp::Rollback, "rollback"},
    {TraceOp::Discard, "discard"},
    {TraceOp::Promote, "promote"},
    {TraceOp::Record, "record"},
    {TraceOp::ModelCall, "model_call"},
    {TraceOp::ExternalAttempt, "external"},
}};

TraceOp op_from(const std::string& s) {
    for (const auto& [op, name] : kOpNames) {
        if (s == name) return op;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown trace op " + s);
}

std::uint64_t now_ns() {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
            .count());
}

} // namespace

std::string_view to_string(TraceOp op) {
    for (const auto& [o, name] : kOpNames) {
        if (o == op) return name;
    }
    return "?";
}

void to_json(nlohmann::json& j, const TraceEvent& e) {
    j = nlohmann::json{{"step", e.step}, {"op", std::string(to_string(e.op))}, {"branch", e.branch}};
    switch (e.op) {
    case TraceOp::Fork: j["n"] = e.n; break;
    case TraceOp::Write:
        j["pid"] = e.pid;
        j["vma"] = e.vma;
        j["slot"] = e.slot;
        j["offset"] = e.offset;
        j["value"] = e.value;
        break;
    case TraceOp::FsRead:
    case TraceOp::FsWrite:
        j["path"] = e.path;
        j["page"] = e.slot;
        if (e.op == TraceOp::FsWrite) {
            j["offset"] = e.offset;
            j["value"] = e.value;
        }
        break;
    case TraceOp::Rollback: j["version"] = e.version; break;
    case TraceOp::ModelCall:
        if (e.latency_ms >= 0.0) j["latency_ms"] = e.latency_ms;
        break;
    case TraceOp::ExternalAttempt: j["path"] = e.path; break;
    default: break;
    }
}

void from_json(const nlohmann::json& j, TraceEvent& e) {
    e = {};
    e.step = j.value("step", std::uint64_t{0});
    e.op = op_from(j.at("op").get<std::string>());
    e.branch = j.value("branch", std::size_t{0});
    e.n = j.value("n", std::size_t{0});
    e.pid = j.value("pid", LocalPid{0});
    e.vma = j.value("vma", VmaId{0});
    e.slot = j.value("slot", j.value("page", std::uint32_t{0}));
    e.offset = j.value("offset", std::uint32_t{0});
    e.value = j.value("value", std::uint8_t{0});
    e.path = j.value("path", std::string{});
    e.version = j.value("version", std::size_t{0});
    e.latency_ms = j.value("latency_ms", -1.0);
    if (e.op == TraceOp::Fork && e.n == 0) throw Error(ErrorCode::InvalidArgument, "fork event needs n >= 1");
    if (e.offset + 8 > kPageSize) throw Error(ErrorCode::InvalidArgument, "write offset beyond the page");
}

void to_json(nlohmann::json& j, const Trace& t) {
    j = nlohmann::json{{"seed", t.seed}, {"kind", t.kind}, {"workspace", t.workspace}, {"events", t.events}};
}

void from_json(const nlohmann::json& j, Trace& t) {
    t = {};
    t.seed = j.value("seed", std::uint64_t{0});
    t.kind = j.value("kind", std::string("custom"));
    t.workspace = j.at("workspace").get<WorkspaceSpec>();
    t.events = j.at("events").get<std::vector<TraceEvent>>();
}

Trace load_trace_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorCode::NotFound, "cannot open trace " + file.string());
    try {
        return nlohmann::json::parse(in).get<Trace>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("malformed trace: ") + e.what());
    }
}

void save_trace_file(const std::filesystem::path& file, const Trace& t) {
    std::ofstream out(file);
    if (!out) throw Error(ErrorCode::StorageFailure, "cannot write " + file.string());
    out << nlohmann::json(t).dump(1) << '\n';
}

WorkspaceSpec trace_workspace(std::uint64_t seed) {
    WorkspaceSpec s;
    s.processes = 6;
    s.tree_seed = seed;
    s.anon_bytes = 64 * kPageSize;
    s.file_backed_bytes = 8 * kPageSize;
    s.shared_bytes = 4 * kPageSize;
    s.vmas_per_process = 2;
    s.file_manifest = {{"/usr/lib/libapp.so", 8 * kPageSize},
                       {"/home/user/doc.txt", 4 * kPageSize},
                       {"/home/user/.ssh/known_hosts", kPageSize}};
    s.internal_connections = 2;
    s.external_connections = 2;
    s.gui_buffers = 1;
    s.gui_buffer_bytes = 2 * kPageSize;
    s.sparse_fraction = 0.25;
    return s;
}

// --- generator ----------------------------------------------------------------

namespace {

struct Layout {
    struct Region {
        LocalPid pid;
        VmaId vma;
        std::uint32_t length;
    };
    std::vector<Region> regions;
    std::vector<std::pair<std::string, std::uint32_t>> files;
};

Layout layout_of(const WorkspaceState& ws) {
    Layout l;
    for (const auto& r : ws.regions) {
        if (r.length > 0) l.regions.push_back({r.owner, r.vma_id, r.length});
    }
    for (const auto& [path, pages] : ws.files) {
        if (!pages.empty()) l.files.emplace_back(path, static_cast<std::uint32_t>(pages.size()));
    }
    return l;
}

/// Lineage bookkeeping mirrored from the engine so generated events stay valid.
struct GenState {
    std::vector<std::optional<std::size_t>> node;
    std::vector<bool> running;
    std::vector<std::optional<std::size_t>> parent;

    std::size_t record(std::size_t b) {
        parent.push_back(node[b]);
        node[b] = parent.size() - 1;
        return *node[b];
    }
    std::vector<std::size_t> fork(std::size_t b, std::size_t n) {
        const auto v = record(b);
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < n; ++i) {
            node.push_back(v);
            running.push_back(true);
            out.push_back(node.size() - 1);
        }
        return out;
    }
    std::vector<std::size_t> lineage(std::size_t b) const {
        std::vector<std::size_t> out;
        for (auto n = node[b]; n; n = parent[*n]) out.push_back(*n);
        return out;
    }
    std::vector<std::size_t> live() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < running.size(); ++i) {
            if (running[i]) out.push_back(i);
        }
        return out;
    }
};

struct Gen {
    std::mt19937_64 rng;
    Layout layout;
    GenState st;
    Trace trace;

    std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

    void emit(TraceEvent e) {
        e.step = trace.events.size();
        trace.events.push_back(std::move(e));
    }
    void write(std::size_t b) {
        const auto& r = layout.regions[pick(layout.regions.size())];
        TraceEvent e;
        e.op = TraceOp::Write;
        e.branch = b;
        e.pid = r.pid;
        e.vma = r.vma;
        e.slot = static_cast<std::uint32_t>(pick(r.length));
        e.offset = static_cast<std::uint32_t>(pick(kPageSize / 8) * 8);
        e.value = static_cast<std::uint8_t>(1 + pick(255));
        emit(e);
    }
    void fs(std::size_t b, bool write) {
        const auto& [path, pages] = layout.files[pick(layout.files.size())];
        TraceEvent e;
        e.op = write ? TraceOp::FsWrite : TraceOp::FsRead;
        e.branch = b;
        e.path = path;
        e.slot = static_cast<std::uint32_t>(pick(pages));
        e.offset = static_cast<std::uint32_t>(pick(kPageSize / 8) * 8);
        e.value = static_cast<std::uint8_t>(1 + pick(255));
        if (!write) {
            e.offset = 0;
            e.value = 0;
        }
        emit(e);
    }
    void model(std::size_t b) {
        TraceEvent e;
        e.op = TraceOp::ModelCall;
        e.branch = b;
        emit(e);
    }
    std::vector<std::size_t> fork(std::size_t b, std::size_t n) {
        TraceEvent e;
        e.op = TraceOp::Fork;
        e.branch = b;
        e.n = n;
        emit(e);
        return st.fork(b, n);
    }
    void simple(TraceOp op, std::size_t b) {
        TraceEvent e;
        e.op = op;
        e.branch = b;
        if (op == TraceOp::ExternalAttempt) e.path = "https://example.test/api";
        emit(e);
        if (op == TraceOp::Record) st.record(b);
        if (op == TraceOp::Discard) st.running[b] = false;
        if (op == TraceOp::Promote) {
            st.running[b] = false;
            st.node[0] = st.node[b];
        }
    }
    void rollback(std::size_t b, std::size_t v) {
        TraceEvent e;
        e.op = TraceOp::Rollback;
        e.branch = b;
        e.version = v;
        emit(e);
        st.node[b] = v;
    }
    /// Per-step agent work on one branch: observe, decide, act.
    void step(std::size_t b) {
        model(b);
        if (pick(3) == 0) {
            fs(b, true);
        } else {
            write(b);
        }
    }
};

void gen_random(Gen& g, const TraceShape& shape) {
    while (g.trace.events.size() < shape.events) {
        const auto live = g.st.live();
        const auto b = live[g.pick(live.size())];
        const auto roll = g.pick(100);
        const std::size_t room = shape.max_branches > live.size() ? shape.max_branches - live.size() : 0;
        if (roll < 38) {
            g.write(b);
        } else if (roll < 52) {
            g.fs(b, true);
        } else if (roll < 62) {
            g.fs(b, false);
        } else if (roll < 66) {
            TraceEvent e;
            e.op = TraceOp::ModelCall;
            e.branch = b;
            e.latency_ms = 1.0;
            g.emit(e);
        } else if (roll < 73) {
            g.simple(TraceOp::Record, b);
        } else if (roll < 80) {
            if (room > 0) g.fork(b, 1 + g.pick(std::min<std::size_t>(room, 3)));
        } else if (roll < 88) {
            const auto lin = g.st.lineage(b);
            if (!lin.empty()) g.rollback(b, lin[g.pick(lin.size())]);
        } else if (roll < 92) {
            if (b != 0) g.simple(TraceOp::Discard, b);
        } else if (roll < 95) {
            if (b != 0 && g.st.running[0]) g.simple(TraceOp::Promote, b);
        } else {
            g.simple(TraceOp::ExternalAttempt, b);
        }
    }
}

void gen_best_of_n(Gen& g, const TraceShape& shape) {
    g.model(0);
    const auto kids = g.fork(0, shape.width);
    for (std::size_t s = 0; s < shape.steps; ++s) {
        for (auto k : kids) g.step(k);
    }
    g.model(0); // judge
    g.simple(TraceOp::Promote, kids[g.pick(kids.size())]);
    for (auto k : kids) {
        if (g.st.running[k]) g.simple(TraceOp::Discard, k);
    }
}

void gen_beam(Gen& g, const TraceShape& shape) {
    std::size_t head = 0;
    const std::size_t rounds = std::max<std::size_t>(1, shape.steps / 2);
    for (std::size_t round = 0; round < rounds; ++round) {
        g.model(head);
        const auto kids = g.fork(head, shape.width);
        for (std::size_t s = 0; s < 2; ++s) {
            for (auto k : kids) g.step(k);
        }
        const auto keep = kids[g.pick(kids.size())];
        for (auto k : kids) {
            if (k != keep) g.simple(TraceOp::Discard, k);
        }
        if (head != 0) g.simple(TraceOp::Discard, head);
        head = keep;
    }
    g.simple(TraceOp::Promote, head);
}

void gen_rollback_heavy(Gen& g, const TraceShape& shape) {
    const auto b = g.fork(0, 1)[0];
    for (std::size_t s = 0; s < shape.steps; ++s) {
        g.simple(TraceOp::Record, b);
        g.step(b);
        g.step(b);
        const auto lin = g.st.lineage(b);
        g.rollback(b, lin[g.pick(lin.size())]);
    }
    g.simple(TraceOp::Promote, b);
}

void gen_model_only(Gen& g, const TraceShape& shape) {
    for (std::size_t s = 0; s < shape.steps; ++s) g.model(0);
}

} // namespace

Trace generate_trace(const std::string& kind, std::uint64_t seed, const TraceShape& shape, const WorkspaceSpec& spec) {
    Gen g{std::mt19937_64(seed), layout_of(build_workspace(spec)), {}, {}};
    g.st.node.push_back(std::nullopt);
    g.st.running.push_back(true);
    g.trace.seed = seed;
    g.trace.kind = kind;
    g.trace.workspace = spec;
    if (kind == "random") {
        gen_random(g, shape);
    } else if (kind == "best-of-n") {
        gen_best_of_n(g, shape);
    } else if (kind == "beam") {
        gen_beam(g, shape);
    } else if (kind == "rollback-heavy") {
        gen_rollback_heavy(g, shape);
    } else if (kind == "model-only") {
        gen_model_only(g, shape);
    } else {
        throw Error(ErrorCode::InvalidArgument, "unknown trace kind " + kind);
    }
    return g.trace;
}

// --- replay -------------------------------------------------------------------

namespace {

struct Replayer {
    const Trace& trace;
    const CloneStrategy& strategy;
    const HarnessConfig& cfg;
    bool verify;
    Engine engine;
    std::optional<ReferenceModel> ref;
    std::vector<BranchId> ids;
    std::vector<VersionId> versions;
    std::vector<double> clock;
    ReplayResult res;
    double processes = 0;
    double pages = 0;

    BranchId id(std::size_t b, std::uint64_t step) const {
        if (b >= ids.size()) {
            throw Error(ErrorCode::InvalidArgument, "step " + std::to_string(step) + ": unknown branch " + std::to_string(b));
        }
        return ids[b];
    }

    void violation(std::string note) {
        ++res.violations;
        if (res.violation_notes.size() < 20) res.violation_notes.push_back(std::move(note));
    }

    void check_all(std::uint64_t step) {
        ++res.verified_checks;
        for (std::size_t b = 0; b < ids.size(); ++b) {
            if (!ref->is_running(b)) continue;
            const auto d = diff(engine.snapshot(ids[b]), ref->state(b));
            for (const auto& e : d.entries) {
                violation("step " + std::to_string(step) + " branch " + std::to_string(b) + ": " +
                          std::string(to_string(e.kind)) + " " + e.location);
            }
        }
    }

    double restore_cost() const {
        const auto& c = cfg.cost;
        const double managed = static_cast<double>(engine.live_branches().size());
        if (strategy.cow_memory) return c.namespace_setup + c.reconstruct_per_process * processes + pages * c.pte_per_page;
        return c.namespace_setup + c.meta_per_process_workspace * processes * managed + pages * c.copy_per_page;
    }

    void apply(const TraceEvent& e) {
        const auto b = id(e.branch, e.step);
        // Indexed, not a reference: Fork grows `clock`.
        const std::size_t me = e.branch;
        const std::array<std::uint8_t, 8> bytes{e.value, e.value, e.value, e.value, e.value, e.value, e.value, e.value};
        switch (e.op) {
        case TraceOp::Fork: {
            auto r = clone(strategy, engine, b, e.n, cfg.cost);
            versions.push_back(r.version);
            const double start = clock[me];
            for (auto k : r.branches) {
                ids.push_back(k);
                clock.push_back(start + r.cost.critical_path);
            }
            clock[me] += r.cost.freeze + r.cost.dump_on_path;
            ++res.forks;
            res.clone_ms += r.cost.critical_path;
            res.bytes_copied += r.cost.bytes_copied;
            res.pte_installs += r.cost.pte_installs;
            if (ref) {
                const auto v = ref->record(e.branch);
                ref->fork(v, e.n);
            }
            break;
        }
        case TraceOp::Record: {
            const auto rec = engine.record_version(b, strategy.async_dump ? DumpMode::Async : DumpMode::Sync);
            versions.push_back(rec.version);
            double cost = cfg.cost.freeze_fixed + cfg.cost.freeze_per_process * static_cast<double>(rec.processes);
            if (!strategy.async_dump) {
                cost += static_cast<double>(engine.checkpoints().get(rec.image)->pages.size()) * cfg.cost.dump_per_page;
            }
            clock[me] += cost;
            if (ref) ref->record(e.branch);
            break;
        }
        case TraceOp::Write:
            engine.write_page(b, e.pid, e.vma, e.slot, e.offset, bytes);
            clock[me] += cfg.op_ms;
            if (ref) ref->write_page(e.branch, e.pid, e.vma, e.slot, e.offset, bytes);
            break;
        case TraceOp::FsWrite:
            engine.fs_write(b, e.path, e.slot, e.offset, bytes);
            clock[me] += cfg.op_ms;
            if (ref) ref->fs_write(e.branch, e.path, e.slot, e.offset, bytes);
            break;
        case TraceOp::FsRead: {
            const auto got = engine.fs_read(b, e.path, e.slot);
            clock[me] += cfg.op_ms;
            if (ref) {
                const auto& files = ref->state(e.branch).files;
                auto f = files.find(e.path);
                if (f == files.end() || e.slot >= f->second.size() || !(f->second[e.slot] == got)) {
                    violation("step " + std::to_string(e.step) + ": fs_read mismatch on " + e.path);
                }
            }
            break;
        }
        case TraceOp::Rollback: {
            if (e.version >= versions.size()) {
                throw Error(ErrorCode::InvalidArgument, "step " + std::to_string(e.step) + ": unknown version");
            }
            engine.rollback(b, versions[e.version]);
            clock[me] += restore_cost();
            if (ref) ref->rollback(e.branch, e.version);
            break;
        }
        case TraceOp::Discard:
            engine.discard(b);
            clock[me] += cfg.op_ms;
            if (ref) ref->discard(e.branch);
            break;
        case TraceOp::Promote: {
            engine.commit_promote(b);
            // The user sees the result once the promoted branch's work is done.
            clock[0] = std::max(clock[0], clock[me]) + cfg.op_ms;
            if (ref) ref->promote(e.branch);
            break;
        }
        case TraceOp::ModelCall: {
            const double d = e.latency_ms >= 0.0 ? e.latency_ms : cfg.model_call_ms;
            clock[me] += d;
            res.model_ms += d;
            break;
        }
        case TraceOp::ExternalAttempt:
            engine.attempt_external(b, e.path);
            clock[me] += cfg.op_ms;
            break;
        }
    }
};

} // namespace

ReplayResult replay(const Trace& trace, const CloneStrategy& strategy, const HarnessConfig& config, bool verify) {
    const auto t0 = now_ns();
    const auto ws = build_workspace(trace.workspace);
    Replayer r{trace, strategy, config, verify, Engine{}, std::nullopt, {}, {}, {}, {}, 0, 0};
    r.processes = static_cast<double>(ws.processes.size());
    r.pages = static_cast<double>(ws.page_count());
    r.ids.push_back(r.engine.create_branch(ws));
    r.clock.push_back(0.0);
    if (verify) r.ref.emplace(ws);
    r.res.strategy = strategy.name;
    r.res.seed = trace.seed;
    std::uint64_t expected_step = 0;
    for (const auto& e : trace.events) {
        if (e.step != expected_step++) {
            throw Error(ErrorCode::InvalidArgument, "trace steps must be consecutive from 0");
        }
        try {
            r.apply(e);
        } catch (const Error& err) {
            throw Error(ErrorCode::InvalidArgument,
                        "step " + std::to_string(e.step) + " (" + std::string(to_string(e.op)) + "): " + err.what());
        }
        r.res.peak_live = std::max(r.res.peak_live, r.engine.live_branches().size());
        if (verify && config.verify_every > 0 && (e.step + 1) % config.verify_every == 0) r.check_all(e.step);
    }
    if (verify) {
        r.check_all(trace.events.size());
        if (!r.engine.audit_refcounts().ok) r.violation("page refcount audit failed");
        if (!r.engine.audit_extents().ok) r.violation("extent refcount audit failed");
    }
    r.res.events = trace.events.size();
    r.res.branches = r.ids.size();
    r.res.end_to_end_ms = *std::max_element(r.clock.begin(), r.clock.end());
    r.res.footprint_bytes = r.engine.footprint().total();
    r.res.wall_ns = now_ns() - t0;
    return r.res;
}

std::string replay_csv_header() {
    return "experiment,strategy,seed,events,branches,peak_live,forks,end_to_end_ms,clone_ms,model_ms,bytes_copied,"
           "pte_installs,footprint_bytes,verified_checks,violations,wall_ns,config_hash";
}

std::string replay_csv_row(const ReplayResult& r, const std::string& config_hash) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "replay,%s,%llu,%zu,%zu,%zu,%zu,%.4f,%.4f,%.4f,%llu,%llu,%llu,%zu,%zu,%llu,%s",
                  r.strategy.c_str(), static_cast<unsigned long long>(r.seed), r.events, r.branches, r.peak_live, r.forks,
                  r.end_to_end_ms, r.clone_ms, r.model_ms, static_cast<unsigned long long>(r.bytes_copied),
                  static_cast<unsigned long long>(r.pte_installs), static_cast<unsigned long long>(r.footprint_bytes),
                  r.verified_checks, r.violations, static_cast<unsigned long long>(r.wall_ns), config_hash.c_str());
    return buf;
}

} // namespace forkspace
