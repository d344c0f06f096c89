// Acceptance run: one PASS/FAIL line per criterion, details indented below it.
// Exit status is nonzero when any criterion fails.

#include "fixtures.hpp"

#include "forkspace/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

using namespace forkspace;
using forkspace::testing::marker;
using forkspace::testing::small_spec;

namespace {

// Pinned tolerances.
constexpr std::size_t kOracleTraces = 1000;
constexpr std::size_t kOracleMaxEvents = 10000;
constexpr std::size_t kOracleMinEvents = 100;
constexpr double kOracleBudgetSec = 300.0;
constexpr std::size_t kHolderRuns = 100;
constexpr double kScaleMinSpeedup = 3.0;
constexpr double kScaleMaxFastFootprint = 1.3;
constexpr double kScaleMinEagerFootprint = 16.0;
constexpr double kLayerFlatTolerance = 0.10;
constexpr double kLayerMinR2 = 0.9;
constexpr std::size_t kLayerMaxDepth = 50;
constexpr std::size_t kIsolationPairs = 10000;
constexpr std::size_t kUniverseSyscalls = 400;
constexpr std::size_t kHumanSyscalls = 100;

int failures = 0;
std::string head, pending;

// Output is buffered so details print under their criterion line.
void line(int id, bool ok, const std::string& what) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "criterion %2d: %s  %s\n", id, ok ? "PASS" : "FAIL", what.c_str());
    head = buf;
    failures += ok ? 0 : 1;
}

void flush() {
    std::printf("%s%s", head.c_str(), pending.c_str());
    std::fflush(stdout);
    head.clear();
    pending.clear();
}

template <typename... A>
void detail(const char* fmt, A... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt, args...);
    pending += std::string("    ") + buf + "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

FlatImage flat_of(const WorkspaceState& ws) {
    FlatImage out;
    for (const auto& r : ws.regions) {
        for (std::uint32_t s = 0; s < r.length; ++s) {
            if (r.pages[s]) out.emplace(SlotKey{r.owner, r.vma_id, s}, *r.pages[s]);
        }
    }
    return out;
}

double rel_spread(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *lo > 0.0 ? (*hi - *lo) / *lo : (*hi == *lo ? 0.0 : 1e9);
}

// --- 1 -----------------------------------------------------------------------

void oracle_equivalence() {
    const auto t0 = std::chrono::steady_clock::now();
    HarnessConfig cfg;
    std::size_t total_events = 0, violations = 0, checks = 0, max_branches = 0, bad_traces = 0;
    std::string first_note;
    std::mt19937_64 rng(20240601);
    for (std::size_t i = 0; i < kOracleTraces; ++i) {
        const auto seed = rng();
        TraceShape shape;
        shape.events = kOracleMinEvents + rng() % (kOracleMaxEvents - kOracleMinEvents + 1);
        shape.max_branches = 8;
        shape.width = 2 + rng() % 3;
        const auto trace = generate_trace("random", seed, shape, trace_workspace(seed));
        const auto r = replay(trace, CloneStrategy::tclone(), cfg, true);
        total_events += r.events;
        violations += r.violations;
        checks += r.verified_checks;
        max_branches = std::max(max_branches, r.peak_live);
        if (r.violations) {
            ++bad_traces;
            if (first_note.empty() && !r.violation_notes.empty()) first_note = r.violation_notes.front();
        }
    }
    const double sec = seconds_since(t0);
    line(1, violations == 0 && sec < kOracleBudgetSec && max_branches <= 8,
         "oracle equivalence over randomized traces");
    detail("%zu traces, %zu events, %zu oracle comparisons, peak %zu live branches, %zu violations in %zu traces, %.1f s (budget %.0f s)",
           kOracleTraces, total_events, checks, max_branches, violations, bad_traces, sec, kOracleBudgetSec);
    if (!first_note.empty()) detail("first violation: %s", first_note.c_str());
}

// --- 2 -----------------------------------------------------------------------

void zero_copy_fork() {
    Engine e;
    const auto ws = build_workspace(WorkspaceSpec::chromium_scale());
    const auto src = e.create_branch(ws);
    const auto before = e.pages().counters();
    const auto rec = e.record_version(src);
    ForkReport report;
    e.fork(rec.version, 4, {}, {}, &report);
    const auto after = e.pages().counters();
    e.daemon().drain();
    const bool zero = report.bytes_copied == 0 && after.bytes_copied == before.bytes_copied &&
                      rec.freeze_bytes_copied == 0 && rec.freeze_allocations == 0;

    std::vector<double> counts, ops, holders, bytes, allocs, ptes;
    std::vector<std::uint64_t> walls;
    for (std::uint64_t pages : {1000ull, 10000ull, 100000ull, 1000000ull}) {
        auto spec = WorkspaceSpec::chromium_scale();
        spec.anon_bytes = pages * kPageSize;
        Engine f;
        const auto b = f.create_branch(build_workspace(spec));
        const auto r = f.record_version(b);
        f.daemon().drain();
        counts.push_back(static_cast<double>(pages));
        ops.push_back(static_cast<double>(r.freeze_ops));
        holders.push_back(static_cast<double>(r.holder_ops));
        bytes.push_back(static_cast<double>(r.freeze_bytes_copied));
        allocs.push_back(static_cast<double>(r.freeze_allocations));
        ptes.push_back(static_cast<double>(r.freeze_pte_installs));
        walls.push_back(r.wall_ns);
    }
    const auto ops_fit = fit_linear(counts, ops);
    const auto holder_fit = fit_linear(counts, holders);
    const bool flat = ops_fit.slope == 0.0 && holder_fit.slope == 0.0 && ops.front() == ops.back() &&
                      holders.front() == holders.back() &&
                      std::all_of(bytes.begin(), bytes.end(), [](double x) { return x == 0.0; }) &&
                      std::all_of(allocs.begin(), allocs.end(), [](double x) { return x == 0.0; }) &&
                      std::all_of(ptes.begin(), ptes.end(), [](double x) { return x == 0.0; });
    line(2, zero && flat, "zero-copy fork and page-count-independent freeze");
    detail("chromium fixture: %zu processes, %llu pages, fork(4) bytes_copied=%llu, freeze allocations=%llu",
           ws.processes.size(), static_cast<unsigned long long>(ws.page_count()),
           static_cast<unsigned long long>(report.bytes_copied),
           static_cast<unsigned long long>(rec.freeze_allocations));
    detail("freeze ops at 1e3..1e6 anon pages: %.0f %.0f %.0f %.0f (slope %.3g), holder ops slope %.3g",
           ops[0], ops[1], ops[2], ops[3], ops_fit.slope, holder_fit.slope);
    detail("freeze wall ns (informational): %llu %llu %llu %llu", static_cast<unsigned long long>(walls[0]),
           static_cast<unsigned long long>(walls[1]), static_cast<unsigned long long>(walls[2]),
           static_cast<unsigned long long>(walls[3]));
}

// --- 3 -----------------------------------------------------------------------

void holder_consistency() {
    std::mt19937_64 rng(77);
    std::size_t ok_runs = 0, pages_written = 0;
    for (std::size_t run = 0; run < kHolderRuns; ++run) {
        auto spec = small_spec(rng());
        spec.anon_bytes = (32 + rng() % 256) * kPageSize;
        spec.processes = 2 + rng() % 8;
        spec.sparse_fraction = (rng() % 4) * 0.1;
        Engine e;
        const auto b = e.create_branch(build_workspace(spec));
        const auto frozen = e.snapshot(b);
        e.daemon().stall();
        const auto rec = e.record_version(b, DumpMode::Async);
        const bool pending = rec.handle->state() == CheckpointState::Pending;
        const auto m = marker(static_cast<std::uint8_t>(1 + run % 250));
        for (const auto& r : frozen.regions) {
            for (std::uint32_t s = 0; s < r.length; ++s) {
                e.write_page(b, r.owner, r.vma_id, s, rng() % (kPageSize - 8), m);
                ++pages_written;
            }
        }
        e.daemon().unstall();
        const bool durable = rec.handle->wait() == CheckpointState::Durable;
        const bool equal = durable && e.checkpoints().flatten(rec.image) == flat_of(frozen);
        ok_runs += pending && equal ? 1 : 0;
    }
    line(3, ok_runs == kHolderRuns, "snapshot holders keep the frozen state under full overwrite");
    detail("%zu/%zu runs bit-identical, %zu pages overwritten while the dump daemon was stalled", ok_runs,
           kHolderRuns, pages_written);
}

// --- 4 -----------------------------------------------------------------------

void incremental_checkpoints() {
    WorkspaceSpec spec;
    spec.processes = 8;
    spec.anon_bytes = 200000 * kPageSize;
    spec.vmas_per_process = 2;
    const auto ws = build_workspace(spec);
    std::vector<SlotKey> anon;
    for (const auto& r : ws.regions) {
        if (r.cls != MemoryClass::Anonymous) continue;
        for (std::uint32_t s = 0; s < r.length; ++s) anon.push_back({r.owner, r.vma_id, s});
    }
    bool all = true;
    std::mt19937_64 rng(4);
    for (std::size_t k : {std::size_t{0}, std::size_t{1}, std::size_t{1000}, std::size_t{100000}}) {
        Engine e;
        const auto b = e.create_branch(ws);
        const auto base = e.record_version(b, DumpMode::Sync);
        std::shuffle(anon.begin(), anon.end(), rng);
        for (std::size_t i = 0; i < k; ++i) {
            e.write_page(b, anon[i].pid, anon[i].vma, anon[i].slot, 64, marker(static_cast<std::uint8_t>(1 + i % 255)));
        }
        const auto inc = e.record_version(b, DumpMode::Sync);
        const auto img = e.checkpoints().get(inc.image);
        const auto flat = e.checkpoints().flatten(inc.image);

        // Full-image oracle: an unchained dump of the same state in a fresh engine.
        Engine o;
        const auto ob = o.create_branch(e.snapshot(b));
        const auto full = o.record_version(ob, DumpMode::Sync);
        const auto oracle = o.checkpoints().flatten(full.image);
        const bool ok = inc.chained && img->parent == base.image && img->pages.size() == k && flat == oracle &&
                        o.checkpoints().chain_length(full.image) == 1;
        all = all && ok;
        detail("k=%zu: chained=%d records=%zu chain=%zu flatten==full:%d", k, inc.chained ? 1 : 0,
               img->pages.size(), e.checkpoints().chain_length(inc.image), flat == oracle ? 1 : 0);
    }
    line(4, all, "incremental images carry exactly the dirty pages");
}

// --- 5 -----------------------------------------------------------------------

void scalability() {
    HarnessConfig cfg;
    const auto rows = run_scalability(16, cfg);
    auto find = [&](const std::string& s, std::size_t n) -> const ScalabilityRow& {
        for (const auto& r : rows) {
            if (r.strategy == s && r.n == n) return r;
        }
        throw Error(ErrorCode::NotFound, "missing scalability row");
    };
    const auto& fast16 = find("tclone", 16);
    const auto& fast2 = find("tclone", 2);
    const auto& eager16 = find("criu", 16);
    const bool ok = fast16.speedup_vs_criu >= kScaleMinSpeedup && fast16.speedup_vs_criu > fast2.speedup_vs_criu &&
                    fast16.footprint_ratio < kScaleMaxFastFootprint &&
                    eager16.footprint_ratio >= kScaleMinEagerFootprint;
    line(5, ok, "clone latency gap and footprint at 16 clones");
    detail("speedup vs criu model: n=2 %.2fx, n=16 %.2fx (need >= %.1fx and growing)", fast2.speedup_vs_criu,
           fast16.speedup_vs_criu, kScaleMinSpeedup);
    detail("footprint at n=16, 1%% divergence: fast %.3fx base, eager %.2fx base", fast16.footprint_ratio,
           eager16.footprint_ratio);

    // End to end on a best-of-4 trace; informational.
    TraceShape shape;
    for (const auto& [name, spec] : {std::pair<const char*, WorkspaceSpec>{"small", trace_workspace(3)},
                                     {"browser-scale", cfg.ablation_workspace}}) {
        const auto t = generate_trace("best-of-n", 3, shape, spec);
        const auto a = replay(t, CloneStrategy::criu(), cfg, false);
        const auto b = replay(t, CloneStrategy::tclone(), cfg, false);
        detail("best-of-4 end to end, %s workspace: criu %.0f, fast %.0f, ratio %.2fx", name, a.end_to_end_ms,
               b.end_to_end_ms, a.end_to_end_ms / b.end_to_end_ms);
    }
}

// --- 6 -----------------------------------------------------------------------

void ablation() {
    const auto rows = run_ablation(HarnessConfig{});
    bool ok = rows.size() == 5;
    for (std::size_t i = 1; ok && i < rows.size(); ++i) {
        ok = rows[i].cost.critical_path <= rows[i - 1].cost.critical_path;
    }
    ok = ok && rows[3].cost.critical_path < rows[2].cost.critical_path &&
         rows[4].cost.critical_path < rows[3].cost.critical_path && rows[4].cost.dump_on_path == 0.0;
    line(6, ok, "ablation stages reduce the critical path");
    for (const auto& r : rows) {
        detail("%-18s critical_path %9.1f  dump_on_path %8.1f  bytes_copied %llu", r.strategy.name.c_str(),
               r.cost.critical_path, r.cost.dump_on_path, static_cast<unsigned long long>(r.cost.bytes_copied));
    }
}

// --- 7 -----------------------------------------------------------------------

void layer_depth() {
    HarnessConfig cfg;
    const auto rows = run_layer_bench(kLayerMaxDepth, cfg);
    bool ok = true;
    for (const std::string backend : {"overlay", "chain"}) {
        std::map<std::string, std::vector<double>> lat;
        std::vector<double> depth_ro;
        for (const auto& r : rows) {
            if (r.backend != backend) continue;
            lat[r.op].push_back(r.latency_ms);
            if (r.op == "read_ro") depth_ro.push_back(static_cast<double>(r.depth));
        }
        const auto fit = fit_linear(depth_ro, lat["read_ro"]);
        const double rw = rel_spread(lat["read_rw"]);
        const double wr = rel_spread(lat["write_rw"]);
        const double rep = rel_spread(lat["read_ro_repeat"]);
        const bool b_ok = depth_ro.size() == kLayerMaxDepth + 1 && rw < kLayerFlatTolerance &&
                          wr < kLayerFlatTolerance && rep < kLayerFlatTolerance && fit.r2 > kLayerMinR2 &&
                          fit.slope > 0.0;
        ok = ok && b_ok;
        detail("%s: read_ro slope %.4f ms/layer r2 %.4f; spread read_rw %.3f write_rw %.3f repeat %.3f",
               backend.c_str(), fit.slope, fit.r2, rw, wr, rep);
    }
    line(7, ok, "file operation latency versus layer depth");
}

// --- 8 -----------------------------------------------------------------------

void isolation() {
    const auto ws = build_workspace(small_spec(8));
    Engine e;
    const auto user = e.create_branch(ws);
    std::vector<BranchId> live{user};
    std::map<BranchId, std::vector<VersionId>> lineage;
    const auto first = e.record_version(user);
    lineage[user].push_back(first.version);
    for (auto b : e.fork(first.version, 3, {})) {
        live.push_back(b);
        lineage[b].push_back(first.version);
    }

    std::map<BranchId, WorkspaceState> cache;
    for (auto b : live) cache[b] = e.snapshot(b);

    std::map<LayerId, std::uint64_t> layer_hash;
    std::size_t layer_changes = 0;
    auto scan_layers = [&] {
        for (const auto& head : e.layer_heads()) {
            for (const PageCacheLayer* l = head.get(); l; l = l->parent().get()) {
                const auto h = l->content_hash();
                auto [it, fresh] = layer_hash.emplace(l->id(), h);
                if (!fresh && it->second != h) ++layer_changes;
            }
        }
    };

    std::size_t gui_shared = 0, fresh_externals = 0, interference = 0, forks = 0, ops = 0;
    auto check_gui = [&] {
        std::map<const void*, std::set<BranchId>> owners;
        for (auto b : live) {
            for (const auto& g : cache[b].gui_buffers) {
                for (const auto& p : g.contents) {
                    if (p.storage()) owners[p.storage()].insert(b);
                }
            }
        }
        for (const auto& [ptr, bs] : owners) gui_shared += bs.size() > 1 ? 1 : 0;
    };

    std::mt19937_64 rng(8);
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
    std::vector<std::pair<std::string, std::uint32_t>> files;
    for (const auto& [path, pages] : ws.files) files.emplace_back(path, static_cast<std::uint32_t>(pages.size()));

    for (std::size_t pair = 0; pair < kIsolationPairs; ++pair) {
        const auto a = live[pick(live.size())];
        auto obs = live[pick(live.size())];
        if (obs == a) obs = live[(std::find(live.begin(), live.end(), a) - live.begin() + 1) % live.size()];
        const auto m = marker(static_cast<std::uint8_t>(1 + pair % 255));
        const auto& wa = cache[a];
        switch (pick(8)) {
        case 0:
        case 1: {
            const auto& r = wa.regions[pick(wa.regions.size())];
            if (r.length) e.write_page(a, r.owner, r.vma_id, static_cast<std::uint32_t>(pick(r.length)), pick(kPageSize - 8), m);
            break;
        }
        case 2: {
            const auto& [path, pages] = files[pick(files.size())];
            e.fs_write(a, path, static_cast<std::uint32_t>(pick(pages)), pick(kPageSize - 8), m);
            break;
        }
        case 3: {
            const auto& [path, pages] = files[pick(files.size())];
            e.fs_read(a, path, static_cast<std::uint32_t>(pick(pages)));
            break;
        }
        case 4:
            if (!wa.gui_buffers.empty()) {
                const auto& g = wa.gui_buffers[pick(wa.gui_buffers.size())];
                e.gui_paint(a, g.id, static_cast<std::uint32_t>(pick(g.contents.size())), m);
            }
            break;
        case 5: {
            std::vector<ConnectionId> internal;
            for (const auto& c : wa.connections) {
                if (c.kind == ConnectionKind::Internal) internal.push_back(c.id);
            }
            if (!internal.empty()) e.transmit(a, internal[pick(internal.size())], m);
            break;
        }
        case 6: {
            auto& vs = lineage[a];
            const auto i = pick(vs.size());
            e.rollback(a, vs[i]);
            vs.resize(i + 1);
            break;
        }
        case 7: {
            const auto rec = e.record_version(a);
            lineage[a].push_back(rec.version);
            if (live.size() < 8 && pick(4) == 0) {
                ++forks;
                for (auto nb : e.fork(rec.version, 1, {})) {
                    live.push_back(nb);
                    lineage[nb] = lineage[a];
                    cache[nb] = e.snapshot(nb);
                    for (const auto& c : cache[nb].connections) fresh_externals += c.kind == ConnectionKind::External;
                }
            }
            break;
        }
        }
        ++ops;
        cache[a] = e.snapshot(a);
        const auto now = e.snapshot(obs);
        if (!diff(cache[obs], now).empty()) ++interference;
        cache[obs] = now;
        if (pair % 500 == 0) {
            scan_layers();
            check_gui();
        }
    }
    scan_layers();
    check_gui();
    e.daemon().drain();
    const auto audit = e.audit_refcounts();
    const bool ok = interference == 0 && layer_changes == 0 && gui_shared == 0 && fresh_externals == 0 && audit.ok;
    line(8, ok, "cross-branch isolation under fuzzed operation pairs");
    detail("%zu pairs, %zu live branches, %zu forks, %zu interfering diffs, %zu layers hashed (%zu changed), "
           "%zu shared gui pages, %zu externals in fresh branches, refcount audit %s",
           ops, live.size(), forks, interference, layer_hash.size(), layer_changes, gui_shared, fresh_externals,
           audit.ok ? "ok" : "FAILED");
}

// --- 9 -----------------------------------------------------------------------

void security() {
    // Soundness: a denied event never changes branch state.
    SecurityProfile p;
    p.apps = {"notes"};
    p.paths = {"/home/user/notes.txt"};
    p.syscalls = {"read", "write"};
    Engine e;
    const auto ws = build_workspace(small_spec());
    const auto u = e.create_branch(ws);
    const auto v = e.record_version(u).version;
    const auto b = e.fork(v, 1, p).front();
    std::mt19937_64 rng(9);
    std::size_t denied = 0, allowed = 0, mutated_on_deny = 0, unchanged_on_allow = 0;
    std::vector<std::pair<std::string, std::uint32_t>> files;
    for (const auto& [path, pages] : ws.files) files.emplace_back(path, static_cast<std::uint32_t>(pages.size()));
    for (int i = 0; i < 300; ++i) {
        const auto before = e.snapshot(b);
        const auto& [path, pages] = files[rng() % files.size()];
        const bool ok = e.guarded_fs_write(b, path, static_cast<std::uint32_t>(rng() % pages), 0,
                                           marker(static_cast<std::uint8_t>(1 + i % 200)));
        const bool changed = !diff(before, e.snapshot(b)).empty();
        if (ok) {
            ++allowed;
            unchanged_on_allow += changed ? 0 : 1;
        } else {
            ++denied;
            mutated_on_deny += changed ? 1 : 0;
        }
        const auto sys = e.access(b, AccessEvent{b, AccessKind::Syscall, i % 2 ? "read" : "ptrace", 0, Actor::Agent});
        if ((sys == Decision::Allow) != (i % 2 == 1)) ++mutated_on_deny;
    }
    const bool sound = denied > 0 && allowed > 0 && mutated_on_deny == 0 && unchanged_on_allow == 0;

    // Union laws over random profiles.
    const auto universe = make_universe(60, 300, 6);
    ProfileRegistry reg;
    std::vector<std::string> apps;
    for (int i = 0; i < 4; ++i) {
        const auto t = synthetic_human_trace(universe, 5 + rng() % 20, 10 + rng() % 40, rng() % 3, rng());
        apps.push_back("app" + std::to_string(i));
        reg.add(record_profile(t, apps.back()));
    }
    bool laws = compose_profile({apps[0], apps[1]}, reg) == compose_profile({apps[1], apps[0]}, reg) &&
                compose_profile({apps[0], apps[0]}, reg) == compose_profile({apps[0]}, reg) &&
                compose_profile(apps, reg) == compose_profile({apps[3], apps[2], apps[1], apps[0]}, reg);
    const auto all = compose_profile(apps, reg);
    for (int i = 0; i < 2000 && laws; ++i) {
        const bool sys = rng() % 2;
        const auto& pool = sys ? universe.syscalls : universe.files;
        const AccessEvent ev{0, sys ? AccessKind::Syscall : AccessKind::File, pool[rng() % pool.size()], 0, Actor::Agent};
        bool any = false;
        for (const auto& a : apps) any = any || profile_allows(reg.get(a), ev);
        laws = profile_allows(all, ev) == any;
    }

    // Desktop-scale shape.
    const auto desk = make_universe(kUniverseSyscalls);
    const auto human = record_profile(synthetic_human_trace(desk, kHumanSyscalls, 2000, 4, 1), "desktop");
    const auto cov = coverage(human, desk);
    const bool shape = cov.syscalls == kHumanSyscalls;

    line(9, sound && laws && shape, "security profile enforcement, union laws, coverage shape");
    detail("guarded writes: %zu allowed, %zu denied, %zu denied-but-mutated, %zu allowed-but-unchanged", allowed,
           denied, mutated_on_deny, unchanged_on_allow);
    detail("union laws %s", laws ? "hold" : "VIOLATED");
    detail("coverage: syscalls %zu/%zu (%.3f), files %zu/%zu (%.4f), devices %zu/%zu (%.3f)", cov.syscalls,
           desk.syscalls.size(), cov.syscall_ratio, cov.files, desk.files.size(), cov.file_ratio, cov.devices,
           desk.devices.size(), cov.device_ratio);
}

// --- 10 ----------------------------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void round_trips() {
    const auto root = std::filesystem::temp_directory_path() / "forkspace_acceptance_images";
    std::filesystem::remove_all(root);
    Engine e;
    const auto b = e.create_branch(build_workspace(small_spec(10)));
    const auto r1 = e.record_version(b, DumpMode::Sync);
    e.write_page(b, 1, 1, 0, 0, marker(3));
    const auto r2 = e.record_version(b, DumpMode::Sync);
    bool images = true;
    for (auto id : {r1.image, r2.image}) {
        const auto img = e.checkpoints().get(id);
        const auto dir = write_image_dir(*img, root);
        const auto back = read_image_dir(root, id);
        const auto again_root = root / "again";
        const auto dir2 = write_image_dir(back, again_root);
        images = images && back == *img;
        for (const char* f : {"meta.json", "tree.bin", "pages.bin"}) {
            images = images && slurp(dir / f) == slurp(dir2 / f);
        }
    }
    std::filesystem::remove_all(root);

    const auto u = make_universe(50, 100, 4);
    auto p = record_profile(synthetic_human_trace(u, 10, 20, 2, 5), "term");
    p.paths.insert("/proc/*/status");
    p.paths.insert("/home/user/");
    p.mode = ProfileMode::Audit;
    const auto text = profile_to_json(p);
    const auto pback = profile_from_json(text);
    const bool profiles = pback == p && profile_to_json(pback) == text;

    const auto kids = e.fork(r2.version, 2, {});
    e.rollback(kids[0], r1.version);
    e.discard(kids[1]);
    e.daemon().drain();
    const auto tree = e.tree();
    const auto j = tree.to_json();
    const auto tback = VersionTree::from_json(j);
    const bool trees = tback == tree && tback.to_json() == j && tback.dump() == tree.dump();

    line(10, images && profiles && trees, "image, profile and version-tree round trips");
    detail("image dirs %s, profile json %s, version tree %s (%zu nodes, %zu branches)", images ? "exact" : "DIFFER",
           profiles ? "exact" : "DIFFER", trees ? "fixed point" : "DIFFER", tree.nodes().size(),
           tree.branches().size());
}

std::set<int> selected;

template <typename Fn>
void guarded(int id, Fn fn) {
    if (!selected.empty() && !selected.count(id)) return;
    try {
        fn();
    } catch (const std::exception& ex) {
        line(id, false, std::string("threw: ") + ex.what());
    }
    flush();
}

} // namespace

// Optional arguments select criteria by number.
int main(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    const auto t0 = std::chrono::steady_clock::now();
    guarded(1, oracle_equivalence);
    guarded(2, zero_copy_fork);
    guarded(3, holder_consistency);
    guarded(4, incremental_checkpoints);
    guarded(5, scalability);
    guarded(6, ablation);
    guarded(7, layer_depth);
    guarded(8, isolation);
    guarded(9, security);
    guarded(10, round_trips);
    std::printf("%d criteria failed, %.1f s total\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
