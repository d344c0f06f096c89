#include "forkspace/strategy.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>

#include <nlohmann/json.hpp>

namespace forkspace {

CloneStrategy CloneStrategy::criu() { return stage(0); }
CloneStrategy CloneStrategy::tclone() { return stage(4); }

CloneStrategy CloneStrategy::stage(int stage) {
    static const char* names[] = {"criu", "+parallel_restore", "+overlap", "+cow_memory", "tclone"};
    if (stage < 0 || stage > 4) throw Error(ErrorCode::OutOfRange, "stage must be in 0..4");
    CloneStrategy s;
    s.name = names[stage];
    s.parallel_restore = stage >= 1;
    s.overlap_dump_restore = stage >= 2;
    s.cow_memory = stage >= 3;
    s.async_dump = stage >= 4;
    return s;
}

std::vector<CloneStrategy> CloneStrategy::ablation_stages() {
    std::vector<CloneStrategy> out;
    for (int i = 0; i <= 4; ++i) out.push_back(stage(i));
    return out;
}

CloneStrategy CloneStrategy::by_name(const std::string& name) {
    if (name == "eager") return criu();
    if (name == "+async_dump") return tclone();
    for (int i = 0; i <= 4; ++i) {
        auto s = stage(i);
        if (s.name == name) return s;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown strategy " + name);
}

void CostModel::check() const {
    for (double v : {freeze_fixed, freeze_per_process, meta_per_process_workspace, reconstruct_per_process,
                     namespace_setup, copy_per_page, dump_per_page, pte_per_page, probe_per_layer,
                     overlap_interference}) {
        if (v < 0.0) throw Error(ErrorCode::InvalidArgument, "cost parameters must be nonnegative");
    }
    if (restore_workers == 0) throw Error(ErrorCode::InvalidArgument, "restore_workers must be >= 1");
}

void to_json(nlohmann::json& j, const CostModel& c) {
    j = nlohmann::json{{"freeze_fixed", c.freeze_fixed},
                       {"freeze_per_process", c.freeze_per_process},
                       {"meta_per_process_workspace", c.meta_per_process_workspace},
                       {"reconstruct_per_process", c.reconstruct_per_process},
                       {"namespace_setup", c.namespace_setup},
                       {"copy_per_page", c.copy_per_page},
                       {"dump_per_page", c.dump_per_page},
                       {"pte_per_page", c.pte_per_page},
                       {"probe_per_layer", c.probe_per_layer},
                       {"overlap_interference", c.overlap_interference},
                       {"restore_workers", c.restore_workers}};
}

void from_json(const nlohmann::json& j, CostModel& c) {
    const CostModel d;
    c.freeze_fixed = j.value("freeze_fixed", d.freeze_fixed);
    c.freeze_per_process = j.value("freeze_per_process", d.freeze_per_process);
    c.meta_per_process_workspace = j.value("meta_per_process_workspace", d.meta_per_process_workspace);
    c.reconstruct_per_process = j.value("reconstruct_per_process", d.reconstruct_per_process);
    c.namespace_setup = j.value("namespace_setup", d.namespace_setup);
    c.copy_per_page = j.value("copy_per_page", d.copy_per_page);
    c.dump_per_page = j.value("dump_per_page", d.dump_per_page);
    c.pte_per_page = j.value("pte_per_page", d.pte_per_page);
    c.probe_per_layer = j.value("probe_per_layer", d.probe_per_layer);
    c.overlap_interference = j.value("overlap_interference", d.overlap_interference);
    c.restore_workers = j.value("restore_workers", d.restore_workers);
    c.check();
}

double makespan(const std::vector<double>& jobs, std::size_t workers) {
    if (workers == 0) throw Error(ErrorCode::InvalidArgument, "makespan needs a worker");
    std::vector<double> load(std::min(workers, std::max<std::size_t>(jobs.size(), 1)), 0.0);
    for (double j : jobs) *std::min_element(load.begin(), load.end()) += j;
    return *std::max_element(load.begin(), load.end());
}

namespace {

std::uint64_t now_ns() {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
            .count());
}

CloneResult fork_and_cost(const CloneStrategy& s, Engine& engine, VersionId v, std::size_t n, const CostModel& c,
                          const SecurityProfile& profile, const RecordResult* rec) {
    c.check();
    CloneResult out;
    out.version = v;
    const auto t0 = now_ns();
    ForkOptions opts;
    opts.memory = s.cow_memory ? MemoryMode::CopyOnWrite : MemoryMode::Eager;
    opts.share_fs_cache = s.cow_memory;
    opts.policy = s.parallel_restore ? ExecPolicy::Parallel : ExecPolicy::Serial;
    ForkReport fr;
    out.branches = engine.fork(v, n, profile, opts, &fr);

    CostReport& r = out.cost;
    r.strategy = s.name;
    r.n = n;
    r.bytes_copied = fr.bytes_copied;
    const double managed = static_cast<double>(engine.live_branches().size());
    std::vector<double> mem_jobs, rest_jobs, whole_jobs;
    for (const auto& b : fr.branches) {
        r.processes = b.processes;
        r.pte_installs += b.pte_installs;
        r.branch_local_bytes += b.branch_local_bytes;
        const double procs = static_cast<double>(b.processes);
        const double mem = s.cow_memory ? static_cast<double>(b.pte_installs) * c.pte_per_page
                                        : static_cast<double>(b.pages_copied) * c.copy_per_page;
        // The restore engine rescans every managed workspace's metadata per process;
        // the fork path rebuilds each tree from the captured image alone.
        const double meta = s.cow_memory ? c.reconstruct_per_process * procs
                                         : c.meta_per_process_workspace * procs * managed;
        const double local = static_cast<double>(b.branch_local_bytes / kPageSize) * c.copy_per_page;
        r.memory += mem;
        r.metadata += meta;
        mem_jobs.push_back(mem);
        rest_jobs.push_back(meta + c.namespace_setup + local);
        whole_jobs.push_back(mem + meta + c.namespace_setup + local);
    }
    const std::size_t workers = s.parallel_restore ? c.restore_workers : 1;
    const double r_mem = makespan(mem_jobs, workers);
    const double r_rest = makespan(rest_jobs, workers);
    r.restore = makespan(whole_jobs, workers);

    if (rec) {
        r.freeze = c.freeze_fixed + c.freeze_per_process * static_cast<double>(rec->processes);
        rec->handle->wait();
        r.pages_dumped = engine.checkpoints().get(rec->image)->pages.size();
        r.dump = static_cast<double>(r.pages_dumped) * c.dump_per_page;
    }
    r.dump_on_path = s.async_dump ? 0.0 : r.dump;
    const double d = r.dump_on_path;
    if (s.overlap_dump_restore && d > 0.0) {
        r.critical_path = r.freeze + std::max(d, r_mem) + c.overlap_interference * std::min(d, r_mem) + r_rest;
    } else {
        r.critical_path = r.freeze + d + r.restore;
    }
    r.wall_ns = now_ns() - t0 + (rec ? rec->wall_ns : 0);
    return out;
}

} // namespace

CloneResult clone(const CloneStrategy& strategy, Engine& engine, BranchId source, std::size_t n,
                  const CostModel& cost, const SecurityProfile& profile) {
    const auto rec = engine.record_version(source, strategy.async_dump ? DumpMode::Async : DumpMode::Sync);
    return fork_and_cost(strategy, engine, rec.version, n, cost, profile, &rec);
}

CloneResult clone_from(const CloneStrategy& strategy, Engine& engine, VersionId v, std::size_t n,
                       const CostModel& cost, const SecurityProfile& profile) {
    return fork_and_cost(strategy, engine, v, n, cost, profile, nullptr);
}

std::string cost_csv_header() {
    return "strategy,n,processes,freeze,metadata,memory,dump,dump_on_path,restore,critical_path,bytes_copied,"
           "pte_installs,pages_dumped,branch_local_bytes,wall_ns";
}

std::string cost_csv_row(const CostReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%zu,%llu,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%llu,%llu,%llu,%llu,%llu",
                  r.strategy.c_str(), r.n, static_cast<unsigned long long>(r.processes), r.freeze, r.metadata,
                  r.memory, r.dump, r.dump_on_path, r.restore, r.critical_path,
                  static_cast<unsigned long long>(r.bytes_copied), static_cast<unsigned long long>(r.pte_installs),
                  static_cast<unsigned long long>(r.pages_dumped),
                  static_cast<unsigned long long>(r.branch_local_bytes), static_cast<unsigned long long>(r.wall_ns));
    return buf;
}

} // namespace forkspace
