#pragma once

#include "forkspace/engine.hpp"

#include <nlohmann/json_fwd.hpp>

namespace forkspace {

/// Branch-creation mechanisms. The five ablation configurations are the
/// cumulative prefixes of the flag list in declaration order.
struct CloneStrategy {
    std::string name;
    bool parallel_restore = false;
    bool overlap_dump_restore = false;
    bool cow_memory = false;
    bool async_dump = false;

    static CloneStrategy criu();
    static CloneStrategy tclone();
    /// Prefix `stage` in 0..4: 0 is the CRIU model, 4 is the full fast path.
    static CloneStrategy stage(int stage);
    static std::vector<CloneStrategy> ablation_stages();
    /// Accepts the stage names plus "eager" as an alias for criu.
    static CloneStrategy by_name(const std::string& name);

    friend bool operator==(const CloneStrategy&, const CloneStrategy&) = default;
};

/// Abstract cost units (milliseconds at the default calibration).
struct CostModel {
    double freeze_fixed = 50.0;
    double freeze_per_process = 0.2;
    /// Restore-engine metadata, per process per managed workspace.
    double meta_per_process_workspace = 0.5;
    /// Fork-path tree reconstruction, per process.
    double reconstruct_per_process = 1.0;
    double namespace_setup = 800.0;
    double copy_per_page = 0.004;
    double dump_per_page = 0.01;
    double pte_per_page = 0.0002;
    double probe_per_layer = 0.088;
    /// Share of the shorter phase that still serializes when dump and restore overlap.
    double overlap_interference = 0.25;
    std::size_t restore_workers = 2;

    /// Throws InvalidArgument on a negative cost or zero workers.
    void check() const;
};

void to_json(nlohmann::json& j, const CostModel& c);
void from_json(const nlohmann::json& j, CostModel& c);

struct CostReport {
    std::string strategy;
    std::size_t n = 0;
    std::uint64_t processes = 0;
    double freeze = 0.0;
    double metadata = 0.0;
    double memory = 0.0;
    /// Whole dump cost, on or off the critical path.
    double dump = 0.0;
    double dump_on_path = 0.0;
    double restore = 0.0;
    double critical_path = 0.0;
    std::uint64_t bytes_copied = 0;
    std::uint64_t pte_installs = 0;
    std::uint64_t pages_dumped = 0;
    std::uint64_t branch_local_bytes = 0;
    std::uint64_t wall_ns = 0;
};

struct CloneResult {
    VersionId version = 0;
    std::vector<BranchId> branches;
    CostReport cost;
};

/// Records `source` and forks `n` branches under the strategy's mechanisms.
CloneResult clone(const CloneStrategy& strategy, Engine& engine, BranchId source, std::size_t n,
                  const CostModel& cost = {}, const SecurityProfile& profile = {});

/// Cost of forking an already recorded version (no freeze or dump).
CloneResult clone_from(const CloneStrategy& strategy, Engine& engine, VersionId v, std::size_t n,
                       const CostModel& cost = {}, const SecurityProfile& profile = {});

/// Greedy list scheduling of job durations onto `workers`; returns the makespan.
double makespan(const std::vector<double>& jobs, std::size_t workers);

std::string cost_csv_header();
std::string cost_csv_row(const CostReport& r);

} // namespace forkspace
