#pragma once

#include "forkspace/filesystem.hpp"
#include "forkspace/strategy.hpp"

#include <filesystem>

#include <nlohmann/json_fwd.hpp>

namespace forkspace {

enum class TraceOp { Fork, Write, FsRead, FsWrite, Rollback, Discard, Promote, Record, ModelCall, ExternalAttempt };

std::string_view to_string(TraceOp op);

/// Branches and versions are trace-local indices in creation order; branch 0
/// is the user workspace and every Fork records a version first.
struct TraceEvent {
    std::uint64_t step = 0;
    TraceOp op = TraceOp::ModelCall;
    std::size_t branch = 0;
    std::size_t n = 0;
    LocalPid pid = 0;
    VmaId vma = 0;
    std::uint32_t slot = 0;
    std::uint32_t offset = 0;
    std::uint8_t value = 0;
    std::string path;
    std::size_t version = 0;
    /// ModelCall delay; negative means the configured default.
    double latency_ms = -1.0;

    friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

struct Trace {
    std::uint64_t seed = 0;
    std::string kind;
    WorkspaceSpec workspace;
    std::vector<TraceEvent> events;
};

void to_json(nlohmann::json& j, const TraceEvent& e);
void from_json(const nlohmann::json& j, TraceEvent& e);
void to_json(nlohmann::json& j, const Trace& t);
void from_json(const nlohmann::json& j, Trace& t);

Trace load_trace_file(const std::filesystem::path& file);
void save_trace_file(const std::filesystem::path& file, const Trace& t);

struct HarnessConfig {
    CostModel cost;
    LayerCosts layer;
    double model_call_ms = 2000.0;
    /// Cost of one ordinary branch operation (write, read, external attempt).
    double op_ms = 0.05;
    /// Verify against the oracle every this many events (and at the end).
    std::size_t verify_every = 1000;
    WorkspaceSpec scalability_workspace = default_scalability_workspace();
    WorkspaceSpec ablation_workspace = WorkspaceSpec::chromium_scale();
    std::size_t ablation_clones = 4;
    double divergence = 0.01;
    std::size_t layer_file_pages = 256;

    static WorkspaceSpec default_scalability_workspace();
    std::string hash() const;
};

void to_json(nlohmann::json& j, const HarnessConfig& c);
void from_json(const nlohmann::json& j, HarnessConfig& c);

struct TraceShape {
    std::size_t events = 200;
    std::size_t max_branches = 8;
    std::size_t width = 4;
    std::size_t steps = 6;
};

/// Kinds: random, best-of-n, beam, rollback-heavy, model-only. Deterministic in (kind, seed, shape, spec).
Trace generate_trace(const std::string& kind, std::uint64_t seed, const TraceShape& shape, const WorkspaceSpec& spec);

/// Small workspace used by generated traces.
WorkspaceSpec trace_workspace(std::uint64_t seed);

struct ReplayResult {
    std::string strategy;
    std::uint64_t seed = 0;
    std::size_t events = 0;
    std::size_t branches = 0;
    /// Most branches running at once.
    std::size_t peak_live = 0;
    std::size_t forks = 0;
    double end_to_end_ms = 0.0;
    double clone_ms = 0.0;
    double model_ms = 0.0;
    std::uint64_t bytes_copied = 0;
    std::uint64_t pte_installs = 0;
    std::uint64_t footprint_bytes = 0;
    std::size_t verified_checks = 0;
    /// Divergent locations found against the oracle plus failed audits.
    std::size_t violations = 0;
    std::vector<std::string> violation_notes;
    std::uint64_t wall_ns = 0;
};

/// Throws InvalidArgument for a malformed trace (unknown branch, bad target).
ReplayResult replay(const Trace& trace, const CloneStrategy& strategy, const HarnessConfig& config, bool verify);

std::string replay_csv_header();
std::string replay_csv_row(const ReplayResult& r, const std::string& config_hash);

struct ScalabilityRow {
    std::string strategy;
    std::size_t n = 0;
    CostReport cost;
    std::uint64_t base_footprint = 0;
    std::uint64_t footprint = 0;
    double footprint_ratio = 0.0;
    /// CRIU-model critical path over this strategy's, at the same n.
    double speedup_vs_criu = 0.0;
};

std::vector<ScalabilityRow> run_scalability(std::size_t max_clones, const HarnessConfig& config);
std::string scalability_csv(const std::vector<ScalabilityRow>& rows, const std::string& config_hash);

struct AblationRow {
    CloneStrategy strategy;
    CostReport cost;
    std::uint64_t footprint = 0;
};

std::vector<AblationRow> run_ablation(const HarnessConfig& config);
std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& config_hash);

struct LayerRow {
    std::string backend;
    std::size_t depth = 0;
    std::string op;
    double probes_per_lookup = 0.0;
    double latency_ms = 0.0;
    std::uint64_t wall_ns = 0;
};

/// Depth 0..max_depth for the overlay model and the sealed-layer chain.
/// Ops: read_ro (cold), read_ro_repeat, read_rw, write_rw.
std::vector<LayerRow> run_layer_bench(std::size_t max_depth, const HarnessConfig& config);
std::string layer_csv(const std::vector<LayerRow>& rows, const std::string& config_hash);

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

LinearFit fit_linear(const std::vector<double>& x, const std::vector<double>& y);

/// Checks a CSV body: header present, every row has the header's column count.
bool csv_well_formed(const std::string& csv);

} // namespace forkspace
