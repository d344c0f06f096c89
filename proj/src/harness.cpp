#include "forkspace/harness.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace forkspace {

namespace {

std::uint64_t now_ns() {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
            .count());
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

} // namespace

WorkspaceSpec HarnessConfig::default_scalability_workspace() {
    WorkspaceSpec s;
    s.processes = 168;
    s.tree_seed = 11;
    s.anon_bytes = std::uint64_t{256} << 20;
    s.file_backed_bytes = std::uint64_t{1} << 20;
    s.shared_bytes = 64u << 10;
    s.vmas_per_process = 2;
    s.file_manifest = {{"/usr/lib/app/libcore.so", 1u << 20}, {"/home/user/profile/state.db", 256u << 10}};
    s.internal_connections = 8;
    s.external_connections = 4;
    s.gui_buffers = 2;
    s.gui_buffer_bytes = 128u << 10;
    return s;
}

void to_json(nlohmann::json& j, const LayerCosts& c) {
    j = nlohmann::json{{"read_ro_base_ms", c.read_ro_base_ms},
                       {"read_rw_base_ms", c.read_rw_base_ms},
                       {"write_rw_base_ms", c.write_rw_base_ms},
                       {"probe_ms", c.probe_ms}};
}

void from_json(const nlohmann::json& j, LayerCosts& c) {
    const LayerCosts d;
    c.read_ro_base_ms = j.value("read_ro_base_ms", d.read_ro_base_ms);
    c.read_rw_base_ms = j.value("read_rw_base_ms", d.read_rw_base_ms);
    c.write_rw_base_ms = j.value("write_rw_base_ms", d.write_rw_base_ms);
    c.probe_ms = j.value("probe_ms", d.probe_ms);
}

void to_json(nlohmann::json& j, const HarnessConfig& c) {
    j = nlohmann::json{{"cost", c.cost},
                       {"layer", c.layer},
                       {"model_call_ms", c.model_call_ms},
                       {"op_ms", c.op_ms},
                       {"verify_every", c.verify_every},
                       {"scalability_workspace", c.scalability_workspace},
                       {"ablation_workspace", c.ablation_workspace},
                       {"ablation_clones", c.ablation_clones},
                       {"divergence", c.divergence},
                       {"layer_file_pages", c.layer_file_pages}};
}

void from_json(const nlohmann::json& j, HarnessConfig& c) {
    c = {};
    if (j.contains("cost")) c.cost = j.at("cost").get<CostModel>();
    if (j.contains("layer")) c.layer = j.at("layer").get<LayerCosts>();
    c.model_call_ms = j.value("model_call_ms", c.model_call_ms);
    c.op_ms = j.value("op_ms", c.op_ms);
    c.verify_every = j.value("verify_every", c.verify_every);
    if (j.contains("scalability_workspace")) c.scalability_workspace = j.at("scalability_workspace").get<WorkspaceSpec>();
    if (j.contains("ablation_workspace")) c.ablation_workspace = j.at("ablation_workspace").get<WorkspaceSpec>();
    c.ablation_clones = j.value("ablation_clones", c.ablation_clones);
    c.divergence = j.value("divergence", c.divergence);
    c.layer_file_pages = j.value("layer_file_pages", c.layer_file_pages);
    if (c.model_call_ms < 0 || c.op_ms < 0 || c.divergence < 0 || c.divergence > 1 || c.ablation_clones == 0 ||
        c.layer_file_pages == 0) {
        throw Error(ErrorCode::InvalidArgument, "harness config out of range");
    }
}

std::string HarnessConfig::hash() const { return to_hex(fnv1a(nlohmann::json(*this).dump())); }

// --- scalability ----------------------------------------------------------------

namespace {

/// Writes a `fraction` of every anonymous region's slots in branch `b`.
void diverge(Engine& e, BranchId b, const WorkspaceState& ws, double fraction) {
    if (fraction <= 0.0) return;
    const auto stride = static_cast<std::uint32_t>(std::max(1.0, std::round(1.0 / fraction)));
    const std::array<std::uint8_t, 8> mark{0xd1, 0xd1, 0xd1, 0xd1, 0xd1, 0xd1, 0xd1, 0xd1};
    for (const auto& r : ws.regions) {
        if (r.cls != MemoryClass::Anonymous) continue;
        for (std::uint32_t s = 0; s < r.length; s += stride) e.write_page(b, r.owner, r.vma_id, s, 0, mark);
    }
}

} // namespace

std::vector<ScalabilityRow> run_scalability(std::size_t max_clones, const HarnessConfig& config) {
    if (max_clones == 0) throw Error(ErrorCode::InvalidArgument, "max_clones must be >= 1");
    const auto ws = build_workspace(config.scalability_workspace);
    std::vector<ScalabilityRow> rows;
    for (std::size_t n = 1; n <= max_clones; ++n) {
        double criu_path = 0.0;
        for (const auto& s : {CloneStrategy::criu(), CloneStrategy::tclone()}) {
            EngineConfig ec;
            ec.branch_cap = std::max<std::size_t>(256, n + 1);
            Engine e(ec);
            const auto src = e.create_branch(ws);
            ScalabilityRow row;
            row.strategy = s.name;
            row.n = n;
            row.base_footprint = e.footprint().total();
            auto res = clone(s, e, src, n, config.cost);
            for (auto b : res.branches) diverge(e, b, ws, config.divergence);
            e.daemon().drain();
            row.cost = res.cost;
            row.footprint = e.footprint().total();
            row.footprint_ratio = static_cast<double>(row.footprint) / static_cast<double>(row.base_footprint);
            if (s == CloneStrategy::criu()) criu_path = res.cost.critical_path;
            row.speedup_vs_criu = criu_path / res.cost.critical_path;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string scalability_csv(const std::vector<ScalabilityRow>& rows, const std::string& config_hash) {
    std::ostringstream out;
    out << "experiment,strategy,n,freeze,metadata,memory,dump_on_path,restore,critical_path,speedup_vs_criu,"
           "bytes_copied,pte_installs,base_footprint,footprint,footprint_ratio,wall_ns,config_hash\n";
    for (const auto& r : rows) {
        out << "scalability," << r.strategy << ',' << r.n << ',' << fmt("%.4f", r.cost.freeze) << ','
            << fmt("%.4f", r.cost.metadata) << ',' << fmt("%.4f", r.cost.memory) << ','
            << fmt("%.4f", r.cost.dump_on_path) << ',' << fmt("%.4f", r.cost.restore) << ','
            << fmt("%.4f", r.cost.critical_path) << ',' << fmt("%.4f", r.speedup_vs_criu) << ',' << r.cost.bytes_copied
            << ',' << r.cost.pte_installs << ',' << r.base_footprint << ',' << r.footprint << ','
            << fmt("%.4f", r.footprint_ratio) << ',' << r.cost.wall_ns << ',' << config_hash << '\n';
    }
    return out.str();
}

// --- ablation ---------------------------------------------------------------------

std::vector<AblationRow> run_ablation(const HarnessConfig& config) {
    const auto ws = build_workspace(config.ablation_workspace);
    std::vector<AblationRow> rows;
    for (const auto& s : CloneStrategy::ablation_stages()) {
        Engine e;
        const auto src = e.create_branch(ws);
        auto res = clone(s, e, src, config.ablation_clones, config.cost);
        e.daemon().drain();
        rows.push_back({s, res.cost, e.footprint().total()});
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& config_hash) {
    std::ostringstream out;
    out << "experiment,stage,strategy,parallel_restore,overlap_dump_restore,cow_memory,async_dump,n,freeze,metadata,"
           "memory,dump,dump_on_path,restore,critical_path,bytes_copied,pte_installs,pages_dumped,footprint,wall_ns,"
           "config_hash\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const auto& s = r.strategy;
        out << "ablation," << i << ',' << s.name << ',' << s.parallel_restore << ',' << s.overlap_dump_restore << ','
            << s.cow_memory << ',' << s.async_dump << ',' << r.cost.n << ',' << fmt("%.4f", r.cost.freeze) << ','
            << fmt("%.4f", r.cost.metadata) << ',' << fmt("%.4f", r.cost.memory) << ',' << fmt("%.4f", r.cost.dump)
            << ',' << fmt("%.4f", r.cost.dump_on_path) << ',' << fmt("%.4f", r.cost.restore) << ','
            << fmt("%.4f", r.cost.critical_path) << ',' << r.cost.bytes_copied << ',' << r.cost.pte_installs << ','
            << r.cost.pages_dumped << ',' << r.footprint << ',' << r.cost.wall_ns << ',' << config_hash << '\n';
    }
    return out.str();
}

// --- layer depth ----------------------------------------------------------------------

namespace {

const std::string kLayerFile = "/data/blob.bin";
const std::string kOtherFile = "/data/scratch.bin";

/// Average chain probes per page lookup for `op` on a view, plus wall time.
std::pair<double, std::uint64_t> measure(FsView& view, FileOp op, std::uint32_t pages) {
    view.reset_counters();
    const std::array<std::uint8_t, 8> mark{7, 7, 7, 7, 7, 7, 7, 7};
    const auto t0 = now_ns();
    for (std::uint32_t p = 0; p < pages; ++p) {
        if (op == FileOp::WriteRw) {
            view.write(kLayerFile, p, 0, mark);
        } else {
            (void)view.read(kLayerFile, p);
        }
    }
    const auto wall = now_ns() - t0;
    return {static_cast<double>(view.counters().layer_probes) / pages, wall};
}

} // namespace

std::vector<LayerRow> run_layer_bench(std::size_t max_depth, const HarnessConfig& config) {
    const auto pages = static_cast<std::uint32_t>(config.layer_file_pages);
    std::vector<LayerRow> rows;
    OverlayModel overlay(config.layer);
    auto store = std::make_shared<ExtentStore>();
    FsVersion base(store);
    std::vector<PageContent> blob;
    for (std::uint32_t p = 0; p < pages; ++p) blob.push_back(PageContent::synthetic(mix64(0xb10b + p)));
    base.add_file(kLayerFile, blob);
    base.add_file(kOtherFile, {PageContent::synthetic(5)});
    const std::array<std::uint8_t, 8> mark{1, 1, 1, 1, 1, 1, 1, 1};

    // Generation 0 reads the file once, so its pages live in the first sealed layer.
    FsView gen(1, base, nullptr);
    for (std::uint32_t p = 0; p < pages; ++p) (void)gen.read(kLayerFile, p);
    LayerId next_layer = 1;
    LayerPtr head = gen.seal(next_layer++);

    for (std::size_t depth = 0; depth <= max_depth; ++depth) {
        if (depth > 0) {
            // One more record/fork generation: the parent's own cache becomes a new layer.
            FsView parent(100 + depth, base, head);
            parent.write(kOtherFile, 0, 0, mark);
            head = parent.seal(next_layer++);
            overlay.push_lower();
        }
        for (const auto op : {FileOp::ReadRo, FileOp::ReadRw, FileOp::WriteRw}) {
            const auto oc = overlay_lookup(overlay, depth, op);
            rows.push_back({"overlay", depth, std::string(to_string(op)), static_cast<double>(oc.probes), oc.latency_ms, 0});
        }
        rows.push_back({"overlay", depth, "read_ro_repeat", 1.0, config.layer.base(FileOp::ReadRo) + config.layer.probe_ms, 0});

        // Branch at this depth: a fresh view over the whole chain.
        FsView branch(10000 + depth, base, head);
        const auto [cold, cold_ns] = measure(branch, FileOp::ReadRo, pages);
        const auto [warm, warm_ns] = measure(branch, FileOp::ReadRo, pages);
        FsView rw(20000 + depth, base.deep_copy(), head);
        (void)measure(rw, FileOp::WriteRw, pages);
        const auto [wprobes, w_ns] = measure(rw, FileOp::WriteRw, pages);
        const auto [rprobes, r_ns] = measure(rw, FileOp::ReadRw, pages);
        auto lat = [&](FileOp op, double probes) { return config.layer.base(op) + config.layer.probe_ms * probes; };
        rows.push_back({"chain", depth, "read_ro", cold, lat(FileOp::ReadRo, cold), cold_ns});
        rows.push_back({"chain", depth, "read_rw", rprobes, lat(FileOp::ReadRw, rprobes), r_ns});
        rows.push_back({"chain", depth, "write_rw", wprobes, lat(FileOp::WriteRw, wprobes), w_ns});
        rows.push_back({"chain", depth, "read_ro_repeat", warm, lat(FileOp::ReadRo, warm), warm_ns});
    }
    return rows;
}

std::string layer_csv(const std::vector<LayerRow>& rows, const std::string& config_hash) {
    std::ostringstream out;
    out << "experiment,backend,depth,op,probes_per_lookup,latency_ms,wall_ns,config_hash\n";
    for (const auto& r : rows) {
        out << "layer," << r.backend << ',' << r.depth << ',' << r.op << ',' << fmt("%.4f", r.probes_per_lookup) << ','
            << fmt("%.4f", r.latency_ms) << ',' << r.wall_ns << ',' << config_hash << '\n';
    }
    return out.str();
}

LinearFit fit_linear(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw Error(ErrorCode::InvalidArgument, "fit needs two or more points");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    LinearFit f;
    const double den = n * sxx - sx * sx;
    if (den == 0.0) throw Error(ErrorCode::InvalidArgument, "fit needs distinct x values");
    f.slope = (n * sxy - sx * sy) / den;
    f.intercept = (sy - f.slope * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double mean = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double pred = f.intercept + f.slope * x[i];
        ss_res += (y[i] - pred) * (y[i] - pred);
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    f.r2 = ss_tot == 0.0 ? (ss_res == 0.0 ? 1.0 : 0.0) : 1.0 - ss_res / ss_tot;
    return f;
}

bool csv_well_formed(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line.empty()) return false;
    const auto cols = std::count(line.begin(), line.end(), ',');
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::count(line.begin(), line.end(), ',') != cols) return false;
        ++rows;
    }
    return rows > 0;
}

} // namespace forkspace
