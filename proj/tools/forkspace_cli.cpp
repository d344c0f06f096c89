#include "forkspace/harness.hpp"
#include "forkspace/security.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace forkspace;

namespace {

struct Output {
    std::string path;

    void write(const std::string& text) const {
        if (path.empty() || path == "-") {
            std::cout << text;
            return;
        }
        std::ofstream out(path);
        if (!out) throw Error(ErrorCode::StorageFailure, "cannot write " + path);
        out << text;
    }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::NotFound, "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

HarnessConfig load_config(const std::string& arg) {
    if (arg.empty()) return {};
    const auto text = arg.front() == '{' ? arg : read_file(arg);
    return nlohmann::json::parse(text).get<HarnessConfig>();
}

int report(const std::vector<std::string>& problems) {
    for (const auto& p : problems) std::cerr << "invariant violated: " << p << '\n';
    return problems.empty() ? 0 : 2;
}

bool is_trace_kind(const std::string& s) {
    return s == "random" || s == "best-of-n" || s == "beam" || s == "rollback-heavy" || s == "model-only";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"forkspace: versioned workspace engine and benchmark harness"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_arg;
    Output out;
    app.add_option("--config", config_arg, "harness config: JSON file or inline JSON object");
    app.add_option("--out", out.path, "write CSV here instead of stdout");

    auto* rp = app.add_subcommand("replay", "replay a trace against a clone strategy");
    std::string trace_arg, strategy_name = "tclone";
    bool verify = false;
    std::optional<std::uint64_t> seed;
    TraceShape shape;
    rp->add_option("--trace", trace_arg, "trace JSON file, or a generator kind (random, best-of-n, beam, "
                                         "rollback-heavy, model-only)")
        ->required();
    rp->add_option("--strategy", strategy_name, "criu, +parallel_restore, +overlap, +cow_memory, tclone, or all");
    rp->add_flag("--verify", verify, "cross-check every branch against the eager deep-copy oracle");
    rp->add_option("--seed", seed, "seed for generated traces");
    rp->add_option("--events", shape.events, "events for generated random traces");
    rp->add_option("--width", shape.width, "branches per fork for generated traces");
    std::string workspace = "small";
    rp->add_option("--workspace", workspace, "workspace for generated traces")
        ->check(CLI::IsMember({"small", "scalability", "chromium"}));

    auto* gt = app.add_subcommand("gen-trace", "write a generated trace as JSON");
    std::string kind = "random";
    std::uint64_t gen_seed = 1;
    gt->add_option("--kind", kind);
    gt->add_option("--seed", gen_seed);
    gt->add_option("--events", shape.events);
    gt->add_option("--width", shape.width);
    gt->add_option("--steps", shape.steps);

    auto* sc = app.add_subcommand("scalability", "clone latency and footprint versus clone count");
    std::size_t max_clones = 16;
    sc->add_option("--max-clones", max_clones)->check(CLI::PositiveNumber);

    auto* ab = app.add_subcommand("ablation", "critical path of the five cumulative mechanism stages");

    auto* lb = app.add_subcommand("layer-bench", "file operation latency versus layer depth");
    std::size_t max_depth = 50;
    lb->add_option("--max-depth", max_depth);

    auto* pf = app.add_subcommand("profile", "security profiles");
    pf->require_subcommand(1);
    pf->fallthrough();
    auto* prec = pf->add_subcommand("record", "record a profile from a human access trace (JSONL)");
    std::string ptrace, app_name;
    prec->add_option("--trace", ptrace)->required();
    prec->add_option("--app", app_name)->required();
    auto* pcomp = pf->add_subcommand("compose", "union of recorded profiles");
    std::vector<std::string> profile_files;
    std::string mode = "enforce";
    pcomp->add_option("profiles", profile_files)->required();
    pcomp->add_option("--mode", mode)->check(CLI::IsMember({"enforce", "audit"}));
    auto* penf = pf->add_subcommand("enforce", "check an access trace against a profile");
    std::string profile_file;
    penf->add_option("--profile", profile_file)->required();
    penf->add_option("--trace", ptrace)->required();
    auto* psyn = pf->add_subcommand("synth", "synthetic human trace over a desktop-scale universe");
    std::size_t nsys = 100, nfiles = 2000, ndev = 4;
    std::uint64_t syn_seed = 1;
    psyn->add_option("--syscalls", nsys);
    psyn->add_option("--files", nfiles);
    psyn->add_option("--devices", ndev);
    psyn->add_option("--seed", syn_seed);
    auto* pcov = pf->add_subcommand("coverage", "profile size against the synthetic universe");
    pcov->add_option("--profile", profile_file)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const auto cfg = load_config(config_arg);
        const auto hash = cfg.hash();
        if (*rp) {
            Trace trace;
            if (is_trace_kind(trace_arg) && !std::filesystem::exists(trace_arg)) {
                const auto s = seed.value_or(1);
                WorkspaceSpec spec = trace_workspace(s);
                if (workspace == "scalability") spec = cfg.scalability_workspace;
                if (workspace == "chromium") spec = cfg.ablation_workspace;
                trace = generate_trace(trace_arg, s, shape, spec);
            } else {
                trace = load_trace_file(trace_arg);
            }
            std::vector<CloneStrategy> strategies;
            if (strategy_name == "all") {
                strategies = CloneStrategy::ablation_stages();
            } else {
                strategies.push_back(CloneStrategy::by_name(strategy_name));
            }
            std::string csv = replay_csv_header() + "\n";
            std::vector<std::string> problems;
            for (const auto& s : strategies) {
                const auto r = replay(trace, s, cfg, verify);
                csv += replay_csv_row(r, hash) + "\n";
                for (const auto& n : r.violation_notes) problems.push_back(s.name + ": " + n);
                if (r.violations > r.violation_notes.size()) {
                    problems.push_back(s.name + ": " + std::to_string(r.violations) + " violations in total");
                }
            }
            out.write(csv);
            return report(problems);
        }
        if (*gt) {
            const auto trace = generate_trace(kind, gen_seed, shape, trace_workspace(gen_seed));
            out.write(nlohmann::json(trace).dump(1) + "\n");
            return 0;
        }
        if (*sc) {
            const auto rows = run_scalability(max_clones, cfg);
            out.write(scalability_csv(rows, hash));
            std::vector<std::string> problems;
            for (std::size_t i = 0; i + 1 < rows.size(); i += 2) {
                const auto& criu = rows[i];
                const auto& tc = rows[i + 1];
                if (tc.footprint >= criu.footprint) {
                    problems.push_back("fast-path footprint not below eager at n=" + std::to_string(tc.n));
                }
                if (tc.cost.bytes_copied != 0) problems.push_back("fast path copied bytes at n=" + std::to_string(tc.n));
            }
            return report(problems);
        }
        if (*ab) {
            const auto rows = run_ablation(cfg);
            out.write(ablation_csv(rows, hash));
            std::vector<std::string> problems;
            for (std::size_t i = 1; i < rows.size(); ++i) {
                if (rows[i].cost.critical_path > rows[i - 1].cost.critical_path) {
                    problems.push_back("critical path increased at stage " + rows[i].strategy.name);
                }
            }
            if (rows.back().cost.dump_on_path != 0.0) problems.push_back("final stage has dump cost on the path");
            if (rows.back().cost.bytes_copied != 0) problems.push_back("final stage copied page bytes");
            return report(problems);
        }
        if (*lb) {
            out.write(layer_csv(run_layer_bench(max_depth, cfg), hash));
            return 0;
        }
        if (*prec) {
            out.write(profile_to_json(record_profile(load_trace(ptrace), app_name)) + "\n");
            return 0;
        }
        if (*pcomp) {
            ProfileRegistry reg;
            std::vector<std::string> apps;
            for (const auto& f : profile_files) {
                auto p = profile_from_json(read_file(f));
                for (const auto& a : p.apps) apps.push_back(a);
                reg.add(std::move(p));
            }
            const auto m = mode == "audit" ? ProfileMode::Audit : ProfileMode::Enforce;
            out.write(profile_to_json(compose_profile(apps, reg, m)) + "\n");
            return 0;
        }
        if (*penf) {
            const auto profile = profile_from_json(read_file(profile_file));
            std::string csv = "ts,kind,target,actor,decision\n";
            for (const auto& e : load_trace(ptrace)) {
                const auto d = enforce(profile, e);
                csv += std::to_string(e.timestamp) + "," + std::string(to_string(e.kind)) + "," + e.target + "," +
                       (e.actor == Actor::Human ? "human" : "agent") + "," + std::string(to_string(d)) + "\n";
            }
            out.write(csv);
            return 0;
        }
        if (*psyn) {
            const auto u = make_universe();
            std::string text;
            for (const auto& e : synthetic_human_trace(u, nsys, nfiles, ndev, syn_seed)) text += to_json_line(e) + "\n";
            out.write(text);
            return 0;
        }
        if (*pcov) {
            const auto profile = profile_from_json(read_file(profile_file));
            const auto u = make_universe();
            const auto c = coverage(profile, u);
            char buf[256];
            std::snprintf(buf, sizeof buf, "syscall,%zu,%zu,%.6f\nfile,%zu,%zu,%.6f\ndevice,%zu,%zu,%.6f\n",
                          c.syscalls, u.syscalls.size(), c.syscall_ratio, c.files, u.files.size(), c.file_ratio,
                          c.devices, u.devices.size(), c.device_ratio);
            out.write(std::string("resource,allowed,universe,ratio\n") + buf);
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
