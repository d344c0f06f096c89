#include "forkspace/harness.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

using namespace forkspace;

namespace {

Trace gen(const std::string& kind, std::uint64_t seed, std::size_t events = 300) {
    TraceShape shape;
    shape.events = events;
    return generate_trace(kind, seed, shape, trace_workspace(seed));
}

} // namespace

TEST_CASE("generated traces are deterministic and round trip through json") {
    for (const char* kind : {"random", "best-of-n", "beam", "rollback-heavy", "model-only"}) {
        const auto a = gen(kind, 8);
        const auto b = gen(kind, 8);
        CHECK(a.events == b.events);
        CHECK_FALSE(a.events.empty());
        const nlohmann::json j = a;
        const auto back = j.get<Trace>();
        CHECK(back.events == a.events);
        CHECK(nlohmann::json(back) == j);
    }
    CHECK(gen("random", 1).events != gen("random", 2).events);
    CHECK_THROWS_AS(gen("nonsense", 1), Error);
}

TEST_CASE("trace files round trip") {
    const auto t = gen("beam", 4);
    const auto path = std::filesystem::temp_directory_path() / "forkspace_test_trace.json";
    save_trace_file(path, t);
    CHECK(load_trace_file(path).events == t.events);
    std::filesystem::remove(path);
}

TEST_CASE("replay agrees with the oracle under every strategy") {
    HarnessConfig cfg;
    cfg.verify_every = 50;
    for (const char* kind : {"random", "best-of-n", "beam", "rollback-heavy"}) {
        const auto t = gen(kind, 21, 400);
        for (const auto& s : CloneStrategy::ablation_stages()) {
            const auto r = replay(t, s, cfg, true);
            CHECK_MESSAGE(r.violations == 0, kind, " ", s.name);
            CHECK(r.verified_checks > 0);
            CHECK(r.events == t.events.size());
        }
    }
}

TEST_CASE("a malformed trace is rejected") {
    auto t = gen("random", 3, 50);
    TraceEvent bad;
    bad.step = t.events.size();
    bad.op = TraceOp::Write;
    bad.branch = 999;
    t.events.push_back(bad);
    CHECK_THROWS_AS(replay(t, CloneStrategy::tclone(), {}, false), Error);
}

TEST_CASE("without forks every strategy costs the same") {
    const auto t = gen("model-only", 5);
    HarnessConfig cfg;
    const auto a = replay(t, CloneStrategy::criu(), cfg, true);
    const auto b = replay(t, CloneStrategy::tclone(), cfg, true);
    CHECK(a.forks == 0);
    CHECK(a.end_to_end_ms == doctest::Approx(b.end_to_end_ms));
    CHECK(a.violations == 0);
}

TEST_CASE("best-of-4 end to end on a browser-scale workspace") {
    HarnessConfig cfg;
    TraceShape shape;
    const auto t = generate_trace("best-of-n", 3, shape, cfg.ablation_workspace);
    const auto criu = replay(t, CloneStrategy::criu(), cfg, false);
    const auto fast = replay(t, CloneStrategy::tclone(), cfg, false);
    CHECK(criu.end_to_end_ms / fast.end_to_end_ms >= 1.5);
    CHECK(fast.bytes_copied == 0);
}

TEST_CASE("config json round trip and hash") {
    HarnessConfig c;
    c.model_call_ms = 1234;
    c.cost.restore_workers = 4;
    const nlohmann::json j = c;
    const auto back = j.get<HarnessConfig>();
    CHECK(back.model_call_ms == 1234);
    CHECK(back.cost.restore_workers == 4);
    CHECK(back.hash() == c.hash());
    CHECK(HarnessConfig{}.hash() != c.hash());
}

TEST_CASE("linear fit") {
    const auto f = fit_linear({0, 1, 2, 3}, {1, 3, 5, 7});
    CHECK(f.slope == doctest::Approx(2.0));
    CHECK(f.intercept == doctest::Approx(1.0));
    CHECK(f.r2 == doctest::Approx(1.0));
    const auto flat = fit_linear({0, 1, 2}, {4, 4, 4});
    CHECK(flat.slope == doctest::Approx(0.0));
}

TEST_CASE("csv checks") {
    CHECK(csv_well_formed("a,b\n1,2\n3,4\n"));
    CHECK_FALSE(csv_well_formed("a,b\n1,2,3\n"));
    CHECK_FALSE(csv_well_formed(""));
}

TEST_CASE("benchmark outputs are well formed") {
    HarnessConfig cfg;
    cfg.scalability_workspace.anon_bytes = 512 * kPageSize;
    cfg.ablation_workspace = cfg.scalability_workspace;
    const auto sc = run_scalability(4, cfg);
    CHECK(sc.size() == 8);
    CHECK(csv_well_formed(scalability_csv(sc, cfg.hash())));
    const auto ab = run_ablation(cfg);
    CHECK(ab.size() == 5);
    CHECK(csv_well_formed(ablation_csv(ab, cfg.hash())));
    const auto lb = run_layer_bench(3, cfg);
    CHECK(csv_well_formed(layer_csv(lb, cfg.hash())));
    const auto t = gen("random", 1, 40);
    const auto r = replay(t, CloneStrategy::tclone(), cfg, false);
    CHECK(csv_well_formed(replay_csv_header() + "\n" + replay_csv_row(r, cfg.hash()) + "\n"));
}
