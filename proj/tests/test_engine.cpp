#include "fixtures.hpp"

#include "forkspace/engine.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

using namespace forkspace;
using forkspace::testing::marker;
using forkspace::testing::small_spec;

namespace {

const MemoryRegion& first_region(const WorkspaceState& ws, MemoryClass cls) {
    for (const auto& r : ws.regions) {
        if (r.cls == cls && r.length > 0) return r;
    }
    throw Error(ErrorCode::NotFound, "fixture has no region of that class");
}

std::size_t external_count(const WorkspaceState& ws) {
    std::size_t n = 0;
    for (const auto& c : ws.connections) n += c.kind == ConnectionKind::External ? 1 : 0;
    return n;
}

} // namespace

TEST_CASE("create and snapshot round-trips the input state") {
    Engine e;
    const auto ws = build_workspace(small_spec());
    const auto b = e.create_branch(ws);
    CHECK(e.user_branch() == b);
    const auto snap = e.snapshot(b);
    CHECK(diff(ws, snap).empty());
    CHECK(validate(snap).empty());
    CHECK(e.audit_refcounts().ok);
}

TEST_CASE("fork copies no page bytes and diverges lazily") {
    Engine e;
    const auto ws = build_workspace(small_spec());
    const auto src = e.create_branch(ws);
    const auto rec = e.record_version(src);
    CHECK(rec.freeze_bytes_copied == 0);
    CHECK(rec.freeze_allocations == 0);
    CHECK(rec.freeze_pte_installs == 0);

    ForkReport report;
    const auto kids = e.fork(rec.version, 3, {}, {}, &report);
    REQUIRE(kids.size() == 3);
    CHECK(report.bytes_copied == 0);

    const auto base = e.snapshot(src);
    for (auto k : kids) {
        const auto s = e.snapshot(k);
        CHECK(external_count(s) == 0);
        // Everything else equals the source: only severed externals differ.
        const auto d = diff(base, s);
        CHECK(d.count(DiffKind::Page) == 0);
        CHECK(d.count(DiffKind::File) == 0);
        CHECK(d.count(DiffKind::FilePage) == 0);
        CHECK(d.count(DiffKind::Gui) == 0);
    }

    const auto& r = first_region(base, MemoryClass::Anonymous);
    const auto m = marker(0xAB);
    CHECK(e.write_page(kids[0], r.owner, r.vma_id, 0, 0, m) == WriteOutcome::CowBreak);
    CHECK(e.read_page(kids[0], r.owner, r.vma_id, 0)->byte_at(0) == 0xAB);
    CHECK(e.read_page(kids[1], r.owner, r.vma_id, 0) == r.pages[0]);
    CHECK(diff(e.snapshot(kids[1]), e.snapshot(kids[2])).empty());
    CHECK(diff(base, e.snapshot(src)).empty());
    CHECK(e.audit_refcounts().ok);
}

TEST_CASE("record returns before the image is durable and the image keeps the frozen view") {
    Engine e;
    const auto ws = build_workspace(small_spec());
    const auto b = e.create_branch(ws);
    e.daemon().stall();
    const auto rec = e.record_version(b);
    CHECK(rec.handle->state() == CheckpointState::Pending);
    CHECK(e.status(b) == BranchStatus::Running);
    const auto& r = first_region(ws, MemoryClass::Anonymous);
    for (std::uint32_t i = 0; i < r.length; ++i) e.write_page(b, r.owner, r.vma_id, i, 0, marker(7));
    e.daemon().unstall();
    CHECK(rec.handle->wait() == CheckpointState::Durable);
    const auto flat = e.checkpoints().flatten(rec.image);
    for (std::uint32_t i = 0; i < r.length; ++i) {
        auto it = flat.find(SlotKey{r.owner, r.vma_id, i});
        if (r.pages[i]) {
            REQUIRE(it != flat.end());
            CHECK(it->second == *r.pages[i]);
        } else {
            CHECK(it == flat.end());
        }
    }
}

TEST_CASE("incremental record chains exactly the dirty pages") {
    Engine e;
    const auto ws = build_workspace(small_spec());
    const auto b = e.create_branch(ws);
    const auto first = e.record_version(b);
    const auto again = e.record_version(b);
    CHECK(again.chained);
    again.handle->wait();
    CHECK(e.checkpoints().get(again.image)->pages.empty());

    const auto& r = first_region(ws, MemoryClass::Anonymous);
    for (std::uint32_t i = 0; i < 5; ++i) e.write_page(b, r.owner, r.vma_id, i, 0, marker(1));
    e.write_page(b, r.owner, r.vma_id, 0, 8, marker(2));
    const auto third = e.record_version(b);
    third.handle->wait();
    CHECK(e.checkpoints().get(third.image)->pages.size() == 5);
    CHECK(e.checkpoints().chain_length(third.image) == 3);
    (void)first;
}

TEST_CASE("rollback restores the recorded state and severs externals") {
    Engine e;
    const auto ws = build_workspace(small_spec());
    const auto src = e.create_branch(ws);
    const auto rec = e.record_version(src);
    const auto kid = e.fork(rec.version, 1, {})[0];
    const auto at_fork = e.snapshot(kid);
    const auto& r = first_region(ws, MemoryClass::Anonymous);
    e.write_page(kid, r.owner, r.vma_id, 1, 0, marker(9));
    e.fs_write(kid, "/home/user/notes.txt", 0, 0, marker(9));
    CHECK_FALSE(diff(at_fork, e.snapshot(kid)).empty());
    e.rollback(kid, rec.version);
    CHECK(diff(at_fork, e.snapshot(kid)).empty());

    // The source can roll back to its own recording too; externals do not come back.
    e.write_page(src, r.owner, r.vma_id, 1, 0, marker(3));
    e.rollback(src, rec.version);
    CHECK(external_count(e.snapshot(src)) == 0);
    CHECK(diff(e.snapshot(src), at_fork).count(DiffKind::Page) == 0);
    CHECK(e.audit_refcounts().ok);
    CHECK(e.audit_extents().ok);
}

TEST_CASE("rollback rejects versions outside the branch lineage") {
    Engine e;
    const auto a = e.create_branch(build_workspace(small_spec(1)));
    const auto b = e.create_branch(build_workspace(small_spec(2)), {}, false);
    const auto va = e.record_version(a);
    e.record_version(b);
    CHECK_THROWS_AS(e.rollback(b, va.version), Error);
    CHECK_THROWS_AS(e.rollback(a, 999), Error);
}

TEST_CASE("rollback to a failed checkpoint is refused") {
    Engine e;
    const auto b = e.create_branch(build_workspace(small_spec()));
    e.checkpoints().fail_next_write();
    const auto rec = e.record_version(b);
    CHECK(rec.handle->wait() == CheckpointState::Failed);
    try {
        e.rollback(b, rec.version);
        FAIL("expected failure");
    } catch (const Error& err) {
        CHECK(err.code() == ErrorCode::StorageFailure);
    }
    // The next record does not chain onto the failed image.
    const auto next = e.record_version(b);
    CHECK_FALSE(next.chained);
    CHECK(next.handle->wait() == CheckpointState::Durable);
}

TEST_CASE("discarded branches accept nothing and release their pages") {
    Engine e;
    const auto src = e.create_branch(build_workspace(small_spec()));
    const auto base_pages = e.pages().live_pages();
    const auto v = e.record_version(src).version;
    ForkOptions eager;
    eager.memory = MemoryMode::Eager;
    const auto kids = e.fork(v, 2, {}, eager);
    CHECK(e.pages().live_pages() > base_pages);
    for (auto k : kids) e.discard(k);
    CHECK(e.pages().live_pages() == base_pages);
    CHECK(e.status(kids[0]) == BranchStatus::Discarded);
    CHECK_THROWS_AS(e.write_page(kids[0], 1, 1, 0, 0, marker(1)), Error);
    CHECK_THROWS_AS(e.record_version(kids[1]), Error);
    CHECK_THROWS_AS(e.discard(kids[1]), Error);
    CHECK(e.audit_refcounts().ok);
}

TEST_CASE("freeze twice is an error") {
    Engine e;
    const auto b = e.create_branch(build_workspace(small_spec()));
    e.freeze(b);
    CHECK_THROWS_AS(e.freeze(b), Error);
    CHECK_THROWS_AS(e.record_version(b), Error);
    e.resume(b);
    CHECK_THROWS_AS(e.resume(b), Error);
}

TEST_CASE("fork honours the branch cap") {
    EngineConfig cfg;
    cfg.branch_cap = 4;
    Engine e(cfg);
    const auto b = e.create_branch(build_workspace(small_spec()));
    const auto v = e.record_version(b).version;
    CHECK_THROWS_AS(e.fork(v, 4, {}), Error);
    CHECK(e.fork(v, 3, {}).size() == 3);
    CHECK_THROWS_AS(e.fork(v, 0, {}), Error);
}

TEST_CASE("promote replaces the user workspace and keeps host pids") {
    Engine e;
    const auto ws = build_workspace(small_spec());
    const auto user = e.create_branch(ws);
    const auto before = e.snapshot(user);
    const auto v = e.record_version(user).version;
    const auto kid = e.fork(v, 1, {})[0];
    const auto& r = first_region(ws, MemoryClass::Anonymous);
    e.write_page(kid, r.owner, r.vma_id, 2, 0, marker(5));
    e.fs_write(kid, "/home/user/notes.txt", 1, 0, marker(5));
    const auto action = e.attempt_external(kid, "POST /submit");
    REQUIRE(action);
    const auto promoted_view = e.snapshot(kid);

    const auto rec = e.commit_promote(kid);
    CHECK(rec.user == user);
    CHECK(rec.replaced.size() == ws.processes.size());
    CHECK(e.status(kid) == BranchStatus::Promoted);
    const auto after = e.snapshot(user);
    CHECK(diff(promoted_view, after).empty());
    for (std::size_t i = 0; i < after.processes.size(); ++i) {
        CHECK(after.processes[i].host_pid == before.processes[i].host_pid);
    }
    CHECK(e.held_actions().size() == 1);
    e.release_external(*action);
    CHECK(e.released_actions().size() == 1);
    CHECK(e.audit_refcounts().ok);
    CHECK(e.audit_extents().ok);
}

TEST_CASE("external effects from unpromoted branches stay queued") {
    Engine e;
    const auto user = e.create_branch(build_workspace(small_spec()));
    const auto v = e.record_version(user).version;
    ForkOptions restricted;
    restricted.egress = EgressMode::Restricted;
    const auto r = e.fork(v, 1, {}, restricted)[0];
    const auto d = e.fork(v, 1, {})[0];
    CHECK_FALSE(e.attempt_external(r, "send mail"));
    const auto id = e.attempt_external(d, "send mail");
    REQUIRE(id);
    CHECK_THROWS_AS(e.release_external(*id), Error);
    CHECK(e.released_actions().empty());
    bool denied = false;
    for (const auto& ev : e.policy_events(r)) denied = denied || ev.kind == PolicyEventKind::EgressDenied;
    CHECK(denied);
}

TEST_CASE("merge applies clean changes and gates conflicts") {
    Engine e;
    const auto user = e.create_branch(build_workspace(small_spec()));
    const auto v = e.record_version(user).version;
    const auto kids = e.fork(v, 2, {});
    e.fs_write(kids[0], "/home/user/notes.txt", 0, 0, marker(1));
    e.fs_write(kids[1], "/usr/lib/libx.so", 2, 0, marker(2));
    e.fs_write(kids[1], "/home/user/notes.txt", 0, 0, marker(3));
    e.fs_write(kids[0], "/home/user/.ssh/id_ed25519", 0, 0, marker(4));

    SUBCASE("no approver leaves gated paths alone") {
        const auto rep = e.commit_merge(kids, {});
        CHECK(rep.ancestor == v);
        CHECK(rep.merged == std::vector<std::string>{"/usr/lib/libx.so"});
        CHECK(rep.unresolved.size() == 2);
        CHECK(e.fs_read(user, "/usr/lib/libx.so", 2).byte_at(0) == 2);
        CHECK(e.fs_read(user, "/home/user/notes.txt", 0) == e.version_state(v).files.at("/home/user/notes.txt")[0]);
    }
    SUBCASE("approver picks a winner") {
        MergePolicy p;
        p.approve = [&](const MergeQuestion& q) {
            return MergeAnswer{MergeChoice::TakeBranch, q.candidates.front()};
        };
        const auto rep = e.commit_merge(kids, p);
        CHECK(rep.unresolved.empty());
        CHECK(e.fs_read(user, "/home/user/notes.txt", 0).byte_at(0) == 1);
        CHECK(e.fs_read(user, "/home/user/.ssh/id_ed25519", 0).byte_at(0) == 4);
    }
    SUBCASE("abort rejects the merge") {
        MergePolicy p;
        p.approve = [](const MergeQuestion&) { return MergeAnswer{MergeChoice::Abort, 0}; };
        CHECK_THROWS_AS(e.commit_merge(kids, p), Error);
    }
    CHECK(e.audit_extents().ok);
}

TEST_CASE("guarded writes and access checks follow the branch profile") {
    Engine e;
    const auto user = e.create_branch(build_workspace(small_spec()));
    const auto v = e.record_version(user).version;
    SecurityProfile p;
    p.paths = {"/home/user/notes.txt"};
    p.syscalls = {"read"};
    const auto b = e.fork(v, 1, p)[0];
    const auto before = e.snapshot(b);
    CHECK_FALSE(e.guarded_fs_write(b, "/usr/lib/libx.so", 0, 0, marker(1)));
    CHECK(diff(before, e.snapshot(b)).empty());
    CHECK(e.guarded_fs_write(b, "/home/user/notes.txt", 0, 0, marker(1)));
    CHECK(e.access(b, {0, AccessKind::Syscall, "read", 0, Actor::Agent}) == Decision::Allow);
    CHECK(e.access(b, {0, AccessKind::Syscall, "ptrace", 0, Actor::Agent}) == Decision::Deny);
    CHECK(e.audit_lines(b).size() >= 2);
}

TEST_CASE("footprint grows by divergence under CoW and by the workspace under eager copy") {
    auto spec = small_spec();
    spec.anon_bytes = 400 * kPageSize;
    Engine cow;
    const auto a = cow.create_branch(build_workspace(spec));
    const auto base = cow.footprint().total();
    const auto v = cow.record_version(a).version;
    cow.fork(v, 4, {});
    CHECK(cow.footprint().total() < base + base / 2);

    Engine eager;
    const auto b = eager.create_branch(build_workspace(spec));
    const auto vb = eager.record_version(b).version;
    const auto recorded = eager.footprint().total();
    ForkOptions o;
    o.memory = MemoryMode::Eager;
    const auto kids = eager.fork(vb, 4, {}, o);
    CHECK(eager.footprint().total() > 4 * base);
    for (auto k : kids) eager.discard(k);
    CHECK(eager.footprint().total() == recorded);
}

TEST_CASE("serial and parallel fork build the same branches") {
    Engine e;
    const auto b = e.create_branch(build_workspace(small_spec()));
    const auto v = e.record_version(b).version;
    ForkOptions serial;
    serial.policy = ExecPolicy::Serial;
    const auto s = e.fork(v, 3, {}, serial);
    const auto p = e.fork(v, 3, {});
    for (std::size_t i = 0; i < 3; ++i) CHECK(diff(e.snapshot(s[i]), e.snapshot(p[i])).empty());
}

TEST_CASE("version tree tracks branches and lineage") {
    Engine e;
    const auto b = e.create_branch(build_workspace(small_spec()));
    const auto v1 = e.record_version(b).version;
    const auto k = e.fork(v1, 1, {})[0];
    const auto v2 = e.record_version(k).version;
    const auto t = e.tree();
    CHECK(t.is_ancestor(v1, v2));
    CHECK(t.lineage(v2) == std::vector<VersionId>{v2, v1});
    CHECK(t.branch(k).node == v2);
    CHECK(VersionTree::from_json(t.to_json()) == t);
}
