#include "fixtures.hpp"

#include "forkspace/workspace.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

using namespace forkspace;
using forkspace::testing::marker;
using forkspace::testing::small_spec;

TEST_CASE("synthetic pages are deterministic and writes are value semantics") {
    const auto a = PageContent::synthetic(42);
    const auto b = PageContent::synthetic(42);
    CHECK(a == b);
    CHECK(a.digest() == b.digest());
    CHECK_FALSE(a == PageContent::synthetic(43));

    const auto m = marker(9);
    const auto w = a.with_write(100, m);
    CHECK(w.byte_at(100) == 9);
    CHECK(w.byte_at(107) == 9);
    CHECK(a.byte_at(100) == b.byte_at(100));
    CHECK_FALSE(w == a);

    const auto bytes = w.bytes();
    CHECK(PageContent::from_bytes(bytes) == w);
    CHECK_THROWS_AS(a.with_write(kPageSize - 4, m), Error);
}

TEST_CASE("page table copy shares pages and writes break copy-on-write") {
    PageStore store;
    PageTable t(store, 4);
    t.install(0, PageContent::synthetic(1));
    t.install(1, PageContent::synthetic(2));
    const auto live = store.live_pages();

    PageTable c(t);
    CHECK(store.live_pages() == live);
    CHECK(store.refcount(t.slot(0).page) == 2);
    CHECK(c.slot(0).write_protected);

    const auto m = marker(5);
    CHECK(c.write(0, 0, m) == WriteOutcome::CowBreak);
    CHECK(store.refcount(t.slot(0).page) == 1);
    CHECK(t.read(0)->byte_at(0) != 5);
    CHECK(c.read(0)->byte_at(0) == 5);
    CHECK(c.write(0, 8, m) == WriteOutcome::InPlace);
    CHECK(c.write(2, 0, m) == WriteOutcome::Populated);
    CHECK_FALSE(t.read(2).has_value());
    CHECK(store.counters().cow_breaks == 1);
}

TEST_CASE("build_workspace is deterministic and valid") {
    const auto a = build_workspace(small_spec(5));
    const auto b = build_workspace(small_spec(5));
    CHECK(validate(a).empty());
    CHECK(diff(a, b).empty());
    CHECK(a.processes.size() == 6);
    CHECK(a.files.size() == 3);
    CHECK(a.connections.size() == 4);
    CHECK(a.gui_buffers.size() == 1);

    std::uint64_t anon = 0;
    for (const auto& r : a.regions) anon += r.cls == MemoryClass::Anonymous ? r.length : 0;
    CHECK(anon == 96);
}

TEST_CASE("build_workspace rejects bad specs") {
    auto s = small_spec();
    s.processes = 0;
    CHECK_THROWS_AS(build_workspace(s), Error);
    s = small_spec();
    s.anon_bytes = kPageSize + 1;
    CHECK_THROWS_AS(build_workspace(s), Error);
    s = small_spec();
    s.file_manifest.push_back({"relative/path", kPageSize});
    CHECK_THROWS_AS(build_workspace(s), Error);
}

TEST_CASE("diff reports each divergent location and ignores host pids") {
    const auto a = build_workspace(small_spec());
    auto b = a;
    for (auto& p : b.processes) p.host_pid += 1000;
    b.namespace_id = 99;
    CHECK(diff(a, b).empty());

    b.files.begin()->second[0] = b.files.begin()->second[0].with_write(0, marker(1));
    for (auto& r : b.regions) {
        if (r.length > 1 && r.pages[1]) {
            r.pages[1] = r.pages[1]->with_write(0, marker(2));
            break;
        }
    }
    b.connections.pop_back();
    const auto d = diff(a, b);
    CHECK(d.count(DiffKind::FilePage) == 1);
    CHECK(d.count(DiffKind::Page) == 1);
    CHECK(d.count(DiffKind::Connection) == 1);
    CHECK(diff(a, b, ExecPolicy::Serial).entries == d.entries);
}

TEST_CASE("validate catches a broken process tree") {
    auto ws = build_workspace(small_spec());
    ws.processes[1].parent_local_pid = 777;
    CHECK_FALSE(validate(ws).empty());
}

TEST_CASE("tcp repair state encodes losslessly") {
    TcpRepairState s{17, 99, {1, 2, 3}, {}};
    CHECK(TcpRepairState::decode(s.encode()) == s);
    auto blob = s.encode();
    blob.pop_back();
    CHECK_THROWS_AS(TcpRepairState::decode(blob), Error);
}

TEST_CASE("workspace spec json round trip") {
    const auto s = WorkspaceSpec::chromium_scale();
    const nlohmann::json j = s;
    const auto back = j.get<WorkspaceSpec>();
    CHECK(nlohmann::json(back) == j);
    CHECK(back.processes == 168);
}
