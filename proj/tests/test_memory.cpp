#include "fixtures.hpp"

#include "forkspace/memory.hpp"

#include <doctest.h>

#include <filesystem>

using namespace forkspace;
using forkspace::testing::marker;

namespace {

struct Proc {
    LocalPid pid;
    std::vector<VmaMapping> vmas;
};

Proc make_proc(PageStore& store, LocalPid pid, std::uint32_t pages, std::uint64_t seed) {
    Proc p{pid, {}};
    VmaMapping v;
    v.vma_id = 1;
    v.table = std::make_shared<PageTable>(store, pages);
    for (std::uint32_t s = 0; s < pages; ++s) v.table->install(s, PageContent::synthetic(seed + s));
    p.vmas.push_back(std::move(v));
    return p;
}

DumpJob job_for(Proc& p, CheckpointStore& store, std::optional<ImageId> parent = {}, DirtySet dirty = {}) {
    DumpJob j;
    j.holders = create_snapshot_holders({{p.pid, &p.vmas}});
    j.parent = parent;
    j.dirty = std::move(dirty);
    j.handle = std::make_shared<CheckpointHandle>(store.next_id());
    return j;
}

FlatImage live_image(const Proc& p) {
    FlatImage out;
    for (const auto& v : p.vmas) {
        for (std::uint32_t s = 0; s < v.length(); ++s) {
            if (auto c = v.table->read(s)) out.emplace(SlotKey{p.pid, v.vma_id, s}, *c);
        }
    }
    return out;
}

} // namespace

TEST_CASE("snapshot holders share tables and allocate nothing") {
    PageStore store;
    auto p = make_proc(store, 1, 64, 100);
    const auto before = store.counters();
    auto holders = create_snapshot_holders({{p.pid, &p.vmas}});
    const auto after = store.counters();
    CHECK(after.allocations == before.allocations);
    CHECK(after.pte_installs == before.pte_installs);
    REQUIRE(holders.size() == 1);
    CHECK(holders[0].vmas[0].second.get() == p.vmas[0].table.get());
    CHECK(holders[0].state == HolderState::Held);
}

TEST_CASE("writing after a holder exists unshares the table, holder keeps frozen pages") {
    PageStore store;
    auto p = make_proc(store, 1, 8, 7);
    const auto frozen = live_image(p);
    auto holders = create_snapshot_holders({{p.pid, &p.vmas}});
    p.vmas[0].writable().write(3, 0, marker(1));
    CHECK(holders[0].vmas[0].second.get() != p.vmas[0].table.get());
    CHECK(*holders[0].vmas[0].second->read(3) == frozen.at({1, 1, 3}));
    CHECK(p.vmas[0].table->read(3)->byte_at(0) == 1);
}

TEST_CASE("share_vma_cow installs entries only for anonymous memory") {
    PageStore store;
    auto p = make_proc(store, 1, 16, 3);
    VmaMapping dst;
    share_vma_cow(p.vmas[0], dst);
    CHECK(store.refcount(dst.table->slot(0).page) == 2);
    CHECK(store.counters().bytes_copied == 0);
    p.vmas[0].cls = MemoryClass::Shared;
    VmaMapping other;
    CHECK_THROWS_AS(share_vma_cow(p.vmas[0], other), Error);
}

TEST_CASE("async dump under a stalled daemon still captures the frozen state") {
    PageStore pages;
    CheckpointStore store;
    DumpDaemon daemon(store);
    auto p = make_proc(pages, 1, 32, 50);
    const auto frozen = live_image(p);
    daemon.stall();
    auto h = daemon.dump_async(job_for(p, store));
    CHECK(h->state() == CheckpointState::Pending);
    CHECK_THROWS_AS(daemon.drain(), Error);
    for (std::uint32_t s = 0; s < 32; ++s) p.vmas[0].writable().write(s, 0, marker(0xee));
    daemon.unstall();
    CHECK(h->wait() == CheckpointState::Durable);
    CHECK(store.flatten(h->image_id()) == frozen);
}

TEST_CASE("chained images carry exactly the dirty pages") {
    PageStore pages;
    CheckpointStore store;
    DumpDaemon daemon(store);
    auto p = make_proc(pages, 1, 20, 9);
    const auto base = daemon.dump_sync(job_for(p, store));
    REQUIRE(base->state() == CheckpointState::Durable);

    DirtySet dirty;
    for (std::uint32_t s : {2u, 5u, 11u}) {
        p.vmas[0].writable().write(s, 16, marker(static_cast<std::uint8_t>(s)));
        dirty.insert({1, 1, s});
    }
    const auto inc = daemon.dump_sync(job_for(p, store, base->image_id(), dirty));
    CHECK(store.get(inc->image_id())->pages.size() == 3);
    CHECK(store.chain_length(inc->image_id()) == 2);
    CHECK(store.flatten(inc->image_id()) == live_image(p));
    CHECK(daemon.pages_dumped() == 23);

    store.erase(base->image_id());
    CHECK_THROWS_AS(store.flatten(inc->image_id()), Error);
}

TEST_CASE("an injected storage failure marks the handle failed") {
    PageStore pages;
    CheckpointStore store;
    DumpDaemon daemon(store);
    auto p = make_proc(pages, 1, 4, 1);
    store.fail_next_write();
    const auto h = daemon.dump_sync(job_for(p, store));
    CHECK(h->state() == CheckpointState::Failed);
    CHECK_FALSE(store.contains(h->image_id()));
}

TEST_CASE("image directory round trip") {
    PageStore pages;
    CheckpointStore store;
    auto p = make_proc(pages, 4, 5, 77);
    auto j = job_for(p, store);
    j.tree_image = {1, 2, 3};
    const auto img = build_image(j);
    const auto root = std::filesystem::temp_directory_path() / "forkspace_test_images";
    std::filesystem::remove_all(root);
    const auto dir = write_image_dir(img, root);
    CHECK(std::filesystem::file_size(dir / "pages.bin") == 5 * kPageRecordSize);
    CHECK(read_image_dir(root, img.image_id) == img);
    CHECK_THROWS_AS(read_image_dir(root, img.image_id + 100), Error);
    std::filesystem::remove_all(root);
}
