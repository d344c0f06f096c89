#include "fixtures.hpp"

#include "forkspace/filesystem.hpp"

#include <doctest.h>

using namespace forkspace;
using forkspace::testing::marker;

namespace {

std::vector<PageContent> blocks(std::uint32_t n, std::uint64_t seed) {
    std::vector<PageContent> out;
    for (std::uint32_t i = 0; i < n; ++i) out.push_back(PageContent::synthetic(seed + i));
    return out;
}

FsVersion base_version(std::shared_ptr<ExtentStore> store) {
    FsVersion v(std::move(store));
    v.add_file("/data/a.bin", blocks(100, 1000));
    v.add_file("/data/b.bin", blocks(3, 5000));
    return v;
}

} // namespace

TEST_CASE("files are split into extents") {
    auto store = std::make_shared<ExtentStore>();
    auto v = base_version(store);
    CHECK(v.files().at("/data/a.bin").extents.size() == 2);
    CHECK(v.file_pages("/data/a.bin") == 100);
    CHECK(v.read_block("/data/a.bin", 70) == PageContent::synthetic(1070));
    CHECK_THROWS_AS(v.read_block("/data/a.bin", 100), Error);
    CHECK_THROWS_AS(v.read_block("/nope", 0), Error);
}

TEST_CASE("version copy shares extents and a write copies one extent") {
    auto store = std::make_shared<ExtentStore>();
    auto v = base_version(store);
    const auto blocks_before = store->live_blocks();
    FsVersion w(v);
    CHECK(store->live_blocks() == blocks_before);
    const auto e0 = v.extent_for("/data/a.bin", 3);
    CHECK(store->refcount(e0) == 2);

    const auto fresh = w.write("/data/a.bin", 3, 0, marker(4));
    CHECK(fresh != e0);
    CHECK(store->refcount(e0) == 1);
    CHECK(store->blocks_copied() == kExtentPages);
    CHECK(v.read_block("/data/a.bin", 3) == PageContent::synthetic(1003));
    CHECK(w.read_block("/data/a.bin", 3).byte_at(0) == 4);
    // A second write to the now-exclusive extent is in place.
    CHECK(w.write("/data/a.bin", 4, 0, marker(5)) == fresh);
    CHECK(store->blocks_copied() == kExtentPages);
}

TEST_CASE("deep copy owns fresh extents") {
    auto store = std::make_shared<ExtentStore>();
    auto v = base_version(store);
    auto d = v.deep_copy();
    CHECK(d.extent_for("/data/b.bin", 0) != v.extent_for("/data/b.bin", 0));
    CHECK(d.materialize() == v.materialize());
}

TEST_CASE("sealed layers serve reads to sibling views") {
    auto store = std::make_shared<ExtentStore>();
    FsView a(1, base_version(store), nullptr);
    for (std::uint32_t p = 0; p < 10; ++p) a.read("/data/a.bin", p);
    CHECK(a.counters().storage_reads == 10);
    const auto layer = a.seal(1);
    const auto hash = layer->content_hash();
    CHECK(layer->entries().size() == 10);

    FsView b(2, FsVersion(a.version()), layer);
    for (std::uint32_t p = 0; p < 10; ++p) CHECK(b.read("/data/a.bin", p) == PageContent::synthetic(1000 + p));
    CHECK(b.counters().layer_hits == 10);
    CHECK(b.counters().storage_reads == 0);
    CHECK(b.private_cached_pages() == 0);

    b.write("/data/a.bin", 2, 0, marker(9));
    CHECK(b.read("/data/a.bin", 2).byte_at(0) == 9);
    CHECK(layer->content_hash() == hash);
    CHECK(b.counters().admission_violations == 0);
}

TEST_CASE("admission rejects a layer page when the view's extent differs") {
    auto store = std::make_shared<ExtentStore>();
    FsView a(1, base_version(store), nullptr);
    a.read("/data/b.bin", 1);
    const auto layer = a.seal(1);

    FsVersion mine(a.version());
    mine.write("/data/b.bin", 0, 0, marker(3));
    FsView c(3, std::move(mine), layer);
    CHECK_FALSE(admit_page(*layer, c, "/data/b.bin", 1));
    CHECK(c.read("/data/b.bin", 1) == PageContent::synthetic(5001));
    CHECK(c.counters().admission_rejects == 1);
    CHECK(c.counters().storage_reads == 1);
}

TEST_CASE("chain lookups probe each layer once") {
    auto store = std::make_shared<ExtentStore>();
    FsView v(1, base_version(store), nullptr);
    for (LayerId id = 1; id <= 5; ++id) v.seal(id);
    CHECK(v.chain_depth() == 5);
    v.read("/data/a.bin", 50);
    CHECK(v.counters().layer_probes == 5);
    v.read("/data/a.bin", 50);
    CHECK(v.counters().layer_probes == 5);
    CHECK(v.counters().private_hits == 1);
}

TEST_CASE("extent store persists and reloads") {
    auto store = std::make_shared<ExtentStore>();
    auto v = base_version(store);
    const auto dir = std::filesystem::temp_directory_path() / "forkspace_test_extents";
    std::filesystem::remove_all(dir);
    store->persist(dir);
    const auto loaded = ExtentStore::load(dir);
    CHECK(loaded->live_extents() == store->live_extents());
    const auto e = v.extent_for("/data/a.bin", 0);
    CHECK(loaded->blocks(e) == store->blocks(e));
    std::filesystem::remove_all(dir);
}

TEST_CASE("overlay model costs grow with depth for cold reads only") {
    OverlayModel m;
    for (int i = 0; i < 10; ++i) m.push_lower();
    CHECK(overlay_lookup(m, 0, FileOp::ReadRo).probes == 1);
    CHECK(overlay_lookup(m, 10, FileOp::ReadRo).probes == 11);
    CHECK(overlay_lookup(m, 10, FileOp::ReadRw).latency_ms == overlay_lookup(m, 0, FileOp::ReadRw).latency_ms);
    CHECK(overlay_lookup(m, 50, FileOp::ReadRo).latency_ms == doctest::Approx(1.212 + 0.088 * 51));

    const auto br = m.fork_branch(3);
    CHECK_THROWS_AS(m.fork_branch(br), Error);
}
