#include "forkspace/filesystem.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace forkspace {

// --- ExtentStore -------------------------------------------------------------

const ExtentStore::Extent& ExtentStore::get(ExtentId id) const {
    auto it = extents_.find(id);
    if (it == extents_.end()) throw Error(ErrorCode::NotFound, "unknown extent " + std::to_string(id));
    return it->second;
}

ExtentId ExtentStore::create(std::vector<PageContent> blocks) {
    if (blocks.empty() || blocks.size() > kExtentPages) {
        throw Error(ErrorCode::InvalidArgument, "extent length must be 1..64 blocks");
    }
    std::lock_guard lock(mu_);
    const ExtentId id = next_++;
    live_blocks_ += blocks.size();
    extents_.emplace(id, Extent{std::move(blocks), 1});
    return id;
}

void ExtentStore::retain(ExtentId id) {
    std::lock_guard lock(mu_);
    ++const_cast<Extent&>(get(id)).refs;
}

void ExtentStore::release(ExtentId id) {
    std::lock_guard lock(mu_);
    auto it = extents_.find(id);
    if (it == extents_.end() || it->second.refs == 0) {
        throw Error(ErrorCode::Internal, "extent refcount underflow");
    }
    if (--it->second.refs == 0) {
        live_blocks_ -= it->second.blocks.size();
        extents_.erase(it);
    }
}

std::uint32_t ExtentStore::refcount(ExtentId id) const {
    std::lock_guard lock(mu_);
    auto it = extents_.find(id);
    return it == extents_.end() ? 0 : it->second.refs;
}

std::uint32_t ExtentStore::length(ExtentId id) const {
    std::lock_guard lock(mu_);
    return static_cast<std::uint32_t>(get(id).blocks.size());
}

PageContent ExtentStore::block(ExtentId id, std::uint32_t index) const {
    std::lock_guard lock(mu_);
    const auto& e = get(id);
    if (index >= e.blocks.size()) throw Error(ErrorCode::OutOfRange, "extent block out of range");
    return e.blocks[index];
}

std::vector<PageContent> ExtentStore::blocks(ExtentId id) const {
    std::lock_guard lock(mu_);
    return get(id).blocks;
}

void ExtentStore::overwrite_block(ExtentId id, std::uint32_t index, PageContent content) {
    std::lock_guard lock(mu_);
    auto& e = const_cast<Extent&>(get(id));
    if (e.refs != 1) throw Error(ErrorCode::Internal, "in-place write on a shared extent");
    e.blocks.at(index) = std::move(content);
}

std::size_t ExtentStore::live_extents() const {
    std::lock_guard lock(mu_);
    return extents_.size();
}

std::uint64_t ExtentStore::live_blocks() const {
    std::lock_guard lock(mu_);
    return live_blocks_;
}

std::uint64_t ExtentStore::blocks_copied() const {
    std::lock_guard lock(mu_);
    return blocks_copied_;
}

void ExtentStore::note_blocks_copied(std::uint64_t n) {
    std::lock_guard lock(mu_);
    blocks_copied_ += n;
}

std::vector<std::pair<ExtentId, std::uint32_t>> ExtentStore::refcounts() const {
    std::lock_guard lock(mu_);
    std::vector<std::pair<ExtentId, std::uint32_t>> out;
    out.reserve(extents_.size());
    for (const auto& [id, e] : extents_) out.emplace_back(id, e.refs);
    return out;
}

void ExtentStore::persist(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir / "blocks");
    nlohmann::json extents = nlohmann::json::object();
    std::lock_guard lock(mu_);
    for (const auto& [id, e] : extents_) {
        nlohmann::json digests = nlohmann::json::array();
        for (const auto& b : e.blocks) {
            const auto name = to_hex(b.digest());
            const auto file = dir / "blocks" / (name + ".blk");
            if (!std::filesystem::exists(file)) {
                const auto bytes = b.bytes();
                std::ofstream out(file, std::ios::binary);
                out.write(reinterpret_cast<const char*>(bytes.data()), kPageSize);
                if (!out) throw Error(ErrorCode::StorageFailure, "cannot write " + file.string());
            }
            digests.push_back(name);
        }
        extents[std::to_string(id)] = {{"refs", e.refs}, {"blocks", digests}};
    }
    nlohmann::json doc{{"format", 1}, {"next", next_}, {"extents", extents}};
    std::ofstream out(dir / "extents.json");
    out << doc.dump(1) << '\n';
    if (!out) throw Error(ErrorCode::StorageFailure, "cannot write extents.json");
}

std::shared_ptr<ExtentStore> ExtentStore::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "extents.json");
    if (!in) throw Error(ErrorCode::NotFound, "missing extents.json in " + dir.string());
    const auto doc = nlohmann::json::parse(in);
    auto store = std::make_shared<ExtentStore>();
    store->next_ = doc.at("next").get<ExtentId>();
    for (const auto& [key, value] : doc.at("extents").items()) {
        Extent e;
        e.refs = value.at("refs").get<std::uint32_t>();
        for (const auto& name : value.at("blocks")) {
            std::ifstream blk(dir / "blocks" / (name.get<std::string>() + ".blk"), std::ios::binary);
            Blob bytes(kPageSize);
            blk.read(reinterpret_cast<char*>(bytes.data()), kPageSize);
            if (!blk) throw Error(ErrorCode::StorageFailure, "missing block " + name.get<std::string>());
            e.blocks.push_back(PageContent::from_bytes(bytes));
        }
        store->live_blocks_ += e.blocks.size();
        store->extents_.emplace(std::stoull(key), std::move(e));
    }
    return store;
}

// --- FsVersion ---------------------------------------------------------------

FsVersion::FsVersion(std::shared_ptr<ExtentStore> store) : store_(std::move(store)) {}

FsVersion::FsVersion(const FsVersion& other) : store_(other.store_), files_(other.files_) {
    retain_all();
}

FsVersion& FsVersion::operator=(const FsVersion& other) {
    if (this != &other) {
        FsVersion tmp(other);
        *this = std::move(tmp);
    }
    return *this;
}

FsVersion::FsVersion(FsVersion&& other) noexcept
    : store_(std::move(other.store_)), files_(std::move(other.files_)) {
    other.files_.clear();
}

FsVersion& FsVersion::operator=(FsVersion&& other) noexcept {
    if (this != &other) {
        release_all();
        store_ = std::move(other.store_);
        files_ = std::move(other.files_);
        other.files_.clear();
    }
    return *this;
}

FsVersion::~FsVersion() { release_all(); }

void FsVersion::retain_all() {
    for (const auto& [path, f] : files_) {
        for (auto e : f.extents) store_->retain(e);
    }
}

void FsVersion::release_all() {
    if (!store_) return;
    for (const auto& [path, f] : files_) {
        for (auto e : f.extents) store_->release(e);
    }
    files_.clear();
}

FsVersion FsVersion::deep_copy() const {
    FsVersion out(store_);
    std::uint64_t copied = 0;
    for (const auto& [path, f] : files_) {
        FileExtents nf;
        nf.pages = f.pages;
        for (auto e : f.extents) {
            auto blocks = store_->blocks(e);
            copied += blocks.size();
            nf.extents.push_back(store_->create(std::move(blocks)));
        }
        out.files_.emplace(path, std::move(nf));
    }
    store_->note_blocks_copied(copied);
    return out;
}

void FsVersion::add_file(const std::string& path, const std::vector<PageContent>& pages) {
    if (files_.count(path)) throw Error(ErrorCode::InvalidArgument, "file already exists: " + path);
    FileExtents f;
    f.pages = static_cast<std::uint32_t>(pages.size());
    for (std::size_t i = 0; i < pages.size(); i += kExtentPages) {
        const auto end = std::min(pages.size(), i + kExtentPages);
        f.extents.push_back(store_->create({pages.begin() + static_cast<std::ptrdiff_t>(i),
                                            pages.begin() + static_cast<std::ptrdiff_t>(end)}));
    }
    files_.emplace(path, std::move(f));
}

const FileExtents& FsVersion::file(const std::string& path) const {
    auto it = files_.find(path);
    if (it == files_.end()) throw Error(ErrorCode::NotFound, "no such file: " + path);
    return it->second;
}

std::uint32_t FsVersion::file_pages(const std::string& path) const { return file(path).pages; }

ExtentId FsVersion::extent_for(const std::string& path, std::uint32_t page) const {
    const auto& f = file(path);
    if (page >= f.pages) throw Error(ErrorCode::OutOfRange, "page beyond end of " + path);
    return f.extents[page / kExtentPages];
}

PageContent FsVersion::read_block(const std::string& path, std::uint32_t page) const {
    return store_->block(extent_for(path, page), page % kExtentPages);
}

ExtentId FsVersion::write(const std::string& path, std::uint32_t page, std::size_t offset,
                          std::span<const std::uint8_t> data) {
    auto it = files_.find(path);
    if (it == files_.end()) throw Error(ErrorCode::NotFound, "no such file: " + path);
    auto& f = it->second;
    if (page >= f.pages) throw Error(ErrorCode::OutOfRange, "page beyond end of " + path);
    ExtentId& slot = f.extents[page / kExtentPages];
    const auto index = page % kExtentPages;
    const PageContent updated = store_->block(slot, index).with_write(offset, data);
    if (store_->refcount(slot) == 1) {
        store_->overwrite_block(slot, index, updated);
        return slot;
    }
    // Block CoW at extent granularity: the whole covering extent is replaced.
    auto blocks = store_->blocks(slot);
    blocks[index] = updated;
    store_->note_blocks_copied(blocks.size());
    const ExtentId fresh = store_->create(std::move(blocks));
    store_->release(slot);
    slot = fresh;
    return fresh;
}

FileContents FsVersion::materialize() const {
    FileContents out;
    for (const auto& [path, f] : files_) {
        std::vector<PageContent> pages;
        pages.reserve(f.pages);
        for (auto e : f.extents) {
            auto blocks = store_->blocks(e);
            pages.insert(pages.end(), blocks.begin(), blocks.end());
        }
        pages.resize(f.pages);
        out.emplace(path, std::move(pages));
    }
    return out;
}

// --- PageCacheLayer ----------------------------------------------------------

PageCacheLayer::PageCacheLayer(LayerId id, std::shared_ptr<const PageCacheLayer> parent,
                               std::map<CacheKey, CachedPage> entries,
                               std::shared_ptr<ExtentStore> store)
    : id_(id), parent_(std::move(parent)), entries_(std::move(entries)), store_(std::move(store)),
      depth_(parent_ ? parent_->depth() + 1 : 1) {
    for (auto& [key, e] : entries_) {
        e.from_layer = false;
        store_->retain(e.extent);
    }
}

PageCacheLayer::~PageCacheLayer() {
    for (const auto& [key, e] : entries_) store_->release(e.extent);
}

const CachedPage* PageCacheLayer::find(const std::string& path, std::uint32_t page) const {
    auto it = entries_.find(CacheKey{path, page});
    return it == entries_.end() ? nullptr : &it->second;
}

std::uint64_t PageCacheLayer::content_hash() const {
    std::uint64_t h = fnv1a(&id_, sizeof id_);
    for (const auto& [key, e] : entries_) {
        h = fnv1a(key.first.data(), key.first.size(), h);
        h = fnv1a(&key.second, sizeof key.second, h);
        h = fnv1a(&e.extent, sizeof e.extent, h);
        const auto d = e.content.digest();
        h = fnv1a(&d, sizeof d, h);
    }
    return h;
}

// --- FsView ------------------------------------------------------------------

FsView::FsView(std::uint64_t id, FsVersion version, LayerPtr head)
    : id_(id), version_(std::move(version)), head_(std::move(head)) {}

PageContent FsView::read(const std::string& path, std::uint32_t page) {
    const ExtentId current = version_.extent_for(path, page);
    CacheKey key{path, page};
    if (auto it = cache_.find(key); it != cache_.end()) {
        ++counters_.private_hits;
        return it->second.content;
    }
    for (const PageCacheLayer* layer = head_.get(); layer; layer = layer->parent().get()) {
        ++counters_.layer_probes;
        const CachedPage* hit = layer->find(path, page);
        if (!hit) continue;
        if (hit->extent != current) {
            ++counters_.admission_rejects;
            continue;
        }
        if (!admit_page(*layer, *this, path, page)) ++counters_.admission_violations;
        ++counters_.layer_hits;
        CachedPage mapped = *hit;
        mapped.from_layer = true;
        auto content = mapped.content;
        cache_.emplace(std::move(key), std::move(mapped));
        return content;
    }
    ++counters_.storage_reads;
    auto content = version_.store().block(current, page % kExtentPages);
    cache_.emplace(std::move(key), CachedPage{content, current, false});
    return content;
}

void FsView::write(const std::string& path, std::uint32_t page, std::size_t offset,
                   std::span<const std::uint8_t> data) {
    ++counters_.writes;
    const ExtentId fresh = version_.write(path, page, offset, data);
    cache_[CacheKey{path, page}] = CachedPage{version_.read_block(path, page), fresh, false};
}

LayerPtr FsView::seal(LayerId layer_id) {
    std::map<CacheKey, CachedPage> owned;
    for (auto& [key, e] : cache_) {
        if (!e.from_layer) owned.emplace(key, e);
    }
    cache_.clear();
    head_ = std::make_shared<const PageCacheLayer>(layer_id, head_, std::move(owned), version_.store_ptr());
    return head_;
}

std::uint64_t FsView::private_cached_pages() const {
    std::uint64_t n = 0;
    for (const auto& [key, e] : cache_) n += e.from_layer ? 0 : 1;
    return n;
}

bool admit_page(const PageCacheLayer& layer, const FsView& view, const std::string& path,
                std::uint32_t page) {
    const CachedPage* entry = layer.find(path, page);
    if (!entry) return false;
    return entry->extent == view.version().extent_for(path, page);
}

// --- overlay -----------------------------------------------------------------

std::string_view to_string(FileOp op) {
    switch (op) {
    case FileOp::ReadRo: return "read_ro";
    case FileOp::ReadRw: return "read_rw";
    case FileOp::WriteRw: return "write_rw";
    }
    return "?";
}

double LayerCosts::base(FileOp op) const {
    switch (op) {
    case FileOp::ReadRo: return read_ro_base_ms;
    case FileOp::ReadRw: return read_rw_base_ms;
    case FileOp::WriteRw: return write_rw_base_ms;
    }
    return 0.0;
}

std::size_t OverlayModel::push_lower() {
    is_branch_upper_.push_back(false);
    ++lower_count_;
    return is_branch_upper_.size() - 1;
}

std::size_t OverlayModel::fork_branch(std::size_t parent) {
    if (parent >= is_branch_upper_.size()) throw Error(ErrorCode::NotFound, "unknown overlay layer");
    if (is_branch_upper_[parent]) {
        throw Error(ErrorCode::InvalidArgument, "overlay branch layers are mountpoints and cannot be forked");
    }
    is_branch_upper_.push_back(true);
    return is_branch_upper_.size() - 1;
}

LookupCost overlay_lookup(const OverlayModel& model, std::size_t depth, FileOp op) {
    LookupCost c;
    // A materialized page sits in the upper layer; a cold read checks the upper
    // and then every lower layer.
    c.probes = op == FileOp::ReadRo ? static_cast<std::uint32_t>(depth + 1) : 1;
    c.latency_ms = model.costs().base(op) + model.costs().probe_ms * c.probes;
    return c;
}

} // namespace forkspace
