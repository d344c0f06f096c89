#include "forkspace/page.hpp"

#include <algorithm>
#include <cstring>

namespace forkspace {

namespace {

void fill_synthetic(std::uint64_t seed, std::span<std::uint8_t> out) {
    std::uint64_t state = seed;
    for (std::size_t i = 0; i < kPageSize; i += 8) {
        state = mix64(state);
        std::memcpy(out.data() + i, &state, 8);
    }
}

} // namespace

PageContent PageContent::synthetic(std::uint64_t seed) {
    PageContent c;
    // Seed 0 is reserved for the zero page.
    c.seed_ = seed == 0 ? 1 : seed;
    return c;
}

PageContent PageContent::from_bytes(std::span<const std::uint8_t> bytes) {
    if (bytes.size() != kPageSize) {
        throw Error(ErrorCode::InvalidArgument, "page content must be exactly one page");
    }
    PageContent c;
    auto owned = std::make_shared<PageBytes>();
    std::memcpy(owned->data(), bytes.data(), kPageSize);
    c.bytes_ = std::move(owned);
    return c;
}

void PageContent::copy_to(std::span<std::uint8_t> out) const {
    if (out.size() < kPageSize) {
        throw Error(ErrorCode::InvalidArgument, "output span smaller than a page");
    }
    if (bytes_) {
        std::memcpy(out.data(), bytes_->data(), kPageSize);
    } else if (seed_ == 0) {
        std::memset(out.data(), 0, kPageSize);
    } else {
        fill_synthetic(seed_, out.first(kPageSize));
    }
}

PageBytes PageContent::bytes() const {
    PageBytes out;
    copy_to(out);
    return out;
}

std::uint8_t PageContent::byte_at(std::size_t offset) const {
    if (offset >= kPageSize) throw Error(ErrorCode::OutOfRange, "page offset out of range");
    if (bytes_) return (*bytes_)[offset];
    if (seed_ == 0) return 0;
    return bytes()[offset];
}

PageContent PageContent::with_write(std::size_t offset, std::span<const std::uint8_t> data) const {
    if (offset > kPageSize || data.size() > kPageSize - offset) {
        throw Error(ErrorCode::OutOfRange, "write exceeds page bounds");
    }
    auto owned = std::make_shared<PageBytes>();
    copy_to(*owned);
    std::memcpy(owned->data() + offset, data.data(), data.size());
    PageContent c;
    c.bytes_ = std::move(owned);
    return c;
}

std::uint64_t PageContent::digest() const {
    if (bytes_) return fnv1a(bytes_->data(), kPageSize);
    auto b = bytes();
    return fnv1a(b.data(), kPageSize);
}

bool operator==(const PageContent& a, const PageContent& b) {
    if (a.bytes_ && a.bytes_ == b.bytes_) return true;
    if (!a.bytes_ && !b.bytes_) {
        if (a.seed_ == b.seed_) return true;
        // Distinct seeds (or zero vs seeded) still need a byte comparison to be exact.
    }
    PageBytes x;
    PageBytes y;
    a.copy_to(x);
    b.copy_to(y);
    return x == y;
}

// --- PageStore -------------------------------------------------------------

PageStore::PageStore() : chunks_(new std::atomic<Entry*>[kMaxChunks]) {
    for (std::size_t i = 0; i < kMaxChunks; ++i) chunks_[i].store(nullptr);
}

PageStore::~PageStore() {
    for (std::size_t i = 0; i < kMaxChunks; ++i) delete[] chunks_[i].load();
}

PageStore::Entry& PageStore::entry(PageId id) const {
    auto* e = entry_if_allocated(id);
    if (!e) throw Error(ErrorCode::NotFound, "unknown page id " + std::to_string(id));
    return *e;
}

PageStore::Entry* PageStore::entry_if_allocated(PageId id) const {
    if (id == kNoPage) return nullptr;
    const std::size_t chunk = id >> kChunkBits;
    if (chunk >= kMaxChunks) return nullptr;
    Entry* base = chunks_[chunk].load(std::memory_order_acquire);
    if (!base) return nullptr;
    return base + (id & (kChunkSize - 1));
}

PageId PageStore::next_id_snapshot() const {
    std::lock_guard lock(alloc_mu_);
    return next_id_;
}

PageId PageStore::allocate(PageContent content) {
    PageId id;
    {
        std::lock_guard lock(alloc_mu_);
        if (!free_.empty()) {
            id = free_.back();
            free_.pop_back();
        } else {
            id = next_id_++;
            const std::size_t chunk = id >> kChunkBits;
            if (chunk >= kMaxChunks) throw Error(ErrorCode::Internal, "page store exhausted");
            if (!chunks_[chunk].load(std::memory_order_relaxed)) {
                chunks_[chunk].store(new Entry[kChunkSize], std::memory_order_release);
            }
        }
    }
    Entry& e = entry(id);
    e.content = std::move(content);
    e.refs.store(1, std::memory_order_release);
    live_.fetch_add(1, std::memory_order_relaxed);
    allocations_.fetch_add(1, std::memory_order_relaxed);
    return id;
}

void PageStore::retain(PageId id, std::uint32_t count) {
    entry(id).refs.fetch_add(count, std::memory_order_relaxed);
}

void PageStore::release(PageId id) {
    Entry& e = entry(id);
    const auto prev = e.refs.fetch_sub(1, std::memory_order_acq_rel);
    if (prev == 0) throw Error(ErrorCode::Internal, "page refcount underflow");
    if (prev == 1) {
        e.content = PageContent{};
        live_.fetch_sub(1, std::memory_order_relaxed);
        std::lock_guard lock(alloc_mu_);
        free_.push_back(id);
    }
}

std::uint32_t PageStore::refcount(PageId id) const {
    auto* e = entry_if_allocated(id);
    return e ? e->refs.load(std::memory_order_acquire) : 0;
}

const PageContent& PageStore::content(PageId id) const { return entry(id).content; }

void PageStore::overwrite(PageId id, PageContent content) {
    Entry& e = entry(id);
    if (e.refs.load(std::memory_order_acquire) != 1) {
        throw Error(ErrorCode::Internal, "in-place write on a shared page");
    }
    e.content = std::move(content);
}

void PageStore::note_cow_break() noexcept { cow_breaks_.fetch_add(1, std::memory_order_relaxed); }

void PageStore::note_pte_installs(std::uint64_t n) noexcept {
    pte_installs_.fetch_add(n, std::memory_order_relaxed);
}

PageStoreCounters PageStore::counters() const noexcept {
    PageStoreCounters c;
    c.live_pages = live_.load();
    c.allocations = allocations_.load();
    c.cow_breaks = cow_breaks_.load();
    c.bytes_copied = c.cow_breaks * kPageSize;
    c.pte_installs = pte_installs_.load();
    return c;
}

// --- PageTable -------------------------------------------------------------

PageTable::PageTable(PageStore& store, std::uint32_t length) : store_(&store), slots_(length) {}

PageTable::~PageTable() {
    for (const auto& s : slots_) {
        if (s.page != kNoPage) store_->release(s.page);
    }
}

PageTable::PageTable(const PageTable& other) : store_(other.store_), slots_(other.slots_) {
    std::uint64_t installed = 0;
    for (auto& s : slots_) {
        if (s.page == kNoPage) continue;
        store_->retain(s.page);
        s.write_protected = true;
        ++installed;
    }
    store_->note_pte_installs(installed);
}

const Slot& PageTable::slot(std::uint32_t index) const {
    if (index >= slots_.size()) throw Error(ErrorCode::OutOfRange, "slot out of range");
    return slots_[index];
}

std::optional<PageContent> PageTable::read(std::uint32_t index) const {
    const Slot& s = slot(index);
    if (s.page == kNoPage) return std::nullopt;
    return store_->content(s.page);
}

void PageTable::install(std::uint32_t index, PageContent content) {
    clear(index);
    slots_[index].page = store_->allocate(std::move(content));
    slots_[index].write_protected = false;
}

void PageTable::clear(std::uint32_t index) {
    Slot& s = slots_.at(index);
    if (s.page != kNoPage) store_->release(s.page);
    s = Slot{};
}

WriteOutcome PageTable::write(std::uint32_t index, std::size_t offset,
                              std::span<const std::uint8_t> data) {
    if (index >= slots_.size()) throw Error(ErrorCode::OutOfRange, "slot out of range");
    Slot& s = slots_[index];
    if (s.page == kNoPage) {
        s.page = store_->allocate(PageContent{}.with_write(offset, data));
        s.write_protected = false;
        return WriteOutcome::Populated;
    }
    if (store_->refcount(s.page) > 1) {
        PageContent copy = store_->content(s.page).with_write(offset, data);
        const PageId fresh = store_->allocate(std::move(copy));
        store_->release(s.page);
        store_->note_cow_break();
        s.page = fresh;
        s.write_protected = false;
        return WriteOutcome::CowBreak;
    }
    // Sole owner: the write-protect bit is stale once every other mapping broke away.
    s.write_protected = false;
    store_->overwrite(s.page, store_->content(s.page).with_write(offset, data));
    return WriteOutcome::InPlace;
}

void PageTable::write_protect_all() noexcept {
    for (auto& s : slots_) {
        if (s.page != kNoPage) s.write_protected = true;
    }
}

} // namespace forkspace
