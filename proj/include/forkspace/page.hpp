#pragma once

#include "forkspace/types.hpp"

#include <array>
#include <atomic>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

namespace forkspace {

using PageBytes = std::array<std::uint8_t, kPageSize>;

/// Immutable page content. Either synthetic (bytes derived from a seed, so
/// multi-gigabyte fixtures need no backing memory) or explicitly owned bytes.
/// Equality is bit-exact regardless of representation.
class PageContent {
  public:
    /// All-zero page.
    PageContent() = default;

    static PageContent synthetic(std::uint64_t seed);
    static PageContent from_bytes(std::span<const std::uint8_t> bytes);

    bool is_synthetic() const noexcept { return !bytes_ && seed_ != 0; }
    bool is_zero_fill() const noexcept { return !bytes_ && seed_ == 0; }
    std::uint64_t seed() const noexcept { return seed_; }
    /// Identity of the owned byte buffer; null for synthetic and zero pages.
    const void* storage() const noexcept { return bytes_.get(); }

    void copy_to(std::span<std::uint8_t> out) const;
    PageBytes bytes() const;
    std::uint8_t byte_at(std::size_t offset) const;

    /// Returns a new content equal to this one with `data` written at `offset`.
    PageContent with_write(std::size_t offset, std::span<const std::uint8_t> data) const;

    std::uint64_t digest() const;

    friend bool operator==(const PageContent& a, const PageContent& b);

  private:
    std::uint64_t seed_ = 0;
    std::shared_ptr<const PageBytes> bytes_;
};

struct PageStoreCounters {
    std::uint64_t live_pages = 0;
    std::uint64_t allocations = 0;
    std::uint64_t cow_breaks = 0;
    std::uint64_t bytes_copied = 0;
    std::uint64_t pte_installs = 0;
};

/// Reference-counted page pool shared by every branch, holder and version pin.
///
/// Entries live in fixed-size chunks so addresses stay stable while other
/// threads allocate; refcounts are atomic so concurrent forks only contend on
/// the allocation lock.
class PageStore {
  public:
    PageStore();
    ~PageStore();
    PageStore(const PageStore&) = delete;
    PageStore& operator=(const PageStore&) = delete;

    /// New page with refcount 1.
    PageId allocate(PageContent content);
    void retain(PageId id, std::uint32_t count = 1);
    void release(PageId id);

    std::uint32_t refcount(PageId id) const;
    const PageContent& content(PageId id) const;

    /// In-place update; caller must be the sole referent.
    void overwrite(PageId id, PageContent content);

    void note_cow_break() noexcept;
    void note_pte_installs(std::uint64_t n) noexcept;

    PageStoreCounters counters() const noexcept;
    std::uint64_t live_pages() const noexcept { return live_.load(std::memory_order_relaxed); }

    /// Visits every live page id with its refcount (not thread-safe against writers).
    template <typename Fn>
    void for_each_live(Fn&& fn) const {
        const PageId end = next_id_snapshot();
        for (PageId id = 1; id < end; ++id) {
            auto* e = entry_if_allocated(id);
            if (e && e->refs.load(std::memory_order_relaxed) > 0) {
                fn(id, e->refs.load(std::memory_order_relaxed));
            }
        }
    }

  private:
    struct Entry {
        PageContent content;
        std::atomic<std::uint32_t> refs{0};
    };
    static constexpr std::size_t kChunkBits = 16;
    static constexpr std::size_t kChunkSize = std::size_t{1} << kChunkBits;
    static constexpr std::size_t kMaxChunks = std::size_t{1} << 16;

    Entry& entry(PageId id) const;
    Entry* entry_if_allocated(PageId id) const;
    PageId next_id_snapshot() const;

    std::unique_ptr<std::atomic<Entry*>[]> chunks_;
    mutable std::mutex alloc_mu_;
    std::vector<PageId> free_;
    PageId next_id_ = 1;
    std::atomic<std::uint64_t> live_{0};
    std::atomic<std::uint64_t> allocations_{0};
    std::atomic<std::uint64_t> cow_breaks_{0};
    std::atomic<std::uint64_t> pte_installs_{0};
};

struct Slot {
    PageId page = kNoPage;
    bool write_protected = false;
};

enum class WriteOutcome { Populated, InPlace, CowBreak };

/// One VMA's page table. Every populated slot holds one reference on its page,
/// so a page's refcount equals the number of tables mapping it.
class PageTable {
  public:
    PageTable(PageStore& store, std::uint32_t length);
    ~PageTable();

    /// Installs the source's entries write-protected; no page contents move.
    PageTable(const PageTable& other);
    PageTable& operator=(const PageTable&) = delete;

    std::uint32_t length() const noexcept { return static_cast<std::uint32_t>(slots_.size()); }
    const Slot& slot(std::uint32_t index) const;
    std::span<const Slot> slots() const noexcept { return slots_; }
    PageStore& store() const noexcept { return *store_; }

    std::optional<PageContent> read(std::uint32_t index) const;

    /// Binds a fresh page holding `content` into an unpopulated or replaced slot.
    void install(std::uint32_t index, PageContent content);
    void clear(std::uint32_t index);
    WriteOutcome write(std::uint32_t index, std::size_t offset, std::span<const std::uint8_t> data);
    void write_protect_all() noexcept;

  private:
    PageStore* store_;
    std::vector<Slot> slots_;
};

} // namespace forkspace
