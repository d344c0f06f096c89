#pragma once

#include "forkspace/page.hpp"
#include "forkspace/workspace.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <unordered_map>

namespace forkspace {

/// Refcounted store of immutable extents (runs of at most kExtentPages blocks).
class ExtentStore {
  public:
    ExtentId create(std::vector<PageContent> blocks);
    void retain(ExtentId id);
    void release(ExtentId id);

    std::uint32_t refcount(ExtentId id) const;
    std::uint32_t length(ExtentId id) const;
    PageContent block(ExtentId id, std::uint32_t index) const;
    std::vector<PageContent> blocks(ExtentId id) const;

    /// In-place block update; only legal while the extent has a single referent.
    void overwrite_block(ExtentId id, std::uint32_t index, PageContent content);

    std::size_t live_extents() const;
    std::uint64_t live_blocks() const;
    std::uint64_t blocks_copied() const;
    void note_blocks_copied(std::uint64_t n);

    std::vector<std::pair<ExtentId, std::uint32_t>> refcounts() const;

    /// Content-addressed persistence: `blocks/<digest>.blk` plus `extents.json`.
    void persist(const std::filesystem::path& dir) const;
    static std::shared_ptr<ExtentStore> load(const std::filesystem::path& dir);

  private:
    struct Extent {
        std::vector<PageContent> blocks;
        std::uint32_t refs = 0;
    };
    const Extent& get(ExtentId id) const;

    mutable std::mutex mu_;
    std::unordered_map<ExtentId, Extent> extents_;
    ExtentId next_ = 1;
    std::uint64_t live_blocks_ = 0;
    std::uint64_t blocks_copied_ = 0;
};

struct FileExtents {
    std::uint32_t pages = 0;
    std::vector<ExtentId> extents;

    friend bool operator==(const FileExtents&, const FileExtents&) = default;
};

/// One filesystem version: path -> extent list. Copying a version shares every
/// extent (refcount bump, no block copies); writes replace the covering extent
/// in this version only.
class FsVersion {
  public:
    explicit FsVersion(std::shared_ptr<ExtentStore> store);
    FsVersion(const FsVersion& other);
    FsVersion& operator=(const FsVersion& other);
    FsVersion(FsVersion&& other) noexcept;
    FsVersion& operator=(FsVersion&& other) noexcept;
    ~FsVersion();

    /// Deep copy with fresh extents (the eager baseline).
    FsVersion deep_copy() const;

    void add_file(const std::string& path, const std::vector<PageContent>& pages);
    bool has_file(const std::string& path) const { return files_.count(path) != 0; }
    std::uint32_t file_pages(const std::string& path) const;
    ExtentId extent_for(const std::string& path, std::uint32_t page) const;
    PageContent read_block(const std::string& path, std::uint32_t page) const;

    /// Returns the extent now backing the page.
    ExtentId write(const std::string& path, std::uint32_t page, std::size_t offset,
                   std::span<const std::uint8_t> data);

    const std::map<std::string, FileExtents>& files() const noexcept { return files_; }
    ExtentStore& store() const noexcept { return *store_; }
    const std::shared_ptr<ExtentStore>& store_ptr() const noexcept { return store_; }

    FileContents materialize() const;

  private:
    void retain_all();
    void release_all();
    const FileExtents& file(const std::string& path) const;

    std::shared_ptr<ExtentStore> store_;
    std::map<std::string, FileExtents> files_;
};

/// Immutable filesystem snapshot referenced by version nodes.
struct FsSnapshot {
    std::uint64_t id = 0;
    FsVersion version;
};
using FsVersionId = std::uint64_t;

using CacheKey = std::pair<std::string, std::uint32_t>;

struct CachedPage {
    PageContent content;
    /// Extent the content was read from (or written into) when it was cached.
    ExtentId extent = 0;
    /// Read-only mapping of a layer entry rather than a privately owned page.
    bool from_layer = false;
};

/// Sealed page-cache layer. Constructed sealed: its entries never change.
/// Each entry holds a reference on its extent so the id cannot be rewritten in
/// place while the layer lives.
class PageCacheLayer {
  public:
    PageCacheLayer(LayerId id, std::shared_ptr<const PageCacheLayer> parent,
                   std::map<CacheKey, CachedPage> entries, std::shared_ptr<ExtentStore> store);
    ~PageCacheLayer();
    PageCacheLayer(const PageCacheLayer&) = delete;
    PageCacheLayer& operator=(const PageCacheLayer&) = delete;

    LayerId id() const noexcept { return id_; }
    bool sealed() const noexcept { return true; }
    const std::shared_ptr<const PageCacheLayer>& parent() const noexcept { return parent_; }
    const std::map<CacheKey, CachedPage>& entries() const noexcept { return entries_; }
    const CachedPage* find(const std::string& path, std::uint32_t page) const;
    std::size_t depth() const noexcept { return depth_; }

    /// Digest over every entry; constant for the layer's lifetime.
    std::uint64_t content_hash() const;

  private:
    LayerId id_;
    std::shared_ptr<const PageCacheLayer> parent_;
    std::map<CacheKey, CachedPage> entries_;
    std::shared_ptr<ExtentStore> store_;
    std::size_t depth_;
};

using LayerPtr = std::shared_ptr<const PageCacheLayer>;

struct FsCounters {
    std::uint64_t private_hits = 0;
    std::uint64_t layer_probes = 0;
    std::uint64_t layer_hits = 0;
    std::uint64_t admission_rejects = 0;
    std::uint64_t storage_reads = 0;
    std::uint64_t writes = 0;
    /// Layer hits served without matching extent ids; must stay zero.
    std::uint64_t admission_violations = 0;
};

/// A branch's filesystem address space: private cache, then the shared layer
/// chain, then its own extents.
class FsView {
  public:
    FsView(std::uint64_t id, FsVersion version, LayerPtr head);

    std::uint64_t id() const noexcept { return id_; }
    PageContent read(const std::string& path, std::uint32_t page);
    void write(const std::string& path, std::uint32_t page, std::size_t offset,
               std::span<const std::uint8_t> data);

    /// Moves the private cache into a new sealed layer whose parent is the old head.
    LayerPtr seal(LayerId layer_id);

    const FsVersion& version() const noexcept { return version_; }
    FsVersion& version() noexcept { return version_; }
    const LayerPtr& head() const noexcept { return head_; }
    const std::map<CacheKey, CachedPage>& cache() const noexcept { return cache_; }
    const FsCounters& counters() const noexcept { return counters_; }
    void reset_counters() noexcept { counters_ = {}; }
    std::size_t chain_depth() const noexcept { return head_ ? head_->depth() : 0; }

    /// Pages this view keeps privately (excludes read-only layer mappings).
    std::uint64_t private_cached_pages() const;

  private:
    std::uint64_t id_;
    FsVersion version_;
    LayerPtr head_;
    std::map<CacheKey, CachedPage> cache_;
    FsCounters counters_;
};

/// True iff `layer`'s entry for the page came from the same extent the view maps now.
bool admit_page(const PageCacheLayer& layer, const FsView& view, const std::string& path,
                std::uint32_t page);

// --- overlay baseline --------------------------------------------------------

enum class FileOp { ReadRo, ReadRw, WriteRw };

std::string_view to_string(FileOp op);

/// Per-operation latency calibration (milliseconds). Defaults reproduce the
/// depth-0 and depth-50 points of the overlay layer-depth measurement.
struct LayerCosts {
    double read_ro_base_ms = 1.212;
    double read_rw_base_ms = 1.312;
    double write_rw_base_ms = 2.412;
    double probe_ms = 0.088;

    double base(FileOp op) const;
};

struct LookupCost {
    std::uint32_t probes = 0;
    double latency_ms = 0.0;
};

/// Union-mount model: one writable upper over `depth` read-only lowers. Each
/// layer is a mountpoint, so an upper cannot itself be forked.
class OverlayModel {
  public:
    explicit OverlayModel(LayerCosts costs = {}) : costs_(costs) {}

    /// Stacks a new lower layer (the previous upper is frozen); returns its index.
    std::size_t push_lower();
    /// Forks a branch upper over layer `parent`; throws for branch-of-branch.
    std::size_t fork_branch(std::size_t parent);
    std::size_t depth() const noexcept { return lower_count_; }
    const LayerCosts& costs() const noexcept { return costs_; }

  private:
    LayerCosts costs_;
    std::vector<bool> is_branch_upper_;
    std::size_t lower_count_ = 0;
};

LookupCost overlay_lookup(const OverlayModel& model, std::size_t depth, FileOp op);

} // namespace forkspace
