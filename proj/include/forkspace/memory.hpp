#pragma once

#include "forkspace/page.hpp"
#include "forkspace/process.hpp"
#include "forkspace/workspace.hpp"

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>
#include <unordered_set>

namespace forkspace {

/// Dirty-log key: (local pid, vma id, slot).
struct SlotKey {
    LocalPid pid = 0;
    VmaId vma = 0;
    std::uint32_t slot = 0;

    friend bool operator==(const SlotKey&, const SlotKey&) = default;
    friend auto operator<=>(const SlotKey&, const SlotKey&) = default;
};

struct SlotKeyHash {
    std::size_t operator()(const SlotKey& k) const noexcept {
        return static_cast<std::size_t>(mix64((std::uint64_t{k.pid} << 40) ^ (std::uint64_t{k.vma} << 20) ^ k.slot));
    }
};

using DirtySet = std::unordered_set<SlotKey, SlotKeyHash>;

/// Live VMA of a branch process. The table may be shared (by pointer) with
/// snapshot holders and version pins; it must be unshared before a write.
struct VmaMapping {
    VmaId vma_id = 0;
    MemoryClass cls = MemoryClass::Anonymous;
    std::uint64_t start = 0;
    std::optional<std::string> backing_file;
    std::uint32_t file_page_offset = 0;
    std::shared_ptr<PageTable> table;

    std::uint32_t length() const { return table ? table->length() : 0; }
    /// Returns a table this mapping owns exclusively, copying entries if shared.
    PageTable& writable();
};

struct VmaInfo {
    LocalPid pid = 0;
    VmaId vma_id = 0;
    MemoryClass cls = MemoryClass::Anonymous;
    std::uint64_t start = 0;
    std::uint32_t length = 0;
    std::optional<std::string> backing_file;
    std::uint32_t file_page_offset = 0;

    friend bool operator==(const VmaInfo&, const VmaInfo&) = default;
};

enum class HolderState { Held, Dumped, Reclaimed };

/// Point-in-time view of one process's address space. It shares the page
/// tables of the frozen process, so creating it copies neither pages nor
/// page-table entries.
struct SnapshotHolder {
    std::uint64_t holder_id = 0;
    LocalPid pid = 0;
    std::vector<std::pair<VmaInfo, std::shared_ptr<const PageTable>>> vmas;
    HolderState state = HolderState::Held;

    void reclaim();
};

/// One holder per process; O(process + VMA) work.
std::vector<SnapshotHolder> create_snapshot_holders(
    const std::vector<std::pair<LocalPid, std::vector<VmaMapping>*>>& processes);

/// Cross-namespace anonymous-memory sharing: dst receives the source's entries
/// write-protected, refcounts rise, no page content is copied.
void share_vma_cow(const VmaMapping& src, VmaMapping& dst);

struct PageRecord {
    LocalPid pid = 0;
    VmaId vma_id = 0;
    std::uint32_t slot = 0;
    PageContent content;

    friend bool operator==(const PageRecord&, const PageRecord&) = default;
};

struct CheckpointImage {
    ImageId image_id = 0;
    std::optional<ImageId> parent;
    std::vector<LocalPid> processes;
    std::vector<VmaInfo> vmas;
    std::vector<PageRecord> pages;
    Blob tree_image;
};

bool operator==(const CheckpointImage& a, const CheckpointImage& b);

/// Size of one pages.bin record: pid, vma id, slot, then the page.
inline constexpr std::size_t kPageRecordSize = 12 + kPageSize;

/// `<dir>/<image_id>/{meta.json,tree.bin,pages.bin}`.
std::filesystem::path write_image_dir(const CheckpointImage& image, const std::filesystem::path& root);
CheckpointImage read_image_dir(const std::filesystem::path& root, ImageId id);

using FlatImage = std::map<SlotKey, PageContent>;

/// Durable image storage; optionally mirrored to an on-disk directory.
class CheckpointStore {
  public:
    CheckpointStore() = default;
    explicit CheckpointStore(std::filesystem::path root) : root_(std::move(root)) {}

    ImageId next_id();
    void put(CheckpointImage image);
    std::shared_ptr<const CheckpointImage> get(ImageId id) const;
    bool contains(ImageId id) const;
    void erase(ImageId id);

    /// Resolves absent pages through ancestors; throws BrokenChain on a gap.
    FlatImage flatten(ImageId id) const;
    std::size_t chain_length(ImageId id) const;

    const std::optional<std::filesystem::path>& root() const noexcept { return root_; }
    /// Next put() fails as a storage error.
    void fail_next_write() { fail_next_ = true; }

  private:
    mutable std::mutex mu_;
    std::map<ImageId, std::shared_ptr<const CheckpointImage>> images_;
    ImageId next_ = 1;
    std::optional<std::filesystem::path> root_;
    bool fail_next_ = false;
};

enum class CheckpointState { Pending, Durable, Failed };

std::string_view to_string(CheckpointState s);

/// Shared completion state of one dump.
class CheckpointHandle {
  public:
    explicit CheckpointHandle(ImageId id) : image_id_(id) {}

    ImageId image_id() const noexcept { return image_id_; }
    CheckpointState state() const;
    /// Blocks until Durable or Failed.
    CheckpointState wait() const;
    void complete(CheckpointState s);

  private:
    ImageId image_id_;
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    CheckpointState state_ = CheckpointState::Pending;
};

using CheckpointHandlePtr = std::shared_ptr<CheckpointHandle>;

struct DumpJob {
    std::vector<SnapshotHolder> holders;
    std::optional<ImageId> parent;
    /// Slots dirtied since the parent's freeze; ignored for full images.
    DirtySet dirty;
    Blob tree_image;
    CheckpointHandlePtr handle;
};

/// Serializes a job's holders into an image (all pages, or dirty-only when
/// chained) and reclaims the holders.
CheckpointImage build_image(const DumpJob& job);

/// Background dump daemon. Jobs run in submission order, so a chained image's
/// parent is always durable first.
class DumpDaemon {
  public:
    explicit DumpDaemon(CheckpointStore& store);
    ~DumpDaemon();
    DumpDaemon(const DumpDaemon&) = delete;
    DumpDaemon& operator=(const DumpDaemon&) = delete;

    /// Returns immediately with a Pending handle.
    CheckpointHandlePtr dump_async(DumpJob job);
    /// Runs the job on the caller's thread (the synchronous-dump baseline).
    CheckpointHandlePtr dump_sync(DumpJob job);

    void stall();
    void unstall();
    /// Waits until every queued job has finished.
    void drain();
    std::size_t pages_dumped() const;

  private:
    void run();
    void execute(DumpJob& job);

    CheckpointStore& store_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable idle_cv_;
    std::deque<DumpJob> queue_;
    bool stalled_ = false;
    bool stop_ = false;
    bool busy_ = false;
    std::size_t pages_dumped_ = 0;
    std::thread worker_;
};

} // namespace forkspace
