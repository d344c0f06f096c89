#include "forkspace/memory.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace forkspace {

PageTable& VmaMapping::writable() {
    if (!table) throw Error(ErrorCode::Internal, "vma without page table");
    if (table.use_count() > 1) table = std::make_shared<PageTable>(*table);
    return *table;
}

void SnapshotHolder::reclaim() {
    vmas.clear();
    state = HolderState::Reclaimed;
}

std::vector<SnapshotHolder> create_snapshot_holders(
    const std::vector<std::pair<LocalPid, std::vector<VmaMapping>*>>& processes) {
    static std::atomic<std::uint64_t> next_holder{1};
    std::vector<SnapshotHolder> holders;
    holders.reserve(processes.size());
    for (const auto& [pid, vmas] : processes) {
        SnapshotHolder h;
        h.holder_id = next_holder.fetch_add(1);
        h.pid = pid;
        for (const auto& v : *vmas) {
            VmaInfo info{pid, v.vma_id, v.cls, v.start, v.length(), v.backing_file, v.file_page_offset};
            h.vmas.emplace_back(std::move(info), v.table);
        }
        holders.push_back(std::move(h));
    }
    return holders;
}

void share_vma_cow(const VmaMapping& src, VmaMapping& dst) {
    if (src.cls != MemoryClass::Anonymous) {
        throw Error(ErrorCode::InvalidArgument, "only anonymous VMAs are shared across branches");
    }
    if (!src.table) throw Error(ErrorCode::Internal, "source vma has no page table");
    dst.vma_id = src.vma_id;
    dst.cls = src.cls;
    dst.start = src.start;
    dst.backing_file = src.backing_file;
    dst.file_page_offset = src.file_page_offset;
    dst.table = std::make_shared<PageTable>(*src.table);
}

bool operator==(const CheckpointImage& a, const CheckpointImage& b) {
    return a.image_id == b.image_id && a.parent == b.parent && a.processes == b.processes &&
           a.vmas == b.vmas && a.pages == b.pages && a.tree_image == b.tree_image;
}

// --- image directory ---------------------------------------------------------

namespace {

void put_le32(std::uint8_t* out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint32_t get_le32(const std::uint8_t* in) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{in[i]} << (8 * i);
    return v;
}

nlohmann::json vma_json(const VmaInfo& v) {
    nlohmann::json j{{"pid", v.pid},       {"vma_id", v.vma_id}, {"class", std::string(to_string(v.cls))},
                     {"start", v.start},   {"length", v.length}, {"file_page_offset", v.file_page_offset}};
    j["backing_file"] = v.backing_file ? nlohmann::json(*v.backing_file) : nlohmann::json(nullptr);
    return j;
}

MemoryClass class_from(const std::string& s) {
    if (s == "anonymous") return MemoryClass::Anonymous;
    if (s == "file-backed") return MemoryClass::FileBacked;
    if (s == "shared") return MemoryClass::Shared;
    throw Error(ErrorCode::InvalidArgument, "unknown memory class " + s);
}

} // namespace

std::filesystem::path write_image_dir(const CheckpointImage& image, const std::filesystem::path& root) {
    const auto dir = root / std::to_string(image.image_id);
    std::filesystem::create_directories(dir);

    nlohmann::json vmas = nlohmann::json::array();
    for (const auto& v : image.vmas) vmas.push_back(vma_json(v));
    nlohmann::json meta{{"format", 1},
                        {"image_id", image.image_id},
                        {"parent", image.parent ? nlohmann::json(*image.parent) : nlohmann::json(nullptr)},
                        {"processes", image.processes},
                        {"vmas", vmas},
                        {"page_records", image.pages.size()}};
    {
        std::ofstream out(dir / "meta.json");
        out << meta.dump(1) << '\n';
        if (!out) throw Error(ErrorCode::StorageFailure, "cannot write meta.json");
    }
    {
        std::ofstream out(dir / "tree.bin", std::ios::binary);
        out.write(reinterpret_cast<const char*>(image.tree_image.data()),
                  static_cast<std::streamsize>(image.tree_image.size()));
        if (!out) throw Error(ErrorCode::StorageFailure, "cannot write tree.bin");
    }
    std::ofstream out(dir / "pages.bin", std::ios::binary);
    std::vector<std::uint8_t> rec(kPageRecordSize);
    for (const auto& p : image.pages) {
        put_le32(rec.data(), p.pid);
        put_le32(rec.data() + 4, p.vma_id);
        put_le32(rec.data() + 8, p.slot);
        p.content.copy_to(std::span(rec).subspan(12));
        out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    }
    if (!out) throw Error(ErrorCode::StorageFailure, "cannot write pages.bin");
    return dir;
}

CheckpointImage read_image_dir(const std::filesystem::path& root, ImageId id) {
    const auto dir = root / std::to_string(id);
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw Error(ErrorCode::NotFound, "missing image " + std::to_string(id));
    const auto meta = nlohmann::json::parse(meta_in);
    CheckpointImage img;
    img.image_id = meta.at("image_id").get<ImageId>();
    if (!meta.at("parent").is_null()) img.parent = meta.at("parent").get<ImageId>();
    img.processes = meta.at("processes").get<std::vector<LocalPid>>();
    for (const auto& v : meta.at("vmas")) {
        VmaInfo info;
        info.pid = v.at("pid").get<LocalPid>();
        info.vma_id = v.at("vma_id").get<VmaId>();
        info.cls = class_from(v.at("class").get<std::string>());
        info.start = v.at("start").get<std::uint64_t>();
        info.length = v.at("length").get<std::uint32_t>();
        info.file_page_offset = v.at("file_page_offset").get<std::uint32_t>();
        if (!v.at("backing_file").is_null()) info.backing_file = v.at("backing_file").get<std::string>();
        img.vmas.push_back(std::move(info));
    }
    {
        std::ifstream in(dir / "tree.bin", std::ios::binary);
        img.tree_image.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    std::ifstream in(dir / "pages.bin", std::ios::binary);
    const auto expected = meta.at("page_records").get<std::size_t>();
    std::vector<std::uint8_t> rec(kPageRecordSize);
    img.pages.reserve(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        in.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
        if (!in) throw Error(ErrorCode::StorageFailure, "truncated pages.bin in image " + std::to_string(id));
        PageRecord p;
        p.pid = get_le32(rec.data());
        p.vma_id = get_le32(rec.data() + 4);
        p.slot = get_le32(rec.data() + 8);
        p.content = PageContent::from_bytes(std::span(rec).subspan(12));
        img.pages.push_back(std::move(p));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw Error(ErrorCode::StorageFailure, "trailing bytes in pages.bin");
    }
    return img;
}

// --- CheckpointStore ---------------------------------------------------------

ImageId CheckpointStore::next_id() {
    std::lock_guard lock(mu_);
    return next_++;
}

void CheckpointStore::put(CheckpointImage image) {
    {
        std::lock_guard lock(mu_);
        if (fail_next_) {
            fail_next_ = false;
            throw Error(ErrorCode::StorageFailure, "injected storage failure");
        }
    }
    if (root_) write_image_dir(image, *root_);
    auto ptr = std::make_shared<const CheckpointImage>(std::move(image));
    std::lock_guard lock(mu_);
    images_[ptr->image_id] = std::move(ptr);
}

std::shared_ptr<const CheckpointImage> CheckpointStore::get(ImageId id) const {
    std::lock_guard lock(mu_);
    auto it = images_.find(id);
    if (it == images_.end()) throw Error(ErrorCode::BrokenChain, "missing checkpoint image " + std::to_string(id));
    return it->second;
}

bool CheckpointStore::contains(ImageId id) const {
    std::lock_guard lock(mu_);
    return images_.count(id) != 0;
}

void CheckpointStore::erase(ImageId id) {
    std::lock_guard lock(mu_);
    images_.erase(id);
}

FlatImage CheckpointStore::flatten(ImageId id) const {
    std::vector<std::shared_ptr<const CheckpointImage>> chain;
    std::optional<ImageId> cur = id;
    while (cur) {
        chain.push_back(get(*cur));
        cur = chain.back()->parent;
    }
    // The newest image defines the address-space layout; older records fill gaps.
    std::set<std::pair<LocalPid, VmaId>> live;
    for (const auto& v : chain.front()->vmas) live.insert({v.pid, v.vma_id});
    FlatImage flat;
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
        for (const auto& p : (*it)->pages) {
            if (live.count({p.pid, p.vma_id})) flat[SlotKey{p.pid, p.vma_id, p.slot}] = p.content;
        }
    }
    return flat;
}

std::size_t CheckpointStore::chain_length(ImageId id) const {
    std::size_t n = 0;
    std::optional<ImageId> cur = id;
    while (cur) {
        cur = get(*cur)->parent;
        ++n;
    }
    return n;
}

std::string_view to_string(CheckpointState s) {
    switch (s) {
    case CheckpointState::Pending: return "pending";
    case CheckpointState::Durable: return "durable";
    case CheckpointState::Failed: return "failed";
    }
    return "?";
}

CheckpointState CheckpointHandle::state() const {
    std::lock_guard lock(mu_);
    return state_;
}

CheckpointState CheckpointHandle::wait() const {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return state_ != CheckpointState::Pending; });
    return state_;
}

void CheckpointHandle::complete(CheckpointState s) {
    {
        std::lock_guard lock(mu_);
        if (state_ != CheckpointState::Pending) throw Error(ErrorCode::Internal, "checkpoint completed twice");
        state_ = s;
    }
    cv_.notify_all();
}

// --- dumping -----------------------------------------------------------------

CheckpointImage build_image(const DumpJob& job) {
    CheckpointImage img;
    img.image_id = job.handle->image_id();
    img.parent = job.parent;
    img.tree_image = job.tree_image;
    for (const auto& h : job.holders) {
        img.processes.push_back(h.pid);
        for (const auto& [info, table] : h.vmas) {
            img.vmas.push_back(info);
            const auto slots = table->slots();
            for (std::uint32_t s = 0; s < slots.size(); ++s) {
                if (slots[s].page == kNoPage) continue;
                if (job.parent && !job.dirty.count(SlotKey{h.pid, info.vma_id, s})) continue;
                img.pages.push_back({h.pid, info.vma_id, s, table->store().content(slots[s].page)});
            }
        }
    }
    std::sort(img.processes.begin(), img.processes.end());
    std::sort(img.vmas.begin(), img.vmas.end(), [](const VmaInfo& a, const VmaInfo& b) {
        return std::pair{a.pid, a.vma_id} < std::pair{b.pid, b.vma_id};
    });
    std::sort(img.pages.begin(), img.pages.end(), [](const PageRecord& a, const PageRecord& b) {
        return SlotKey{a.pid, a.vma_id, a.slot} < SlotKey{b.pid, b.vma_id, b.slot};
    });
    return img;
}

DumpDaemon::DumpDaemon(CheckpointStore& store) : store_(store), worker_([this] { run(); }) {}

DumpDaemon::~DumpDaemon() {
    {
        std::lock_guard lock(mu_);
        stop_ = true;
        stalled_ = false;
    }
    cv_.notify_all();
    worker_.join();
}

CheckpointHandlePtr DumpDaemon::dump_async(DumpJob job) {
    auto handle = job.handle;
    {
        std::lock_guard lock(mu_);
        queue_.push_back(std::move(job));
    }
    cv_.notify_all();
    return handle;
}

CheckpointHandlePtr DumpDaemon::dump_sync(DumpJob job) {
    // Earlier asynchronous jobs may be parents of this one.
    drain();
    execute(job);
    return job.handle;
}

void DumpDaemon::execute(DumpJob& job) {
    CheckpointState outcome = CheckpointState::Durable;
    std::size_t pages = 0;
    try {
        auto img = build_image(job);
        pages = img.pages.size();
        store_.put(std::move(img));
    } catch (const Error&) {
        outcome = CheckpointState::Failed;
    }
    for (auto& h : job.holders) {
        h.state = HolderState::Dumped;
        h.reclaim();
    }
    {
        std::lock_guard lock(mu_);
        pages_dumped_ += pages;
    }
    job.handle->complete(outcome);
}

void DumpDaemon::run() {
    for (;;) {
        DumpJob job;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stop_ || (!stalled_ && !queue_.empty()); });
            if (queue_.empty() && stop_) return;
            if (queue_.empty()) continue;
            job = std::move(queue_.front());
            queue_.pop_front();
            busy_ = true;
        }
        execute(job);
        {
            std::lock_guard lock(mu_);
            busy_ = false;
        }
        idle_cv_.notify_all();
    }
}

void DumpDaemon::stall() {
    std::lock_guard lock(mu_);
    stalled_ = true;
}

void DumpDaemon::unstall() {
    {
        std::lock_guard lock(mu_);
        stalled_ = false;
    }
    cv_.notify_all();
}

void DumpDaemon::drain() {
    std::unique_lock lock(mu_);
    if (stalled_ && !queue_.empty()) {
        throw Error(ErrorCode::InvalidState, "cannot drain a stalled dump daemon");
    }
    idle_cv_.wait(lock, [&] { return queue_.empty() && !busy_; });
}

std::size_t DumpDaemon::pages_dumped() const {
    std::lock_guard lock(mu_);
    return pages_dumped_;
}

} // namespace forkspace
