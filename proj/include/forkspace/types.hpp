#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace forkspace {

/// Engine-wide page size in bytes.
inline constexpr std::size_t kPageSize = 4096;

/// File extents cover this many pages (256 KiB).
inline constexpr std::uint32_t kExtentPages = 64;

using Blob = std::vector<std::uint8_t>;

using PageId = std::uint64_t;
using HostPid = std::uint64_t;
using LocalPid = std::uint32_t;
using VmaId = std::uint32_t;
using BranchId = std::uint64_t;
using VersionId = std::uint64_t;
using ImageId = std::uint64_t;
using NamespaceId = std::uint64_t;
using ExtentId = std::uint64_t;
using LayerId = std::uint64_t;
using ConnectionId = std::uint64_t;
using GuiBufferId = std::uint64_t;

inline constexpr PageId kNoPage = 0;

/// Selects the OpenMP kernel or its serial reference twin.
enum class ExecPolicy { Serial, Parallel };

enum class ErrorCode {
    InvalidArgument,
    NotFound,
    InvalidState,
    OutOfRange,
    Conflict,
    PolicyRejected,
    BrokenChain,
    StorageFailure,
    Internal,
};

std::string_view to_string(ErrorCode code);

/// All engine failures surface as this exception type.
class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

  private:
    ErrorCode code_;
};

/// 64-bit FNV-1a over a byte range; used for digests and config hashes.
std::uint64_t fnv1a(const void* data, std::size_t len,
                    std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept;

std::uint64_t fnv1a(std::string_view text) noexcept;

/// Deterministic 64-bit mixer (splitmix64 finalizer).
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::string to_hex(std::uint64_t value);

} // namespace forkspace
