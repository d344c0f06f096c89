#include "forkspace/types.hpp"

#include <cstdio>

namespace forkspace {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::NotFound: return "not-found";
    case ErrorCode::InvalidState: return "invalid-state";
    case ErrorCode::OutOfRange: return "out-of-range";
    case ErrorCode::Conflict: return "conflict";
    case ErrorCode::PolicyRejected: return "policy-rejected";
    case ErrorCode::BrokenChain: return "broken-chain";
    case ErrorCode::StorageFailure: return "storage-failure";
    case ErrorCode::Internal: return "internal";
    }
    return "unknown";
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed) noexcept {
    auto* p = static_cast<const std::uint8_t*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a(std::string_view text) noexcept {
    return fnv1a(text.data(), text.size());
}

std::string to_hex(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

} // namespace forkspace
