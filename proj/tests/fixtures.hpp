#pragma once

#include "forkspace/workspace.hpp"

#include <array>

namespace forkspace::testing {

inline WorkspaceSpec small_spec(std::uint64_t seed = 3) {
    WorkspaceSpec s;
    s.processes = 6;
    s.tree_seed = seed;
    s.anon_bytes = 96 * kPageSize;
    s.file_backed_bytes = 12 * kPageSize;
    s.shared_bytes = 4 * kPageSize;
    s.vmas_per_process = 2;
    s.file_manifest = {{"/usr/lib/libx.so", 8 * kPageSize},
                       {"/home/user/notes.txt", 3 * kPageSize},
                       {"/home/user/.ssh/id_ed25519", kPageSize}};
    s.internal_connections = 2;
    s.external_connections = 2;
    s.gui_buffers = 1;
    s.gui_buffer_bytes = 2 * kPageSize;
    return s;
}

inline std::array<std::uint8_t, 8> marker(std::uint8_t v) { return {v, v, v, v, v, v, v, v}; }

} // namespace forkspace::testing
