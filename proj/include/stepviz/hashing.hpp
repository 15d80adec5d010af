#pragma once

#include <cstdint>
#include <string>

namespace stepviz {

// FNV-1a 64-bit. Used for feature hashing and config fingerprints; kept
// explicit (not std::hash) so results are stable across platforms and runs.
inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace stepviz
