#pragma once

#include <cstdint>
#include <string_view>

namespace penet {

/// Seed for the named sub-stream `stream` (e.g. "gen", "train") and an
/// optional index beneath it, derived from one top-level seed. Stable across
/// platforms: FNV-1a over the name, mixed with splitmix64.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : stream) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ h) ^ index);
}

} // namespace penet
