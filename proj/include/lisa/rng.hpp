#pragma once

#include <cstdint>
#include <string_view>

namespace lisa {

// All project randomness flows from one root seed split into named streams
// (data, init, dropout, eval, ...) so components can be reseeded
// independently and runs stay reproducible.
inline uint64_t seed_stream(uint64_t root, std::string_view name) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    auto mix_byte = [&h](unsigned char b) {
        h ^= b;
        h *= 1099511628211ull;
    };
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>(root >> (8 * i)));
    for (char c : name) mix_byte(static_cast<unsigned char>(c));
    return h;
}

inline uint64_t seed_stream(uint64_t root, std::string_view name, uint64_t index) {
    uint64_t z = seed_stream(root, name) + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace lisa
