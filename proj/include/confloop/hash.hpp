#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace confloop {

// 64-bit FNV-1a. Used for prompt hashes, token bucketing and run ids; must be
// stable across platforms, which std::hash is not.
constexpr std::uint64_t fnv1a64(std::string_view text,
                                std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept {
    std::uint64_t h = basis;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string to_hex(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return std::string(buf, 16);
}

inline std::string hash_hex(std::string_view text) { return to_hex(fnv1a64(text)); }

}  // namespace confloop
