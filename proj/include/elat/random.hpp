#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace elat {

using Rng = std::mt19937_64;

/// Seed for a named sub-stream of `root`, optionally indexed (epoch, batch,
/// sample). Paired runs that share a root seed draw identical noise from
/// identically named streams.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t a = 0,
                          std::uint64_t b = 0);

inline Rng make_rng(std::uint64_t root, std::string_view stream, std::uint64_t a = 0,
                    std::uint64_t b = 0) {
    return Rng(derive_seed(root, stream, a, b));
}

}  // namespace elat
