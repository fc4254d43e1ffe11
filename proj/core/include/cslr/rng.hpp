#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cslr {

using Rng = std::mt19937_64;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix(std::uint64_t seed, std::uint64_t v) {
  return splitmix64(seed ^ (v + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2)));
}

}  // namespace detail

// Deterministic seed fan-out: one root seed, stateless per-component streams.
// derive_seed(root, "noise", epoch, i) is stable across runs and platforms,
// which is what makes checkpoint resume bit-exact without persisting RNG state.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
  std::uint64_t h = root;
  for (char c : tag) h = detail::mix(h, static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
  return detail::splitmix64(h);
}

template <typename... Ints>
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, Ints... parts) {
  std::uint64_t h = derive_seed(root, tag);
  ((h = detail::mix(h, static_cast<std::uint64_t>(parts))), ...);
  return detail::splitmix64(h);
}

inline Rng make_rng(std::uint64_t seed) { return Rng{seed}; }

}  // namespace cslr
