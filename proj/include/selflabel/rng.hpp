#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace selflabel {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent seed streams.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a over the bytes of `text`.
constexpr std::uint64_t hash_text(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base) noexcept { return mix64(base); }

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, Rest... rest) noexcept;
template <class... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t part, Rest... rest) noexcept;

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, Rest... rest) noexcept {
  return derive_seed(mix64(base ^ hash_text(tag)), rest...);
}

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t part, Rest... rest) noexcept {
  return derive_seed(mix64(base ^ mix64(part)), rest...);
}

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& state);

}  // namespace selflabel
