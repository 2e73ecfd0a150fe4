#pragma once

#include <cstdint>
#include <initializer_list>

namespace gcnn {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent, reproducible sub-seed for (base, salts...).
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salts) {
  std::uint64_t s = mix64(base);
  for (std::uint64_t v : salts) s = mix64(s ^ mix64(v + 0x632be59bd9b4e019ULL));
  return s;
}

}  // namespace gcnn
