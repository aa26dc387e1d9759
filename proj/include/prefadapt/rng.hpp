#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace prefadapt {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stable seed for one (size, repeat) cell of an evaluation grid. Chained so
// that (size, repeat) and (repeat, size) land on different seeds.
constexpr std::uint64_t cell_seed(std::uint64_t master, std::uint64_t size,
                                  std::uint64_t repeat) noexcept {
  return mix64(mix64(mix64(master) ^ (size * 0xd6e8feb86659fd93ULL)) ^
               (repeat * 0xa0761d6478bd642fULL));
}

constexpr std::uint64_t derived_seed(std::uint64_t master, std::uint64_t salt) noexcept {
  return mix64(master ^ mix64(salt));
}

// k distinct indices from [0, n), uniformly, via a partial Fisher-Yates
// shuffle. Returned in draw order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace prefadapt
