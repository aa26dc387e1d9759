#pragma once

// Synthetic preference data with a known answer. A hidden unit direction u
// gives every item the strength u.y; simulated annotators pick winners with
// BT probability at a configurable sharpness.

#include <cstdint>
#include <cstdio>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "prefadapt/dataio.hpp"
#include "prefadapt/evalharness.hpp"
#include "prefadapt/prefcore.hpp"
#include "prefadapt/rng.hpp"

namespace prefadapt {

inline constexpr double kDefaultGenTemperature = 10.0;

struct GroundTruth {
  Embedding direction;
  double temperature_gen = kDefaultGenTemperature;
  std::uint64_t seed = 0;

  std::size_t dim() const noexcept { return direction.dim(); }
};

inline Embedding random_unit_vector(std::size_t d, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(d);
  for (;;) {
    for (double& c : v) c = gauss(rng);
    if (l2_norm(v) > 0.0) return normalize(v);
  }
}

inline GroundTruth make_ground_truth(std::size_t d, double temperature_gen, std::uint64_t seed) {
  if (d < 2) throw ValidationError("ground truth needs d >= 2");
  if (!(temperature_gen > 0.0)) throw ValidationError("generator temperature must be > 0");
  Rng rng(seed);
  return GroundTruth{random_unit_vector(d, rng), temperature_gen, seed};
}

inline std::string population_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img-%05zu", i);
  return buf;
}

// n isotropic unit vectors. When a ground truth is supplied, each row's
// score is its strength u.y.
inline EmbeddingTable gen_population(std::size_t d, std::size_t n, std::uint64_t seed,
                                     const GroundTruth* truth = nullptr) {
  if (d < 2) throw ValidationError("population needs d >= 2");
  if (n < 1) throw ValidationError("population needs n >= 1");
  if (truth && truth->dim() != d) throw DomainError("ground truth dimension mismatch");
  Rng rng(seed);
  EmbeddingTable table(d);
  for (std::size_t i = 0; i < n; ++i) {
    auto y = random_unit_vector(d, rng);
    RowMeta meta;
    if (truth) meta.score = dot(truth->direction, y);
    table.add(population_id(i), std::move(y), std::move(meta));
  }
  return table;
}

inline PreferenceDataset sample_preferences(const GroundTruth& truth, TablePtr table,
                                            std::size_t n_pairs, std::uint64_t seed) {
  if (table->size() < 2) throw ValidationError("need at least two rows to form pairs");
  if (table->dim() != truth.dim()) throw DomainError("ground truth dimension mismatch");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, table->size() - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  PreferenceDataset out(table);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    const double p = bt_probability(dot(truth.direction, table->row(a)),
                                    dot(truth.direction, table->row(b)), truth.temperature_gen);
    const bool a_wins = coin(rng) < p;
    out.add(PairRecord{a_wins ? a : b, a_wins ? b : a, std::nullopt});
  }
  return out;
}

// Accuracy of the latent direction itself: predicts by the sign of u.(y1 - y2).
inline double oracle_accuracy(const GroundTruth& truth, const PreferenceDataset& eval_set) {
  return pairwise_accuracy(truth.direction.values(), eval_set);
}

}  // namespace prefadapt
