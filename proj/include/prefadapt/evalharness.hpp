#pragma once

// Pairwise-accuracy evaluation of adapted query embeddings: fixed evaluation
// split, independent random training sets per (size, repeat) cell, and the
// three variants original / positive / bt.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prefadapt/dataio.hpp"
#include "prefadapt/prefcore.hpp"
#include "prefadapt/rng.hpp"

namespace prefadapt {

enum class Variant { original, positive, bt };

inline constexpr std::array<Variant, 3> kAllVariants = {Variant::original, Variant::positive,
                                                        Variant::bt};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::original: return "original";
    case Variant::positive: return "positive";
    case Variant::bt: return "bt";
  }
  return "unknown";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw ValidationError("unknown variant '" + std::string(name) + "'");
}

struct EvalRow {
  Variant variant = Variant::original;
  std::size_t n_train = 0;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> accuracies;  // one per repeat
  std::vector<std::uint64_t> seeds;
};

struct EvalReport {
  std::uint64_t seed = 0;
  std::size_t n_repeats = 0;
  std::size_t eval_size = 0;
  AdaptConfig config;
  std::vector<EvalRow> rows;  // ordered by size, then variant
};

inline double pairwise_accuracy(std::span<const double> x, const PreferenceDataset& eval_set,
                                double temperature = 1.0) {
  if (eval_set.empty()) throw ValidationError("empty evaluation set");
  const auto& table = eval_set.table();
  std::size_t hits = 0;
  for (const auto& r : eval_set.records()) {
    if (predict_preferred(x, table.row(r.winner), table.row(r.loser), temperature) == Choice::first) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(eval_set.size());
}

namespace detail {

// Population mean and std; identical samples give exactly (v, 0).
inline std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  if (std::all_of(xs.begin(), xs.end(), [&](double v) { return v == xs.front(); })) {
    return {xs.front(), 0.0};
  }
  double sum = 0.0;
  for (double v : xs) sum += v;
  const double mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double v : xs) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

inline constexpr std::uint64_t kEvalSplitSalt = 0x6576616c2d73706cULL;

}  // namespace detail

inline constexpr std::size_t kDefaultEvalReserve = 2000;

// 2000 pairs when the pool can also supply the largest training set,
// otherwise a fifth of the pool.
inline std::size_t default_eval_reserve(std::size_t pool_size, std::size_t max_train) {
  if (pool_size >= kDefaultEvalReserve + max_train) return kDefaultEvalReserve;
  return pool_size / 5;
}

struct ProtocolOptions {
  std::vector<std::size_t> sizes = {0, 1, 5, 10, 25, 50};
  std::size_t n_repeats = 10;
  std::uint64_t seed = 0;
  std::optional<std::size_t> eval_reserve;
};

inline EvalReport run_protocol(const Embedding& base_x, const PreferenceDataset& pool,
                               const ProtocolOptions& opts, const AdaptConfig& cfg) {
  cfg.validate();
  if (opts.n_repeats < 1) throw ValidationError("n_repeats must be >= 1");
  if (opts.sizes.empty()) throw ValidationError("sizes must not be empty");
  if (base_x.dim() != pool.table().dim()) {
    throw DomainError("query dimension " + std::to_string(base_x.dim()) + " vs table dimension " +
                      std::to_string(pool.table().dim()));
  }
  const std::size_t max_train = *std::max_element(opts.sizes.begin(), opts.sizes.end());
  const std::size_t reserve = opts.eval_reserve.value_or(default_eval_reserve(pool.size(), max_train));
  if (reserve == 0 || reserve > pool.size()) {
    throw ValidationError("evaluation reserve " + std::to_string(reserve) +
                          " does not fit a pool of " + std::to_string(pool.size()));
  }
  if (max_train > pool.size() - reserve) {
    throw ValidationError("training size " + std::to_string(max_train) + " exceeds the " +
                          std::to_string(pool.size() - reserve) +
                          " pairs left after the evaluation reserve");
  }

  // split() hands back the sampled part first: here that is the eval reserve.
  auto parts = split(pool, reserve, derived_seed(opts.seed, detail::kEvalSplitSalt));
  const PreferenceDataset& eval_set = parts.train;
  const PreferenceDataset& remainder = parts.eval;
  const double tau = cfg.temperature;
  const double original = pairwise_accuracy(base_x.values(), eval_set, tau);

  EvalReport report;
  report.seed = opts.seed;
  report.n_repeats = opts.n_repeats;
  report.eval_size = eval_set.size();
  report.config = cfg;

  for (std::size_t size : opts.sizes) {
    std::map<Variant, EvalRow> rows;
    for (Variant v : kAllVariants) rows[v] = EvalRow{v, size, 0.0, 0.0, {}, {}};
    for (std::size_t rep = 0; rep < opts.n_repeats; ++rep) {
      const std::uint64_t s = cell_seed(opts.seed, size, rep);
      double positive = original;
      double bt = original;
      if (size > 0) {
        Rng rng(s);
        const auto idx = sample_without_replacement(remainder.size(), size, rng);
        const auto train = remainder.subset(idx);
        const auto winners = train.winners();
        const auto pairs = train.pairs();
        positive = pairwise_accuracy(positive_adapt(base_x, winners, cfg).values(), eval_set, tau);
        bt = pairwise_accuracy(adapt(base_x, pairs, cfg).embedding.values(), eval_set, tau);
      }
      for (auto& [variant, row] : rows) {
        row.seeds.push_back(s);
        row.accuracies.push_back(variant == Variant::original ? original
                                 : variant == Variant::positive ? positive
                                                                : bt);
      }
    }
    for (Variant v : kAllVariants) {
      auto& row = rows[v];
      std::tie(row.mean, row.std) = detail::mean_std(row.accuracies);
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

// Vote share per declared variant, in declaration order.
inline std::vector<std::pair<std::string, double>> win_rate(
    std::span<const std::pair<std::string, std::string>> votes,
    std::span<const std::string> variants) {
  if (votes.empty()) throw ValidationError("no votes");
  std::vector<std::size_t> counts(variants.size(), 0);
  for (const auto& [voter, choice] : votes) {
    auto it = std::find(variants.begin(), variants.end(), choice);
    if (it == variants.end()) {
      throw ValidationError("vote by '" + voter + "' for unknown variant '" + choice + "'");
    }
    ++counts[static_cast<std::size_t>(it - variants.begin())];
  }
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    out.emplace_back(variants[i], static_cast<double>(counts[i]) / static_cast<double>(votes.size()));
  }
  return out;
}

inline std::vector<std::pair<std::string, double>> win_rate(
    std::span<const std::pair<std::string, std::string>> votes) {
  std::vector<std::string> names;
  for (Variant v : kAllVariants) names.emplace_back(variant_name(v));
  return win_rate(votes, names);
}

inline nlohmann::ordered_json report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["seed"] = report.seed;
  j["n_repeats"] = report.n_repeats;
  j["eval_size"] = report.eval_size;
  j["config"] = {{"epsilon", report.config.epsilon},
                 {"steps", report.config.steps},
                 {"temperature", report.config.temperature},
                 {"renormalize", report.config.renormalize}};
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) {
    nlohmann::ordered_json r;
    r["variant"] = variant_name(row.variant);
    r["n_train"] = row.n_train;
    r["mean"] = row.mean;
    r["std"] = row.std;
    r["accuracies"] = row.accuracies;
    r["seeds"] = row.seeds;
    j["rows"].push_back(std::move(r));
  }
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport report;
  try {
    report.seed = j.at("seed").get<std::uint64_t>();
    report.n_repeats = j.at("n_repeats").get<std::size_t>();
    report.eval_size = j.at("eval_size").get<std::size_t>();
    const auto& c = j.at("config");
    report.config = {c.at("epsilon").get<double>(), c.at("steps").get<int>(),
                     c.at("temperature").get<double>(), c.at("renormalize").get<bool>()};
    for (const auto& r : j.at("rows")) {
      EvalRow row;
      row.variant = parse_variant(r.at("variant").get<std::string>());
      row.n_train = r.at("n_train").get<std::size_t>();
      row.mean = r.at("mean").get<double>();
      row.std = r.at("std").get<double>();
      row.accuracies = r.at("accuracies").get<std::vector<double>>();
      row.seeds = r.at("seeds").get<std::vector<std::uint64_t>>();
      report.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
  return report;
}

inline std::string report_to_csv(const EvalReport& report) {
  std::string out = "variant,n_train,mean,std,n_repeats\n";
  char buf[160];
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%.17g,%.17g,%zu\n",
                  std::string(variant_name(row.variant)).c_str(), row.n_train, row.mean, row.std,
                  row.accuracies.size());
    out += buf;
  }
  return out;
}

enum class ReportFormat { json, csv };

inline void emit_report(const EvalReport& report, const std::string& path, ReportFormat format) {
  detail::write_file(path, format == ReportFormat::json ? report_to_json(report).dump(2) + "\n"
                                                        : report_to_csv(report));
}

}  // namespace prefadapt
