#pragma once

// Bradley-Terry preference adaptation of a query embedding.
//
// Items are scored by s(x, y) = x.y. For a pair y1 > y2 the BT probability of
// the observed order is p1 = sigmoid(tau * (s(x,y1) - s(x,y2))), the loss is
// -log p1, and because s is linear in x the gradient is available in closed
// form: grad_x = (p1 - 1) * tau * (y1 - y2). Adaptation is plain gradient
// descent on x with the encoders untouched.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prefadapt/embedding.hpp"
#include "prefadapt/errors.hpp"

namespace prefadapt {

struct AdaptConfig {
  double epsilon = 0.1;     // learning rate; 0 is accepted as the identity step
  int steps = 1;            // gradient steps per adapt() call
  double temperature = 1.0; // multiplier on similarities before the logistic
  bool renormalize = true;  // project x back to unit norm after every step

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
      throw DomainError("epsilon must be finite and >= 0, got " + std::to_string(epsilon));
    }
    if (steps < 1) throw DomainError("steps must be >= 1, got " + std::to_string(steps));
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw DomainError("temperature must be finite and > 0, got " +
                        std::to_string(temperature));
    }
  }
};

// Non-owning view of an ordered observation winner > loser.
struct PreferencePair {
  std::span<const double> winner;
  std::span<const double> loser;
};

struct BTOutcome {
  double p1 = 0.5;
  double loss = 0.0;
  std::vector<double> gradient;
};

struct AdaptStepRecord {
  double loss_before = 0.0;
  double gradient_norm = 0.0;
  double post_norm = 0.0;
};

struct AdaptTrace {
  std::vector<AdaptStepRecord> steps;
};

struct AdaptResult {
  Embedding embedding;
  AdaptTrace trace;
};

enum class Choice { first, second };

struct Candidate {
  std::string id;
  std::span<const double> values;
};

struct ScoredId {
  std::string id;
  double score = 0.0;

  friend bool operator==(const ScoredId&, const ScoredId&) = default;
};

namespace detail {

inline void require_same_dim(std::size_t a, std::size_t b) {
  if (a != b) {
    throw DomainError("dimension mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

// sigmoid(z) kept strictly inside (0, 1) so that log() of it never hits 0.
inline double clamped_sigmoid(double z) {
  constexpr double kLo = std::numeric_limits<double>::min();
  constexpr double kHi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  double p;
  if (z >= 0.0) {
    p = 1.0 / (1.0 + std::exp(-z));
  } else {
    const double e = std::exp(z);
    p = e / (1.0 + e);
  }
  return std::clamp(p, kLo, kHi);
}

// log(1 + exp(t)) without overflow.
inline double softplus(double t) {
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

inline double pair_logit(std::span<const double> x, const PreferencePair& pair,
                         double temperature) {
  require_same_dim(x.size(), pair.winner.size());
  require_same_dim(x.size(), pair.loser.size());
  double s1 = 0.0;
  double s2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s1 += x[i] * pair.winner[i];
    s2 += x[i] * pair.loser[i];
  }
  return temperature * (s1 - s2);
}

inline double pair_loss(std::span<const double> x, const PreferencePair& pair,
                        double temperature) {
  return softplus(-pair_logit(x, pair, temperature));
}

struct BatchEval {
  double loss = 0.0;
  std::vector<double> gradient;
};

inline BatchEval evaluate_batch(std::span<const double> x, std::span<const PreferencePair> pairs,
                                double temperature) {
  if (pairs.empty()) throw DomainError("empty preference pair list");
  BatchEval out;
  out.gradient.assign(x.size(), 0.0);
  for (const auto& pair : pairs) {
    const double z = pair_logit(x, pair, temperature);
    out.loss += softplus(-z);
    // p1 - 1 == -sigmoid(-z)
    const double coeff = (clamped_sigmoid(z) - 1.0) * temperature;
    for (std::size_t i = 0; i < x.size(); ++i) {
      out.gradient[i] += coeff * (pair.winner[i] - pair.loser[i]);
    }
  }
  const auto n = static_cast<double>(pairs.size());
  out.loss /= n;
  for (double& g : out.gradient) g /= n;
  return out;
}

inline bool all_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double c) { return c == 0.0; });
}

// x - epsilon * direction, optionally re-projected. A zero update leaves x
// untouched bit for bit.
inline Embedding apply_update(const Embedding& x, std::span<const double> direction,
                              double scale, bool renormalize) {
  if (scale == 0.0 || all_zero(direction)) return x;
  std::vector<double> next(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < next.size(); ++i) next[i] += scale * direction[i];
  if (!renormalize) return Embedding(std::move(next));
  if (!(l2_norm(next) > 0.0)) throw DomainError("degenerate step: updated embedding has zero norm");
  return normalize(next);
}

}  // namespace detail

inline double similarity(std::span<const double> x, std::span<const double> y) {
  detail::require_same_dim(x.size(), y.size());
  return dot(x, y);
}

inline double bt_probability(double s1, double s2, double temperature = 1.0) {
  if (!std::isfinite(s1) || !std::isfinite(s2)) throw DomainError("non-finite strength");
  if (!(temperature > 0.0)) throw DomainError("temperature must be > 0");
  return detail::clamped_sigmoid(temperature * (s1 - s2));
}

inline BTOutcome pair_outcome(std::span<const double> x, const PreferencePair& pair,
                              const AdaptConfig& cfg) {
  const double z = detail::pair_logit(x, pair, cfg.temperature);
  BTOutcome out;
  out.p1 = detail::clamped_sigmoid(z);
  out.loss = detail::softplus(-z);
  const double coeff = (out.p1 - 1.0) * cfg.temperature;
  out.gradient.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.gradient[i] = coeff * (pair.winner[i] - pair.loser[i]);
  }
  return out;
}

inline double batch_loss(std::span<const double> x, std::span<const PreferencePair> pairs,
                         const AdaptConfig& cfg) {
  return detail::evaluate_batch(x, pairs, cfg.temperature).loss;
}

inline std::vector<double> batch_gradient(std::span<const double> x,
                                          std::span<const PreferencePair> pairs,
                                          const AdaptConfig& cfg) {
  return detail::evaluate_batch(x, pairs, cfg.temperature).gradient;
}

inline Embedding adapt_step(const Embedding& x, std::span<const PreferencePair> pairs,
                            const AdaptConfig& cfg) {
  cfg.validate();
  const auto eval = detail::evaluate_batch(x.values(), pairs, cfg.temperature);
  return detail::apply_update(x, eval.gradient, -cfg.epsilon, cfg.renormalize);
}

// cfg.steps full-batch descent steps. Deterministic: adapt(T=a+b) equals
// adapt(T=b) started from the result of adapt(T=a).
inline AdaptResult adapt(const Embedding& x, std::span<const PreferencePair> pairs,
                         const AdaptConfig& cfg) {
  cfg.validate();
  AdaptResult result{x, {}};
  result.trace.steps.reserve(static_cast<std::size_t>(cfg.steps));
  for (int t = 0; t < cfg.steps; ++t) {
    const auto eval = detail::evaluate_batch(result.embedding.values(), pairs, cfg.temperature);
    result.embedding =
        detail::apply_update(result.embedding, eval.gradient, -cfg.epsilon, cfg.renormalize);
    result.trace.steps.push_back({eval.loss, l2_norm(eval.gradient), result.embedding.norm()});
  }
  return result;
}

// Baseline for winner-only data: x += epsilon * mean(positives), cfg.steps times.
inline Embedding positive_adapt(const Embedding& x,
                                std::span<const std::span<const double>> positives,
                                const AdaptConfig& cfg) {
  cfg.validate();
  if (positives.empty()) throw DomainError("empty positive set");
  std::vector<double> mean(x.dim(), 0.0);
  for (const auto& y : positives) {
    detail::require_same_dim(x.dim(), y.size());
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += y[i];
  }
  for (double& m : mean) m /= static_cast<double>(positives.size());
  Embedding current = x;
  for (int t = 0; t < cfg.steps; ++t) {
    current = detail::apply_update(current, mean, cfg.epsilon, cfg.renormalize);
  }
  return current;
}

// Exact ties go to the first item. The temperature cannot change the choice;
// it is validated and otherwise unused.
inline Choice predict_preferred(std::span<const double> x, std::span<const double> y1,
                                std::span<const double> y2, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be > 0");
  return similarity(x, y1) >= similarity(x, y2) ? Choice::first : Choice::second;
}

inline std::vector<ScoredId> rank_candidates(std::span<const double> x,
                                             std::span<const Candidate> candidates) {
  std::vector<ScoredId> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back({c.id, similarity(x, c.values)});
  std::sort(out.begin(), out.end(), [](const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return out;
}

// Central differences of the unconstrained single-pair loss.
inline std::vector<double> finite_diff_grad(std::span<const double> x, const PreferencePair& pair,
                                            const AdaptConfig& cfg, double h = 1e-5) {
  if (!(h > 0.0)) throw DomainError("finite-difference step must be > 0");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = detail::pair_loss(probe, pair, cfg.temperature);
    probe[i] = saved - h;
    const double down = detail::pair_loss(probe, pair, cfg.temperature);
    probe[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// ||a - b|| / max(||a||, ||b||); 0 when both vectors are zero.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  detail::require_same_dim(a.size(), b.size());
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(l2_norm(a), l2_norm(b));
  if (scale == 0.0) return 0.0;
  return std::sqrt(diff) / scale;
}

}  // namespace prefadapt
