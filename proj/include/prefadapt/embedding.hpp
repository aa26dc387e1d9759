#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "prefadapt/errors.hpp"

namespace prefadapt {

inline constexpr double kUnitNormTolerance = 1e-6;

namespace detail {

inline std::string where(std::string_view id, std::size_t index) {
  std::string out;
  if (!id.empty()) {
    out += "id '";
    out += id;
    out += "', ";
  }
  out += "index " + std::to_string(index);
  return out;
}

inline void require_finite(std::span<const double> v, std::string_view id) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw DomainError("non-finite component at " + where(id, i));
    }
  }
}

}  // namespace detail

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DomainError("dimension mismatch: " + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
  return sum;
}

inline double l2_norm(std::span<const double> v) {
  double sum = 0.0;
  for (double c : v) sum += c * c;
  return std::sqrt(sum);
}

// A d-dimensional real vector, all components finite. The unit-norm flag is
// only set when the norm has been checked (or produced by normalize()).
class Embedding {
 public:
  explicit Embedding(std::vector<double> values, bool unit_norm = false,
                     std::string_view id = {})
      : values_(std::move(values)), unit_norm_(unit_norm) {
    if (values_.empty()) throw DomainError("embedding must have d >= 1");
    detail::require_finite(values_, id);
    if (unit_norm_ && std::abs(l2_norm(values_) - 1.0) > kUnitNormTolerance) {
      throw DomainError("embedding flagged unit-norm has norm " +
                        std::to_string(l2_norm(values_)));
    }
  }

  std::size_t dim() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  bool is_unit() const noexcept { return unit_norm_; }
  double norm() const { return l2_norm(values_); }

  operator std::span<const double>() const noexcept { return values_; }  // NOLINT

  // Bitwise component equality; the unit flag is bookkeeping only.
  friend bool operator==(const Embedding& a, const Embedding& b) {
    return a.values_ == b.values_;
  }

 private:
  std::vector<double> values_;
  bool unit_norm_ = false;
};

inline Embedding normalize(std::span<const double> v, std::string_view id = {}) {
  if (v.empty()) throw DomainError("cannot normalize an empty vector");
  detail::require_finite(v, id);
  const double n = l2_norm(v);
  if (!(n > 0.0)) {
    throw DomainError(id.empty() ? std::string("zero norm")
                                 : "zero norm for id '" + std::string(id) + "'");
  }
  std::vector<double> out(v.begin(), v.end());
  for (double& c : out) c /= n;
  return Embedding(std::move(out), true, id);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DomainError("cosine of a zero vector");
  return dot(a, b) / (na * nb);
}

}  // namespace prefadapt
