#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace prefadapt {

// Every error carries a stable machine-readable code; the HTTP layer and the
// CLI map these onto status codes and exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// Mathematical precondition violated (dimension mismatch, zero norm, ...).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& message) : Error("domain_error", message) {}
};

// Bad magic, unsupported version, unparsable record.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format_error", message) {}
};

// Header and payload disagree.
class CorruptionError : public Error {
 public:
  explicit CorruptionError(const std::string& message) : Error("corruption_error", message) {}
};

// Well-formed input that breaks a data invariant.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& message) : Error("validation_error", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io_error", message) {}
};

// Persisted state does not replay to what was stored.
class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& message) : Error("integrity_error", message) {}
};

class NotFoundError : public Error {
 public:
  NotFoundError(const std::string& message, std::vector<std::string> missing = {})
      : Error("not_found", message), missing_(std::move(missing)) {}

  const std::vector<std::string>& missing() const noexcept { return missing_; }

 private:
  std::vector<std::string> missing_;
};

class ConflictError : public Error {
 public:
  explicit ConflictError(const std::string& message) : Error("conflict", message) {}
};

}  // namespace prefadapt
