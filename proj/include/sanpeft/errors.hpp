// Copyright 2026 The sanpeft Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SANPEFT_ERRORS_HPP
#define SANPEFT_ERRORS_HPP

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sanpeft {

// Every error the library raises derives from Error. The category decides the
// CLI exit code: configuration-type failures exit 1, numeric/verification 2.
class Error : public std::runtime_error {
 public:
  enum class Category { config, numeric };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  [[nodiscard]] Category category() const noexcept { return category_; }

 private:
  Category category_;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what)
      : Error(Category::config, "dimension error: " + what) {}
};

/// Invalid model, method, or run configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(Category::config, "config error: " + what) {}
};

/// Violated API precondition (non-scalar loss, detached tensor, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what)
      : Error(Category::config, "contract error: " + what) {}
};

/// Malformed input file.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what)
      : Error(Category::config, "format error: " + what) {}
};

/// Well-formed input whose content is invalid (label out of range, ...).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what)
      : Error(Category::config, "data error: " + what) {}
};

/// Input outside a function's mathematical domain (log of a non-positive value).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what)
      : Error(Category::numeric, "domain error: " + what) {}
};

/// NaN/Inf produced or encountered.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(Category::numeric, "numeric error: " + what) {}
};

/// A numerical equivalence check failed.
class VerificationError : public Error {
 public:
  explicit VerificationError(const std::string& what)
      : Error(Category::numeric, "verification failed: " + what) {}
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace sanpeft

#endif  // SANPEFT_ERRORS_HPP
