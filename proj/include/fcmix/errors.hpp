#ifndef FCMIX_ERRORS_HPP
#define FCMIX_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fcmix {

// Invalid arguments, malformed configuration or inconsistent parameters.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or out-of-domain input data.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Factorization failures, non-convergence, NaNs.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fcmix

#endif  // FCMIX_ERRORS_HPP
