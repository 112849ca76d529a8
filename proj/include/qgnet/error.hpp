#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qgnet {

/// Broad failure class; the CLI maps each one to an exit code.
enum class ErrorKind {
  Config,     // invalid configuration or argument (exit 2)
  Usage,      // API misuse (exit 2)
  Dimension,  // shape mismatch (exit 2)
  Numeric,    // non-finite values, CFL violation, solver breakdown (exit 3)
  Data,       // invalid dataset content (exit 3)
  Io          // file system or format failure (exit 4)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(ErrorKind::Usage, w) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorKind::Dimension, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::Numeric, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::Data, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::Io, w) {}
};

/// A time step rejected because the Courant number exceeded the limit.
struct CflError : NumericError {
  CflError(double courant, double limit, long step = -1);
  double courant;
  double limit;
  long step;
};

/// Conjugate-gradient breakdown (non-positive curvature along a search direction).
struct SolverError : NumericError {
  explicit SolverError(const std::string& w) : NumericError(w) {}
};

int exit_code(ErrorKind kind) noexcept;

}  // namespace qgnet
