#include "qgnet/error.hpp"

#include <sstream>

namespace qgnet {

namespace {
std::string cfl_message(double courant, double limit, long step) {
  std::ostringstream os;
  os.precision(6);
  os << "CFL violation: Courant number " << courant << " exceeds limit " << limit;
  if (step >= 0) os << " at step " << step;
  return os.str();
}
}  // namespace

CflError::CflError(double c, double l, long s)
    : NumericError(cfl_message(c, l, s)), courant(c), limit(l), step(s) {}

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Usage:
    case ErrorKind::Dimension:
      return 2;
    case ErrorKind::Numeric:
    case ErrorKind::Data:
      return 3;
    case ErrorKind::Io:
      return 4;
  }
  return 1;
}

}  // namespace qgnet
