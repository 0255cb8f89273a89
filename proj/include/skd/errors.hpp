#pragma once

#include <stdexcept>
#include <string>

namespace skd {

// Precondition broken by the caller (bad shapes, negative factors, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf showed up where only finite numbers are allowed.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, int column)
      : std::runtime_error(what), column_(column) {}
  // 1-based field index that failed, 0 if not tied to a field.
  int column() const { return column_; }

 private:
  int column_;
};

// Missing files, checksum mismatches, unreadable binaries.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SKD_REQUIRE(cond, msg)                         \
  do {                                                 \
    if (!(cond)) throw ::skd::ContractViolation(msg);  \
  } while (0)

}  // namespace skd
