// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace pmt {

// Broad failure classes. The C API and the CLI map these onto status and
// exit codes, so new kinds need a mapping in pmtmae_capi.cpp.
enum class ErrorKind {
  Contract,    // precondition violated by the caller
  Dimension,   // tensor shapes disagree
  Degenerate,  // input is valid but has no meaningful answer (zero scale, empty mask)
  Config,      // bad configuration value
  Parse,       // malformed text input
  Format,      // bad magic/version/truncation in a binary file
  Io,          // file could not be opened or written
  Alignment,   // student/teacher token sets do not line up
  MissingTeacher,
  Numeric,     // non-finite values appeared
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace pmt
