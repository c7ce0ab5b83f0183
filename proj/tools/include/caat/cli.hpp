#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace caat::cli {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kUsageError = 2 };

/// Thrown for invalid flag combinations or config values; maps to exit 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Entry point shared by the `caat` executable and the tests. `args[0]` is
/// the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace caat::cli
