#pragma once

#include <iosfwd>
#include <string>

#include "caat/cli.hpp"
#include "CLI11.hpp"

namespace caat::cli {

// Each command registers its subcommand and returns the callback state the
// dispatcher invokes after a successful parse.
struct Command {
  CLI::App* app = nullptr;
  std::function<int(std::ostream& out, std::ostream& err)> run;
};

Command add_train(CLI::App& root);
Command add_infer(CLI::App& root);
Command add_perfmodel(CLI::App& root);
Command add_commstats(CLI::App& root);

/// Shortest round-trip decimal text.
std::string fmt(double v);

}  // namespace caat::cli
