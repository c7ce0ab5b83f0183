#include "caat/cli.hpp"

#include <charconv>
#include <ostream>

#include "caat/checkpoint.hpp"
#include "caat/data.hpp"
#include "caat/train.hpp"
#include "internal.hpp"

namespace caat::cli {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tensor-parallel transformer simulator with partial channel reduction", "caat"};
  app.require_subcommand(1);
  std::vector<Command> commands{add_train(app), add_infer(app), add_perfmodel(app),
                                add_commstats(app)};

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  for (const auto& cmd : commands) {
    if (!cmd.app->parsed()) continue;
    try {
      return cmd.run(out, err);
    } catch (const UsageError& e) {
      err << "error: " << e.what() << '\n';
      return kUsageError;
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << '\n';
      return kUsageError;
    } catch (const DataError& e) {
      err << "error: " << e.what() << '\n';
      return kUsageError;
    } catch (const CheckpointError& e) {
      err << "error: " << e.what() << '\n';
      return kUsageError;
    } catch (const TrainingDiverged& e) {
      err << "error: training diverged: " << e.what() << '\n';
      return kRuntimeError;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kRuntimeError;
    }
  }
  return kUsageError;
}

}  // namespace caat::cli
