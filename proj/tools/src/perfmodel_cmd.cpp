#include <ostream>

#include "caat/perf_model.hpp"
#include "internal.hpp"

namespace caat::cli {

namespace {

struct PerfFlags {
  perf::PerfInput in;
  std::size_t sweep = 0;
  std::string csv;
};

int run_perfmodel(PerfFlags& flags, CLI::App& app, std::ostream& out) {
  const bool sweeping = flags.sweep > 0 || !flags.csv.empty();
  if (!sweeping && app.count("--p") == 0) throw UsageError("--p is required unless sweeping");
  if (!sweeping) {
    flags.in.validate();
    const auto& in = flags.in;
    const double G = perf::gemm_ops(in.h, in.s, in.r);
    const double P = perf::payload(in.h, in.s, in.p);
    out << "G=" << fmt(G) << '\n'
        << "P=" << fmt(P) << '\n'
        << "P_bytes16=" << fmt(2 * P) << '\n'
        << "T=" << fmt(perf::total_time(in)) << '\n'
        << "speedup=" << fmt(perf::speedup(in)) << '\n'
        << "p_star=" << fmt(perf::optimal_p(in.h, in.s, in.r, in.C)) << '\n';
    return kOk;
  }
  if (app.count("--p") == 0) flags.in.p = 1.0;
  flags.in.validate();
  const std::size_t points = flags.sweep > 0 ? flags.sweep : 11;
  if (!flags.csv.empty()) {
    perf::write_sweep_files(flags.csv, flags.in, points);
    out << "wrote " << flags.csv << '\n';
  } else {
    perf::write_sweep_csv(out, perf::sweep(flags.in, points));
  }
  out << "p_star=" << fmt(perf::optimal_p(flags.in.h, flags.in.s, flags.in.r, flags.in.C)) << '\n';
  return kOk;
}

}  // namespace

Command add_perfmodel(CLI::App& root) {
  auto* app = root.add_subcommand("perfmodel", "Analytic compute/communication cost model");
  auto flags = std::make_shared<PerfFlags>();
  app->set_help_flag("--help", "Print this help message and exit");  // frees -h for --h
  app->add_option("--h", flags->in.h, "hidden size")->required();
  app->add_option("--s", flags->in.s, "sequence length")->required();
  app->add_option("--r", flags->in.r, "tensor-parallel dimension")->required();
  app->add_option("--C", flags->in.C, "FLOP per communicated element")->required();
  app->add_option("--p", flags->in.p, "synchronization factor");
  app->add_option("--sweep", flags->sweep, "number of evenly spaced p values")
      ->check(CLI::Range(std::size_t{2}, std::size_t{100000}));
  app->add_option("--csv", flags->csv, "write the sweep and a p* summary next to it");
  return {app, [flags, app](std::ostream& out, std::ostream&) {
            return run_perfmodel(*flags, *app, out);
          }};
}

}  // namespace caat::cli
