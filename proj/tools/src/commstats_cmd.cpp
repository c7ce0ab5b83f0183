#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include "caat/data.hpp"
#include "caat/perf_model.hpp"
#include "caat/rng.hpp"
#include "caat/train.hpp"
#include "internal.hpp"

namespace caat::cli {

namespace fs = std::filesystem;

namespace {

struct CommFlags {
  std::string config;
  std::string metrics;
  std::string baseline;
};

struct Traffic {
  std::uint64_t tp = 0;
  std::uint64_t norm_sync = 0;
};

// Ledger of one training step; traffic does not depend on token values.
Traffic measure_step(const TrainConfig& cfg) {
  Batch batch;
  batch.seq_len = cfg.model.seq_len;
  batch.sequences = cfg.batch;
  const TokenStream tokens = synth_data(cfg.model.seed, cfg.model.vocab, batch.seq_len * cfg.batch + 1);
  batch.inputs.assign(tokens.begin(), tokens.end() - 1);
  batch.targets.assign(tokens.begin() + 1, tokens.end());
  CommLedger ledger;
  ExecContext ctx;
  ctx.ledger = &ledger;
  ctx.grad_precision = cfg.accum;
  ctx.mask = cfg.mask_spec();
  loss_and_grad(CaatModel::init(cfg.model), batch, cfg.placement, ctx);
  return {ledger.tensor_parallel(), ledger.total(CommKind::norm_sync)};
}

Traffic from_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read metrics file " + path);
  const auto rows = read_metrics_csv(in);
  if (rows.empty()) throw UsageError("metrics file " + path + " has no rows");
  return {rows.back().comm_fwd_elems + rows.back().comm_bwd_elems, rows.back().norm_sync_elems};
}

std::string pct(double fraction) { return fmt(100.0 * fraction); }

void report(std::ostream& out, const Traffic& run, const std::optional<Traffic>& base,
            const std::optional<TrainConfig>& cfg) {
  out << "tp_elems=" << run.tp << '\n' << "norm_sync_elems=" << run.norm_sync << '\n';
  if (base) {
    out << "baseline_tp_elems=" << base->tp << '\n';
    const double reduction =
        base->tp == 0 ? 0.0 : 1.0 - static_cast<double>(run.tp) / static_cast<double>(base->tp);
    out << "reduction_pct=" << pct(reduction) << '\n';
  }
  if (!cfg) return;
  const double p = cfg->model.p;
  const auto analytic = perf::mask_comm_reduction(p);
  out << "p=" << fmt(p) << " mask=" << to_string(cfg->mask) << '\n';
  out << "analytic_caat_reduction_pct=" << pct(analytic.caat) << '\n';
  out << "analytic_mask_reduction_pct=" << pct(analytic.mask) << '\n';
  if (base) {
    // Integer cross-check: saved / baseline == (h - shared) / h, times 1/4
    // for the masked baseline.
    const std::uint64_t h = cfg->model.hidden;
    const std::uint64_t shared = shared_channel_count(cfg->model.hidden, p);
    const std::uint64_t saved = base->tp - run.tp;
    const std::uint64_t factor = cfg->mask == MaskMode::none ? 1 : 4;
    const bool exact = factor * saved * h == base->tp * (h - shared) &&
                       static_cast<double>(shared) == static_cast<double>(h) * p;
    out << "measured_equals_analytic=" << (exact ? "yes" : "no") << '\n';
  }
}

std::optional<TrainConfig> sibling_config(const std::string& metrics_path) {
  const fs::path cfg_path = fs::path(metrics_path).parent_path() / "config.txt";
  if (!fs::exists(cfg_path)) return std::nullopt;
  return load_train_config(cfg_path);
}

int run_commstats(const CommFlags& flags, std::ostream& out) {
  if (flags.config.empty() == flags.metrics.empty()) {
    throw UsageError("give exactly one of --config or --metrics");
  }
  if (!flags.config.empty()) {
    if (!fs::exists(flags.config)) throw UsageError("cannot read config file " + flags.config);
    TrainConfig cfg = load_train_config(flags.config);
    cfg.validate();
    TrainConfig baseline = cfg;
    baseline.model.p = 1.0;
    baseline.mask = MaskMode::none;
    out << "source=config per_step=1\n";
    report(out, measure_step(cfg), measure_step(baseline), cfg);
    return kOk;
  }
  std::optional<Traffic> base;
  if (!flags.baseline.empty()) base = from_metrics(flags.baseline);
  out << "source=metrics\n";
  report(out, from_metrics(flags.metrics), base, sibling_config(flags.metrics));
  return kOk;
}

}  // namespace

Command add_commstats(CLI::App& root) {
  auto* app = root.add_subcommand("commstats", "Communication totals and reductions vs p=1");
  auto flags = std::make_shared<CommFlags>();
  auto* config = app->add_option("--config", flags->config, "measure one step of this config");
  auto* metrics = app->add_option("--metrics", flags->metrics, "metrics.csv of a finished run");
  app->add_option("--baseline", flags->baseline, "metrics.csv of the p=1 run")->needs(metrics);
  config->excludes(metrics);
  return {app, [flags](std::ostream& out, std::ostream&) { return run_commstats(*flags, out); }};
}

}  // namespace caat::cli
