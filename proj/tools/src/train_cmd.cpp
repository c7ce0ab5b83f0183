#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "caat/checkpoint.hpp"
#include "caat/train.hpp"
#include "internal.hpp"

namespace caat::cli {

namespace fs = std::filesystem;

namespace {

struct TrainFlags {
  std::string config;
  std::map<std::string, std::string> values;  // config key -> flag text
  bool synthetic = false;
  std::string out;
};

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// FNV-1a over the resolved config text: a short, stable run identifier.
std::string run_id(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 12);
}

TrainConfig resolve(const TrainFlags& flags, CLI::App& app) {
  TrainConfig cfg;
  bool seed_given = false;
  if (!flags.config.empty()) {
    std::ifstream in(flags.config);
    if (!in) throw UsageError("cannot read config file " + flags.config);
    for (const auto& [k, v] : parse_kv_text(in)) {
      cfg.apply_kv(k, v);
      seed_given |= k == "seed";
    }
  }
  if (!seed_given && app.count("--seed") == 0) {
    if (const char* env = std::getenv("CAAT_SEED"); env != nullptr && *env != '\0') {
      cfg.apply_kv("seed", env);
    }
  }
  for (const auto& [key, value] : flags.values) {
    if (!value.empty() || key == "data") cfg.apply_kv(key, value);
  }
  if (flags.synthetic) cfg.data_path.clear();
  if (!flags.out.empty()) cfg.out_dir = flags.out;
  cfg.validate();
  return cfg;
}

void write_manifest(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ofstream os(path, std::ios::trunc);
  write_kv_text(os, kv);
}

int run_train(TrainFlags& flags, CLI::App& app, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = resolve(flags, app);
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);

  std::ostringstream resolved;
  write_kv_text(resolved, cfg.to_kv());
  {
    std::ofstream os(dir / "config.txt", std::ios::trunc);
    os << resolved.str();
  }
  std::vector<std::pair<std::string, std::string>> manifest = {
      {"run_id", run_id(resolved.str())},
      {"out_dir", dir.string()},
      {"config", "config.txt"},
      {"started_utc", utc_now()},
      {"status", "running"},
  };
  write_manifest(dir / "run_manifest.txt", manifest);

  Trainer trainer(cfg, load_data(cfg));
  std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
  write_metrics_header(metrics);
  auto finish = [&](const std::string& status) {
    manifest[4].second = status;
    manifest.emplace_back("finished_utc", utc_now());
    manifest.emplace_back("steps_completed", std::to_string(trainer.current_step()));
    write_manifest(dir / "run_manifest.txt", manifest);
  };
  try {
    trainer.run([&](const MetricsRow& row) {
      write_metrics_row(metrics, row);
      metrics.flush();
      out << "step=" << row.step << " val_loss=" << fmt(row.val_loss);
      if (row.train_loss) out << " train_loss=" << fmt(*row.train_loss);
      out << '\n';
    });
  } catch (const TrainingDiverged&) {
    finish("diverged");
    throw;
  }
  {
    std::ofstream os(dir / "comm_ledger.csv", std::ios::trunc);
    trainer.ledger().write_csv(os);
  }
  trainer.save(dir / "checkpoint");
  finish("ok");
  (void)err;
  out << "wrote " << dir.string() << '\n';
  return kOk;
}

}  // namespace

Command add_train(CLI::App& root) {
  auto* app = root.add_subcommand("train", "Train a model and write metrics, ledger and checkpoints");
  auto flags = std::make_shared<TrainFlags>();
  app->add_option("--config", flags->config, "key=value config file; flags override it");
  // Flags are kept as text and parsed by the config layer so that file and
  // command line share one validation path.
  const std::vector<std::pair<std::string, std::string>> keyed = {
      {"--p", "p"},           {"--tp", "tp"},         {"--layers", "layers"},
      {"--hidden", "hidden"}, {"--heads", "heads"},   {"--seq-len", "seq_len"},
      {"--batch", "batch"},   {"--steps", "steps"},   {"--lr", "lr"},
      {"--seed", "seed"},     {"--eval-every", "eval_every"},
  };
  for (const auto& [flag, key] : keyed) {
    app->add_option(flag, flags->values[key]);
  }
  app->add_option("--placement", flags->values["placement"], "gradient reduce placement")
      ->check(CLI::IsMember({"g", "h"}));
  app->add_option("--scale-private", flags->values["scale_private"])
      ->check(CLI::IsMember({"on", "off"}));
  app->add_option("--accum", flags->values["accum"])->check(CLI::IsMember({"full64", "emulated16"}));
  app->add_option("--mask", flags->values["mask"])->check(CLI::IsMember({"none", "topk", "random"}));
  auto* data = app->add_option("--data", flags->values["data"], "byte-level corpus file");
  auto* synth = app->add_flag("--synthetic", flags->synthetic, "seeded uniform tokens");
  data->excludes(synth);
  app->add_option("--out", flags->out, "output directory");
  return {app, [flags, app](std::ostream& out, std::ostream& err) {
            if (app->count("--data") == 0) flags->values.erase("data");
            return run_train(*flags, *app, out, err);
          }};
}

}  // namespace caat::cli
