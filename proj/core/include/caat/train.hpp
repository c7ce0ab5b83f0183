#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "caat/collectives.hpp"
#include "caat/data.hpp"
#include "caat/model.hpp"
#include "caat/optimizer.hpp"
#include "caat/transformer.hpp"

namespace caat {

/// Raised when the training loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MaskMode { none, topk, random };
const char* to_string(MaskMode mode);
MaskMode parse_mask_mode(const std::string& text);

struct TrainConfig {
  ModelConfig model;
  std::size_t batch = 8;
  std::uint64_t steps = 100;
  AdamWConfig optim;
  BackwardPlacement placement = BackwardPlacement::h_after_norm;
  PrecisionMode accum = PrecisionMode::full64;
  MaskMode mask = MaskMode::none;
  std::string data_path;  // empty: synthetic
  std::size_t synthetic_length = 1 << 16;
  std::uint64_t eval_every = 100;
  std::size_t eval_windows = 16;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::string out_dir = "run";

  void validate() const;
  /// Ordered key=value view; the inverse of apply_kv.
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  /// Sets one key. Throws std::invalid_argument for unknown keys or values.
  void apply_kv(const std::string& key, const std::string& value);
  std::optional<MaskSpec> mask_spec() const;
};

/// Flat UTF-8 key=value text; '#' starts a comment line.
std::map<std::string, std::string> parse_kv_text(std::istream& in);
void write_kv_text(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& kv);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Forward, loss, backward with the configured placement, norm-gradient
/// synchronization and an AdamW update. Returns the pre-update loss.
double train_step(CaatModel& model, AdamW& optimizer, const Batch& batch,
                  const TrainConfig& config, CommLedger& ledger, std::uint64_t step);

/// Mean loss over the batches; no parameter mutation and no logged traffic.
double evaluate(const CaatModel& model, std::span<const Batch> batches, const TrainConfig& config);

/// Loss and exact gradients for one batch (no update).
struct LossGrad {
  double loss = 0.0;
  CaatModel grads;
};
LossGrad loss_and_grad(const CaatModel& model, const Batch& batch, BackwardPlacement placement,
                       const ExecContext& ctx);
double batch_loss(const CaatModel& model, const Batch& batch, const ExecContext& ctx);

struct MetricsRow {
  std::uint64_t step = 0;
  std::optional<double> train_loss;
  double val_loss = 0.0;
  std::uint64_t comm_fwd_elems = 0;
  std::uint64_t comm_bwd_elems = 0;
  std::uint64_t norm_sync_elems = 0;
};

/// CSV: step,train_loss,val_loss,comm_fwd_elems,comm_bwd_elems,norm_sync_elems
void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const MetricsRow& row);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);

/// Owns model, optimizer, data and ledger for one run.
class Trainer {
 public:
  Trainer(TrainConfig config, DataSplit data);
  /// Resumes from a checkpoint directory.
  static Trainer resume(const std::filesystem::path& checkpoint_dir, DataSplit data);

  /// One optimizer step; returns its training loss.
  double step();
  double evaluate() const;
  /// Runs until config().steps, evaluating every eval_every steps and at the
  /// end; step 0 is always evaluated. `on_row` sees every metrics row.
  std::vector<MetricsRow> run(const std::function<void(const MetricsRow&)>& on_row = {});

  MetricsRow snapshot(std::optional<double> train_loss) const;

  const TrainConfig& config() const noexcept { return config_; }
  const CaatModel& model() const noexcept { return model_; }
  const AdamW& optimizer() const noexcept { return optimizer_; }
  const CommLedger& ledger() const noexcept { return ledger_; }
  std::uint64_t current_step() const noexcept { return step_; }

  void save(const std::filesystem::path& dir) const;

 private:
  Trainer(TrainConfig config, DataSplit data, CaatModel model, AdamW optimizer,
          std::uint64_t step, CommLedger ledger);

  TrainConfig config_;
  DataSplit data_;
  std::vector<Batch> eval_set_;
  CaatModel model_;
  AdamW optimizer_;
  std::uint64_t step_ = 0;
  CommLedger ledger_;
};

/// Loads the corpus named by the config, or synthesizes one.
DataSplit load_data(const TrainConfig& config);

}  // namespace caat
