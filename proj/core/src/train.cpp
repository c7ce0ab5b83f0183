#include "caat/train.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "caat/checkpoint.hpp"

namespace caat {

const char* to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::none: return "none";
    case MaskMode::topk: return "topk";
    case MaskMode::random: return "random";
  }
  return "none";
}

MaskMode parse_mask_mode(const std::string& text) {
  if (text == "none") return MaskMode::none;
  if (text == "topk") return MaskMode::topk;
  if (text == "random") return MaskMode::random;
  throw std::invalid_argument("unknown mask mode: " + text);
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf, end);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw std::invalid_argument("invalid number for " + key + ": '" + text + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw std::invalid_argument("invalid non-negative integer for " + key + ": '" + text + "'");
  }
  return v;
}

bool parse_switch(const std::string& key, const std::string& text) {
  if (text == "on" || text == "true" || text == "1") return true;
  if (text == "off" || text == "false" || text == "0") return false;
  throw std::invalid_argument("invalid switch for " + key + ": '" + text + "' (use on/off)");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (batch == 0) throw std::invalid_argument("batch must be at least 1");
  if (!(optim.lr >= 0.0)) throw std::invalid_argument("lr must be non-negative");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw std::invalid_argument("betas must lie in [0, 1)");
  }
  if (eval_windows == 0) throw std::invalid_argument("eval_windows must be at least 1");
  if (mask != MaskMode::none && model.ranks > 1 &&
      (batch * model.seq_len) % model.ranks != 0) {
    throw std::invalid_argument("masked reduce-scatter needs ranks to divide batch*seq_len");
  }
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_kv() const {
  return {
      {"layers", std::to_string(model.layers)},
      {"hidden", std::to_string(model.hidden)},
      {"heads", std::to_string(model.heads)},
      {"vocab", std::to_string(model.vocab)},
      {"seq_len", std::to_string(model.seq_len)},
      {"tp", std::to_string(model.ranks)},
      {"p", fmt_double(model.p)},
      {"scale_private", model.scale_private ? "on" : "off"},
      {"seed", std::to_string(model.seed)},
      {"batch", std::to_string(batch)},
      {"steps", std::to_string(steps)},
      {"lr", fmt_double(optim.lr)},
      {"beta1", fmt_double(optim.beta1)},
      {"beta2", fmt_double(optim.beta2)},
      {"eps", fmt_double(optim.eps)},
      {"weight_decay", fmt_double(optim.weight_decay)},
      {"placement", placement == BackwardPlacement::g_before_norm ? "g" : "h"},
      {"accum", to_string(accum)},
      {"mask", to_string(mask)},
      {"data", data_path},
      {"synthetic_length", std::to_string(synthetic_length)},
      {"eval_every", std::to_string(eval_every)},
      {"eval_windows", std::to_string(eval_windows)},
      {"checkpoint_every", std::to_string(checkpoint_every)},
      {"out", out_dir},
  };
}

void TrainConfig::apply_kv(const std::string& key, const std::string& value) {
  if (key == "layers") model.layers = parse_uint(key, value);
  else if (key == "hidden") model.hidden = parse_uint(key, value);
  else if (key == "heads") model.heads = parse_uint(key, value);
  else if (key == "vocab") model.vocab = parse_uint(key, value);
  else if (key == "seq_len") model.seq_len = parse_uint(key, value);
  else if (key == "tp") model.ranks = parse_uint(key, value);
  else if (key == "p") model.p = parse_double(key, value);
  else if (key == "scale_private") model.scale_private = parse_switch(key, value);
  else if (key == "seed") model.seed = parse_uint(key, value);
  else if (key == "batch") batch = parse_uint(key, value);
  else if (key == "steps") steps = parse_uint(key, value);
  else if (key == "lr") optim.lr = parse_double(key, value);
  else if (key == "beta1") optim.beta1 = parse_double(key, value);
  else if (key == "beta2") optim.beta2 = parse_double(key, value);
  else if (key == "eps") optim.eps = parse_double(key, value);
  else if (key == "weight_decay") optim.weight_decay = parse_double(key, value);
  else if (key == "placement") placement = parse_placement(value);
  else if (key == "accum") accum = parse_precision(value);
  else if (key == "mask") mask = parse_mask_mode(value);
  else if (key == "data") data_path = value;
  else if (key == "synthetic") {
    if (parse_switch(key, value)) data_path.clear();
  } else if (key == "synthetic_length") synthetic_length = parse_uint(key, value);
  else if (key == "eval_every") eval_every = parse_uint(key, value);
  else if (key == "eval_windows") eval_windows = parse_uint(key, value);
  else if (key == "checkpoint_every") checkpoint_every = parse_uint(key, value);
  else if (key == "out") out_dir = value;
  else throw std::invalid_argument("unknown config key: " + key);
}

std::optional<MaskSpec> TrainConfig::mask_spec() const {
  if (mask == MaskMode::none) return std::nullopt;
  return MaskSpec{mask == MaskMode::topk ? MaskKind::topk : MaskKind::random, model.p,
                  model.seed};
}

std::map<std::string, std::string> parse_kv_text(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": expected key=value");
    }
    kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return kv;
}

void write_kv_text(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& kv) {
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path.string());
  TrainConfig cfg;
  for (const auto& [k, v] : parse_kv_text(in)) cfg.apply_kv(k, v);
  return cfg;
}

// ---------------------------------------------------------------------------

LossGrad loss_and_grad(const CaatModel& model, const Batch& batch, BackwardPlacement placement,
                       const ExecContext& ctx) {
  ModelForward fwd = model_forward(model, batch.inputs, batch.seq_len, ctx);
  LossAndGrad lg = softmax_ce_loss(fwd.logits, batch.targets);
  if (!std::isfinite(lg.loss)) {
    throw TrainingDiverged("non-finite loss at step " + std::to_string(ctx.step));
  }
  return {lg.loss, model_backward(model, fwd.cache, lg.dlogits, placement, ctx)};
}

double batch_loss(const CaatModel& model, const Batch& batch, const ExecContext& ctx) {
  ModelForward fwd = model_forward(model, batch.inputs, batch.seq_len, ctx);
  return softmax_ce_loss(fwd.logits, batch.targets).loss;
}

double train_step(CaatModel& model, AdamW& optimizer, const Batch& batch,
                  const TrainConfig& config, CommLedger& ledger, std::uint64_t step) {
  ExecContext ctx;
  ctx.ledger = &ledger;
  ctx.grad_precision = config.accum;
  ctx.mask = config.mask_spec();
  ctx.step = step;
  LossGrad lg = loss_and_grad(model, batch, config.placement, ctx);
  optimizer.step(model, lg.grads);
  return lg.loss;
}

double evaluate(const CaatModel& model, std::span<const Batch> batches,
                const TrainConfig& config) {
  if (batches.empty()) throw DataError("evaluation set is empty");
  ExecContext ctx;
  ctx.mask = config.mask_spec();
  ctx.step = UINT64_MAX;
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : batches) {
    weighted += batch_loss(model, b, ctx) * static_cast<double>(b.targets.size());
    tokens += b.targets.size();
  }
  return weighted / static_cast<double>(tokens);
}

// ---------------------------------------------------------------------------

void write_metrics_header(std::ostream& os) {
  os << "step,train_loss,val_loss,comm_fwd_elems,comm_bwd_elems,norm_sync_elems\n";
}

void write_metrics_row(std::ostream& os, const MetricsRow& row) {
  os << row.step << ',' << (row.train_loss ? fmt_double(*row.train_loss) : std::string()) << ','
     << fmt_double(row.val_loss) << ',' << row.comm_fwd_elems << ',' << row.comm_bwd_elems << ','
     << row.norm_sync_elems << '\n';
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) ||
      trim(line) != "step,train_loss,val_loss,comm_fwd_elems,comm_bwd_elems,norm_sync_elems") {
    throw std::invalid_argument("not a metrics CSV (unexpected header)");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 6) throw std::invalid_argument("metrics row with wrong column count");
    MetricsRow r;
    r.step = parse_uint("step", cells[0]);
    if (!cells[1].empty()) r.train_loss = parse_double("train_loss", cells[1]);
    r.val_loss = parse_double("val_loss", cells[2]);
    r.comm_fwd_elems = parse_uint("comm_fwd_elems", cells[3]);
    r.comm_bwd_elems = parse_uint("comm_bwd_elems", cells[4]);
    r.norm_sync_elems = parse_uint("norm_sync_elems", cells[5]);
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------

DataSplit load_data(const TrainConfig& config) {
  const std::size_t t = config.model.seq_len;
  TokenStream tokens = config.data_path.empty()
                           ? synth_data(config.model.seed, config.model.vocab,
                                        config.synthetic_length)
                           : ingest_corpus(config.data_path, t);
  if (tokens.size() < t + 1) {
    throw DataError("token stream of " + std::to_string(tokens.size()) +
                    " tokens is shorter than seq_len + 1");
  }
  for (int tok : tokens) {
    if (static_cast<std::size_t>(tok) >= config.model.vocab) {
      throw DataError("token " + std::to_string(tok) + " does not fit vocabulary " +
                      std::to_string(config.model.vocab));
    }
  }
  return split_train_val(tokens);
}

Trainer::Trainer(TrainConfig config, DataSplit data)
    : Trainer(config, std::move(data), CaatModel::init(config.model), AdamW(config.optim), 0,
              CommLedger{}) {}

Trainer::Trainer(TrainConfig config, DataSplit data, CaatModel model, AdamW optimizer,
                 std::uint64_t step, CommLedger ledger)
    : config_(std::move(config)),
      data_(std::move(data)),
      model_(std::move(model)),
      optimizer_(std::move(optimizer)),
      step_(step),
      ledger_(std::move(ledger)) {
  config_.validate();
  eval_set_ = eval_batches(data_.val, config_.batch, config_.model.seq_len, config_.eval_windows);
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint_dir, DataSplit data) {
  Checkpoint ck = load_checkpoint(checkpoint_dir);
  return Trainer(std::move(ck.config), std::move(data), std::move(ck.model),
                 std::move(ck.optimizer), ck.step, std::move(ck.ledger));
}

double Trainer::step() {
  const Batch batch = sample_batch(data_.train, config_.batch, config_.model.seq_len,
                                   config_.model.seed, step_);
  const double loss = train_step(model_, optimizer_, batch, config_, ledger_, step_);
  ++step_;
  return loss;
}

double Trainer::evaluate() const { return caat::evaluate(model_, eval_set_, config_); }

MetricsRow Trainer::snapshot(std::optional<double> train_loss) const {
  MetricsRow row;
  row.step = step_;
  row.train_loss = train_loss;
  row.val_loss = evaluate();
  row.comm_fwd_elems = ledger_.tensor_parallel(Pass::forward);
  row.comm_bwd_elems = ledger_.tensor_parallel(Pass::backward);
  row.norm_sync_elems = ledger_.total(CommKind::norm_sync);
  return row;
}

std::vector<MetricsRow> Trainer::run(const std::function<void(const MetricsRow&)>& on_row) {
  std::vector<MetricsRow> rows;
  auto emit = [&](std::optional<double> train_loss) {
    rows.push_back(snapshot(train_loss));
    if (on_row) on_row(rows.back());
  };
  if (step_ == 0) emit(std::nullopt);
  double loss_sum = 0.0;
  std::uint64_t loss_count = 0;
  while (step_ < config_.steps) {
    loss_sum += step();
    ++loss_count;
    const bool at_eval = config_.eval_every != 0 && step_ % config_.eval_every == 0;
    if (at_eval || step_ == config_.steps) {
      emit(loss_sum / static_cast<double>(loss_count));
      loss_sum = 0.0;
      loss_count = 0;
    }
    if (config_.checkpoint_every != 0 && step_ % config_.checkpoint_every == 0 &&
        step_ != config_.steps) {
      save(std::filesystem::path(config_.out_dir) / ("checkpoint_step" + std::to_string(step_)));
    }
  }
  return rows;
}

void Trainer::save(const std::filesystem::path& dir) const {
  save_checkpoint(dir, config_, model_, optimizer_, step_, ledger_);
}

}  // namespace caat
