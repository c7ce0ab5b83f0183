#include <ostream>

#include "caat/checkpoint.hpp"
#include "caat/inference.hpp"
#include "internal.hpp"

namespace caat::cli {

namespace {

struct InferFlags {
  std::string ckpt;
  std::string prompt = "\n";
  std::size_t tokens = 16;
  std::string mode = "logical";
  bool check_logical = false;
};

std::string join(const std::vector<int>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(ids[i]);
  }
  return s;
}

int run_infer(const InferFlags& flags, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(flags.ckpt);
  const CaatModel& model = ck.model;
  std::vector<int> prompt;
  for (unsigned char c : flags.prompt) {
    if (c >= model.config.vocab) {
      throw UsageError("prompt byte " + std::to_string(c) + " exceeds vocabulary " +
                       std::to_string(model.config.vocab));
    }
    prompt.push_back(c);
  }
  if (prompt.empty()) throw UsageError("--prompt-bytes must not be empty");
  const auto mask = ck.config.mask_spec();

  if (flags.check_logical) {
    CommLedger ledger;
    const Tensor ranked = ranked_inference(model, prompt, ledger, mask);
    const Tensor logical = logical_device_inference(model, prompt, mask);
    out << "max_diff=" << fmt(max_abs_diff(ranked, logical)) << '\n';
    out << "ranked_comm_elems=" << ledger.total() << '\n';
    out << "logical_comm_elems=0\n";
  }
  const bool logical = flags.mode == "logical";
  out << "ranks=" << model.config.ranks << " mode=" << flags.mode << '\n';
  out << "tokens=" << join(greedy_continue(model, prompt, flags.tokens, logical, mask)) << '\n';
  return kOk;
}

}  // namespace

Command add_infer(CLI::App& root) {
  auto* app = root.add_subcommand("infer", "Greedy continuation from a checkpoint");
  auto flags = std::make_shared<InferFlags>();
  app->add_option("--ckpt", flags->ckpt, "checkpoint directory")->required();
  app->add_option("--prompt-bytes", flags->prompt, "prompt text, one token per byte");
  app->add_option("--tokens", flags->tokens, "tokens to generate");
  app->add_option("--mode", flags->mode)->check(CLI::IsMember({"logical", "ranked"}));
  app->add_flag("--check-logical", flags->check_logical,
                "compare logical-device and ranked execution");
  return {app, [flags](std::ostream& out, std::ostream&) { return run_infer(*flags, out); }};
}

}  // namespace caat::cli
