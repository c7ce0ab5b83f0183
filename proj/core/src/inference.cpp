#include "caat/inference.hpp"

#include <algorithm>

namespace caat {

namespace {

Tensor forward_logits(const CaatModel& model, std::span<const int> prompt, CommLedger* ledger,
                      const std::optional<MaskSpec>& mask) {
  if (prompt.empty()) throw std::invalid_argument("prompt must contain at least one token");
  const std::size_t window = std::min(prompt.size(), model.config.seq_len);
  const auto context = prompt.subspan(prompt.size() - window);
  ExecContext ctx;
  ctx.ledger = ledger;
  ctx.mask = mask;
  ctx.step = UINT64_MAX;
  return model_forward(model, context, window, ctx).logits;
}

}  // namespace

Tensor logical_device_inference(const CaatModel& model, std::span<const int> prompt,
                                const std::optional<MaskSpec>& mask) {
  return forward_logits(model, prompt, nullptr, mask);
}

Tensor ranked_inference(const CaatModel& model, std::span<const int> prompt, CommLedger& ledger,
                        const std::optional<MaskSpec>& mask) {
  return forward_logits(model, prompt, &ledger, mask);
}

std::vector<int> greedy_continue(const CaatModel& model, std::span<const int> prompt,
                                 std::size_t new_tokens, bool logical,
                                 const std::optional<MaskSpec>& mask) {
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  CommLedger scratch;
  for (std::size_t i = 0; i < new_tokens; ++i) {
    const Tensor logits = logical ? logical_device_inference(model, seq, mask)
                                  : ranked_inference(model, seq, scratch, mask);
    const auto last = logits.row(logits.rows() - 1);
    const auto best = std::max_element(last.begin(), last.end()) - last.begin();
    out.push_back(static_cast<int>(best));
    seq.push_back(static_cast<int>(best));
  }
  return out;
}

}  // namespace caat
