#pragma once

#include <optional>
#include <span>
#include <vector>

#include "caat/collectives.hpp"
#include "caat/model.hpp"

namespace caat {

/// Runs all of the model's tensor-parallel ranks as logical devices on one
/// physical device: each logical rank's shards are evaluated in turn and the
/// partial channel-reduce becomes a local summation in the same order as the
/// simulated collective. Nothing is communicated.
Tensor logical_device_inference(const CaatModel& model, std::span<const int> prompt,
                                const std::optional<MaskSpec>& mask = std::nullopt);

/// Same forward executed as `model.config.ranks` communicating ranks; the
/// collective traffic is logged.
Tensor ranked_inference(const CaatModel& model, std::span<const int> prompt, CommLedger& ledger,
                        const std::optional<MaskSpec>& mask = std::nullopt);

/// Greedy continuation (ties go to the lower token id). The context is
/// truncated to the model's last seq_len tokens.
std::vector<int> greedy_continue(const CaatModel& model, std::span<const int> prompt,
                                 std::size_t new_tokens, bool logical,
                                 const std::optional<MaskSpec>& mask = std::nullopt);

}  // namespace caat
