#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "caat/collectives.hpp"
#include "caat/tensor.hpp"

namespace caat {

/// Where the backward gradient reduction of a block sits.
///
/// `h_after_norm` mirrors the forward collective at the block output and
/// backpropagates through the normalization per rank; norm parameter
/// gradients must then be all-reduced before the update. This is exact for
/// any p. `g_before_norm` is the conventional placement: identity at the
/// block output, all-reduce of the input gradient before the norm backward.
/// It is only exact when activations are fully synchronized (p = 1).
enum class BackwardPlacement { g_before_norm, h_after_norm };

const char* to_string(BackwardPlacement placement);
BackwardPlacement parse_placement(const std::string& text);

/// Column-parallel first projection, row-parallel second projection.
///
/// `up[m]` is the column shard A_m of A [h x 4h]. `down[m]` is the row shard
/// of B [4h x h]; its columns [0, shared) produce shared channels and the
/// rest produce rank m's private channels.
struct ShardedMlp {
  std::vector<Tensor> up;
  std::vector<Tensor> down;

  std::size_t ranks() const noexcept { return up.size(); }
  static ShardedMlp shard(const Tensor& full_up, const Tensor& full_down, std::size_t ranks);
  Tensor full_up() const;
  Tensor full_down() const;
  ShardedMlp zeros_like() const;
};

/// Head-sharded attention. Rank m owns heads [m*H/M, (m+1)*H/M): the matching
/// column blocks of W^Q, W^K, W^V and row block of the output projection.
struct ShardedAttention {
  std::size_t heads = 1;
  std::vector<Tensor> wq;
  std::vector<Tensor> wk;
  std::vector<Tensor> wv;
  std::vector<Tensor> out;

  std::size_t ranks() const noexcept { return wq.size(); }
  std::size_t head_dim() const;
  static ShardedAttention shard(std::size_t heads, const Tensor& wq, const Tensor& wk,
                                const Tensor& wv, const Tensor& out, std::size_t ranks);
  ShardedAttention zeros_like() const;
};

/// Pre-norm transformer layer with per-rank residual streams. Norm gammas
/// are replicated parameters (one logical copy).
struct CaatLayer {
  Tensor attn_norm;
  Tensor mlp_norm;
  ShardedAttention attn;
  ShardedMlp mlp;
  PartialReduceSpec spec;

  CaatLayer zeros_like() const;
};

/// Per-call execution settings shared by every collective in a pass.
struct ExecContext {
  /// Null: ranks are logical devices on one physical device; reductions are
  /// local summations and nothing is logged.
  CommLedger* ledger = nullptr;
  /// Accumulation mode of backward gradient reductions.
  PrecisionMode grad_precision = PrecisionMode::full64;
  /// When set, block outputs use the compression baseline: a fully
  /// synchronizing all-reduce whose reduce-scatter half carries masked
  /// partial sums.
  std::optional<MaskSpec> mask;
  std::uint64_t step = 0;
};

/// State saved by a block-output synchronization for its backward.
struct OutputSyncCache {
  std::optional<RankMask> mask;
};

RankSet sync_block_output(const RankSet& partial, const PartialReduceSpec& spec,
                          const ExecContext& ctx, std::uint64_t site, OutputSyncCache& cache);
RankSet sync_block_output_backward(const RankSet& upstream, const PartialReduceSpec& spec,
                                   const ExecContext& ctx, BackwardPlacement placement,
                                   const OutputSyncCache& cache);
/// Reduction of block-input gradients (only active for g_before_norm).
RankSet sync_block_input_backward(const RankSet& dx, const ExecContext& ctx,
                                  BackwardPlacement placement);

// ---------------------------------------------------------------------------

struct MlpCache {
  std::vector<Tensor> input;  // X_m
  std::vector<Tensor> pre;    // X_m A_m
  std::vector<Tensor> act;    // gelu(X_m A_m)
  OutputSyncCache sync;
  std::size_t ranks = 0;
};

struct MlpBackward {
  RankSet dx;
  ShardedMlp grads;
};

std::pair<RankSet, MlpCache> mlp_forward(const RankSet& x, const ShardedMlp& mlp,
                                         const PartialReduceSpec& spec, const ExecContext& ctx,
                                         std::uint64_t site = 0);
MlpBackward mlp_backward(const RankSet& upstream, const ShardedMlp& mlp, const MlpCache& cache,
                         const PartialReduceSpec& spec, BackwardPlacement placement,
                         const ExecContext& ctx);

struct AttentionCache {
  std::vector<Tensor> input;
  std::vector<Tensor> q, k, v;
  std::vector<Tensor> heads_out;           // concatenated head outputs per rank
  std::vector<std::vector<Tensor>> probs;  // [rank][sequence * local_heads + head]
  OutputSyncCache sync;
  std::size_t seq_len = 0;
};

struct AttentionBackward {
  RankSet dx;
  ShardedAttention grads;
};

/// Causal multi-head attention over sequences of `seq_len` consecutive rows.
std::pair<RankSet, AttentionCache> attention_forward(const RankSet& x,
                                                     const ShardedAttention& attn,
                                                     const PartialReduceSpec& spec,
                                                     std::size_t seq_len, const ExecContext& ctx,
                                                     std::uint64_t site = 0);
AttentionBackward attention_backward(const RankSet& upstream, const ShardedAttention& attn,
                                     const AttentionCache& cache, const PartialReduceSpec& spec,
                                     BackwardPlacement placement, const ExecContext& ctx);

// ---------------------------------------------------------------------------

struct LayerCache {
  RankSet input;
  RankSet attn_in;
  AttentionCache attn;
  RankSet mid;
  RankSet mlp_in;
  MlpCache mlp;
};

/// Per-rank norm-gamma gradients. `needs_sync` is set by h_after_norm: the
/// per-rank values are partial and must be all-reduced before the update.
struct NormGradShards {
  std::vector<Tensor> per_rank;
  bool needs_sync = false;
};

struct LayerGrads {
  ShardedAttention attn;
  ShardedMlp mlp;
  NormGradShards attn_norm;
  NormGradShards mlp_norm;
};

struct LayerBackward {
  RankSet dx;
  LayerGrads grads;
};

std::pair<RankSet, LayerCache> layer_forward(const RankSet& x, const CaatLayer& layer,
                                             std::size_t seq_len, const ExecContext& ctx,
                                             std::size_t layer_index = 0);
LayerBackward layer_backward(const RankSet& upstream, const CaatLayer& layer,
                             const LayerCache& cache, BackwardPlacement placement,
                             const ExecContext& ctx);

/// All-reduce of per-rank norm gradients (kind norm_sync, backward pass).
Tensor sync_norm_param_grads(const NormGradShards& grads, CommLedger* ledger);
/// Synchronized gradient when required, otherwise rank 0's copy.
Tensor resolve_norm_grad(const NormGradShards& grads, CommLedger* ledger);

}  // namespace caat
