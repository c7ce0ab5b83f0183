#include "caat/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace caat {

const char* to_string(BackwardPlacement placement) {
  return placement == BackwardPlacement::g_before_norm ? "g_before_norm" : "h_after_norm";
}

BackwardPlacement parse_placement(const std::string& text) {
  if (text == "g" || text == "g_before_norm") return BackwardPlacement::g_before_norm;
  if (text == "h" || text == "h_after_norm") return BackwardPlacement::h_after_norm;
  throw std::invalid_argument("unknown backward placement: " + text);
}

namespace {

std::vector<Tensor> split_cols(const Tensor& full, std::size_t parts) {
  if (full.cols() % parts != 0) {
    throw ShapeError("cannot split " + std::to_string(full.cols()) + " columns over " +
                     std::to_string(parts) + " ranks");
  }
  const std::size_t w = full.cols() / parts;
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < parts; ++m) out.push_back(slice_cols(full, m * w, (m + 1) * w));
  return out;
}

std::vector<Tensor> split_rows(const Tensor& full, std::size_t parts) {
  if (full.extent(0) % parts != 0) {
    throw ShapeError("cannot split " + std::to_string(full.extent(0)) + " rows over " +
                     std::to_string(parts) + " ranks");
  }
  const std::size_t hgt = full.extent(0) / parts;
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < parts; ++m) out.push_back(slice_rows(full, m * hgt, (m + 1) * hgt));
  return out;
}

std::vector<Tensor> zeros_like(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(Tensor::zeros_like(t));
  return out;
}

Tensor block(const Tensor& src, std::size_t r0, std::size_t rows, std::size_t c0,
             std::size_t cols) {
  Tensor out({rows, cols});
  const std::size_t ld = src.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(src.raw() + (r0 + r) * ld + c0, cols, out.raw() + r * cols);
  }
  return out;
}

void put_block(Tensor& dst, const Tensor& blk, std::size_t r0, std::size_t c0) {
  const std::size_t ld = dst.cols();
  const std::size_t cols = blk.cols();
  for (std::size_t r = 0; r < blk.extent(0); ++r) {
    std::copy_n(blk.raw() + r * cols, cols, dst.raw() + (r0 + r) * ld + c0);
  }
}

void check_ranks(const RankSet& x, std::size_t expected, const char* what) {
  if (x.ranks() != expected) {
    throw ShapeError(std::string(what) + ": " + std::to_string(x.ranks()) +
                     " input ranks for a " + std::to_string(expected) + "-rank shard set");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

ShardedMlp ShardedMlp::shard(const Tensor& full_up, const Tensor& full_down, std::size_t ranks) {
  if (full_up.extent(1) != full_down.extent(0) || full_up.extent(0) != full_down.extent(1)) {
    throw ShapeError("ShardedMlp: " + to_string(full_up.shape()) + " and " +
                     to_string(full_down.shape()) + " do not form an MLP");
  }
  return ShardedMlp{split_cols(full_up, ranks), split_rows(full_down, ranks)};
}

Tensor ShardedMlp::full_up() const { return concat_cols(up); }
Tensor ShardedMlp::full_down() const { return concat_rows(down); }

ShardedMlp ShardedMlp::zeros_like() const { return {caat::zeros_like(up), caat::zeros_like(down)}; }

std::size_t ShardedAttention::head_dim() const {
  const std::size_t h = wq.at(0).extent(0);
  return h / heads;
}

ShardedAttention ShardedAttention::shard(std::size_t heads, const Tensor& wq, const Tensor& wk,
                                         const Tensor& wv, const Tensor& out, std::size_t ranks) {
  const std::size_t h = wq.extent(0);
  if (heads == 0 || h % heads != 0) {
    throw ShapeError("hidden size " + std::to_string(h) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (heads % ranks != 0) {
    throw ShapeError(std::to_string(heads) + " heads cannot be sharded over " +
                     std::to_string(ranks) + " ranks");
  }
  return ShardedAttention{heads, split_cols(wq, ranks), split_cols(wk, ranks),
                          split_cols(wv, ranks), split_rows(out, ranks)};
}

ShardedAttention ShardedAttention::zeros_like() const {
  return {heads, caat::zeros_like(wq), caat::zeros_like(wk), caat::zeros_like(wv),
          caat::zeros_like(out)};
}

CaatLayer CaatLayer::zeros_like() const {
  return {Tensor::zeros_like(attn_norm), Tensor::zeros_like(mlp_norm), attn.zeros_like(),
          mlp.zeros_like(), spec};
}

// ---------------------------------------------------------------------------

RankSet sync_block_output(const RankSet& partial, const PartialReduceSpec& spec,
                          const ExecContext& ctx, std::uint64_t site, OutputSyncCache& cache) {
  if (ctx.mask) {
    MaskedRankSet masked = apply_mask(partial, *ctx.mask, ctx.step, site);
    RankSet scattered = reduce_scatter(masked.values, PrecisionMode::full64, ctx.ledger,
                                       Pass::forward, masked.mask.kept_per_rank);
    cache.mask = std::move(masked.mask);
    return all_gather(scattered, ctx.ledger, Pass::forward);
  }
  cache.mask.reset();
  return partial_channel_reduce(partial, spec, PrecisionMode::full64, ctx.ledger);
}

RankSet sync_block_output_backward(const RankSet& upstream, const PartialReduceSpec& spec,
                                   const ExecContext& ctx, BackwardPlacement placement,
                                   const OutputSyncCache& cache) {
  if (cache.mask) {
    if (placement == BackwardPlacement::h_after_norm) {
      return apply_saved_mask(
          all_reduce(upstream, ctx.grad_precision, ctx.ledger, Pass::backward), *cache.mask);
    }
    return apply_saved_mask(upstream, *cache.mask);
  }
  if (placement == BackwardPlacement::h_after_norm) {
    return partial_channel_reduce_vjp(upstream, spec, ctx.grad_precision, ctx.ledger);
  }
  // Conventional placement: identity on the reduced channels, local scaling
  // on private ones.
  const double scale = spec.private_scale();
  if (scale == 1.0) return upstream;
  RankSet out = upstream;
  const std::size_t shared = spec.shared_count();
  const std::size_t h = spec.h;
  for (auto& t : out) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double* row = t.raw() + r * h;
      for (std::size_t c = shared; c < h; ++c) row[c] *= scale;
    }
  }
  return out;
}

RankSet sync_block_input_backward(const RankSet& dx, const ExecContext& ctx,
                                  BackwardPlacement placement) {
  if (placement == BackwardPlacement::g_before_norm) {
    return all_reduce(dx, ctx.grad_precision, ctx.ledger, Pass::backward);
  }
  return dx;
}

// ---------------------------------------------------------------------------

std::pair<RankSet, MlpCache> mlp_forward(const RankSet& x, const ShardedMlp& mlp,
                                         const PartialReduceSpec& spec, const ExecContext& ctx,
                                         std::uint64_t site) {
  check_ranks(x, mlp.ranks(), "mlp_forward");
  if (x.channels() != spec.h || mlp.up[0].extent(0) != spec.h) {
    throw ShapeError("mlp_forward: input width " + std::to_string(x.channels()) +
                     " does not match hidden size " + std::to_string(spec.h));
  }
  MlpCache cache;
  cache.ranks = x.ranks();
  std::vector<Tensor> partial;
  for (std::size_t m = 0; m < x.ranks(); ++m) {
    Tensor pre = matmul(x[m], mlp.up[m]);
    Tensor act = gelu(pre);
    partial.push_back(matmul(act, mlp.down[m]));
    cache.input.push_back(x[m]);
    cache.pre.push_back(std::move(pre));
    cache.act.push_back(std::move(act));
  }
  RankSet z = sync_block_output(RankSet(std::move(partial)), spec, ctx, site, cache.sync);
  return {std::move(z), std::move(cache)};
}

MlpBackward mlp_backward(const RankSet& upstream, const ShardedMlp& mlp, const MlpCache& cache,
                         const PartialReduceSpec& spec, BackwardPlacement placement,
                         const ExecContext& ctx) {
  check_ranks(upstream, mlp.ranks(), "mlp_backward");
  if (cache.ranks != upstream.ranks() || cache.input.empty() ||
      cache.input[0].rows() != upstream.tokens()) {
    throw ShapeError("mlp_backward: cache does not match upstream gradient");
  }
  const RankSet dpartial = sync_block_output_backward(upstream, spec, ctx, placement, cache.sync);
  MlpBackward out{RankSet{}, mlp.zeros_like()};
  std::vector<Tensor> dx;
  for (std::size_t m = 0; m < upstream.ranks(); ++m) {
    out.grads.down[m] = matmul_tn(cache.act[m], dpartial[m]);
    const Tensor dact = matmul_nt(dpartial[m], mlp.down[m]);
    const Tensor dpre = gelu_backward(cache.pre[m], dact);
    out.grads.up[m] = matmul_tn(cache.input[m], dpre);
    dx.push_back(matmul_nt(dpre, mlp.up[m]));
  }
  out.dx = sync_block_input_backward(RankSet(std::move(dx)), ctx, placement);
  return out;
}

// ---------------------------------------------------------------------------

std::pair<RankSet, AttentionCache> attention_forward(const RankSet& x,
                                                     const ShardedAttention& attn,
                                                     const PartialReduceSpec& spec,
                                                     std::size_t seq_len, const ExecContext& ctx,
                                                     std::uint64_t site) {
  check_ranks(x, attn.ranks(), "attention_forward");
  if (seq_len == 0 || x.tokens() % seq_len != 0) {
    throw ShapeError("attention_forward: " + std::to_string(x.tokens()) +
                     " tokens are not a whole number of length-" + std::to_string(seq_len) +
                     " sequences");
  }
  if (x.channels() != spec.h || attn.wq[0].extent(0) != spec.h) {
    throw ShapeError("attention_forward: input width does not match hidden size");
  }
  const std::size_t d = attn.head_dim();
  const std::size_t local_heads = attn.heads / attn.ranks();
  const std::size_t sequences = x.tokens() / seq_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  AttentionCache cache;
  cache.seq_len = seq_len;
  cache.probs.resize(x.ranks());
  std::vector<Tensor> partial;
  for (std::size_t m = 0; m < x.ranks(); ++m) {
    Tensor q = matmul(x[m], attn.wq[m]);
    Tensor k = matmul(x[m], attn.wk[m]);
    Tensor v = matmul(x[m], attn.wv[m]);
    Tensor heads_out = Tensor::zeros_like(q);
    for (std::size_t s = 0; s < sequences; ++s) {
      const std::size_t r0 = s * seq_len;
      for (std::size_t j = 0; j < local_heads; ++j) {
        const std::size_t c0 = j * d;
        const Tensor qh = block(q, r0, seq_len, c0, d);
        const Tensor kh = block(k, r0, seq_len, c0, d);
        const Tensor vh = block(v, r0, seq_len, c0, d);
        Tensor probs = matmul_nt(qh, kh);
        for (std::size_t i = 0; i < seq_len; ++i) {
          double* row = probs.raw() + i * seq_len;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t c = 0; c <= i; ++c) {
            row[c] *= scale;
            mx = std::max(mx, row[c]);
          }
          double z = 0.0;
          for (std::size_t c = 0; c <= i; ++c) {
            row[c] = std::exp(row[c] - mx);
            z += row[c];
          }
          for (std::size_t c = 0; c <= i; ++c) row[c] /= z;
          for (std::size_t c = i + 1; c < seq_len; ++c) row[c] = 0.0;
        }
        put_block(heads_out, matmul(probs, vh), r0, c0);
        cache.probs[m].push_back(std::move(probs));
      }
    }
    partial.push_back(matmul(heads_out, attn.out[m]));
    cache.input.push_back(x[m]);
    cache.q.push_back(std::move(q));
    cache.k.push_back(std::move(k));
    cache.v.push_back(std::move(v));
    cache.heads_out.push_back(std::move(heads_out));
  }
  RankSet z = sync_block_output(RankSet(std::move(partial)), spec, ctx, site, cache.sync);
  return {std::move(z), std::move(cache)};
}

AttentionBackward attention_backward(const RankSet& upstream, const ShardedAttention& attn,
                                     const AttentionCache& cache, const PartialReduceSpec& spec,
                                     BackwardPlacement placement, const ExecContext& ctx) {
  check_ranks(upstream, attn.ranks(), "attention_backward");
  if (cache.input.size() != upstream.ranks() || cache.seq_len == 0 ||
      cache.input[0].rows() != upstream.tokens()) {
    throw ShapeError("attention_backward: cache does not match upstream gradient");
  }
  const std::size_t seq_len = cache.seq_len;
  const std::size_t d = attn.head_dim();
  const std::size_t local_heads = attn.heads / attn.ranks();
  const std::size_t sequences = upstream.tokens() / seq_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  const RankSet dpartial = sync_block_output_backward(upstream, spec, ctx, placement, cache.sync);
  AttentionBackward out{RankSet{}, attn.zeros_like()};
  std::vector<Tensor> dx;
  for (std::size_t m = 0; m < upstream.ranks(); ++m) {
    out.grads.out[m] = matmul_tn(cache.heads_out[m], dpartial[m]);
    const Tensor dheads = matmul_nt(dpartial[m], attn.out[m]);
    Tensor dq = Tensor::zeros_like(cache.q[m]);
    Tensor dk = Tensor::zeros_like(cache.k[m]);
    Tensor dv = Tensor::zeros_like(cache.v[m]);
    std::size_t idx = 0;
    for (std::size_t s = 0; s < sequences; ++s) {
      const std::size_t r0 = s * seq_len;
      for (std::size_t j = 0; j < local_heads; ++j, ++idx) {
        const std::size_t c0 = j * d;
        const Tensor& probs = cache.probs[m][idx];
        const Tensor qh = block(cache.q[m], r0, seq_len, c0, d);
        const Tensor kh = block(cache.k[m], r0, seq_len, c0, d);
        const Tensor vh = block(cache.v[m], r0, seq_len, c0, d);
        const Tensor dh = block(dheads, r0, seq_len, c0, d);
        put_block(dv, matmul_tn(probs, dh), r0, c0);
        Tensor dscores = matmul_nt(dh, vh);
        for (std::size_t i = 0; i < seq_len; ++i) {
          double* row = dscores.raw() + i * seq_len;
          const double* prow = probs.raw() + i * seq_len;
          double inner = 0.0;
          for (std::size_t c = 0; c <= i; ++c) inner += row[c] * prow[c];
          for (std::size_t c = 0; c <= i; ++c) row[c] = prow[c] * (row[c] - inner) * scale;
          for (std::size_t c = i + 1; c < seq_len; ++c) row[c] = 0.0;
        }
        put_block(dq, matmul(dscores, kh), r0, c0);
        put_block(dk, matmul_tn(dscores, qh), r0, c0);
      }
    }
    const Tensor& x = cache.input[m];
    out.grads.wq[m] = matmul_tn(x, dq);
    out.grads.wk[m] = matmul_tn(x, dk);
    out.grads.wv[m] = matmul_tn(x, dv);
    Tensor dxm = matmul_nt(dq, attn.wq[m]);
    add_inplace(dxm, matmul_nt(dk, attn.wk[m]));
    add_inplace(dxm, matmul_nt(dv, attn.wv[m]));
    dx.push_back(std::move(dxm));
  }
  out.dx = sync_block_input_backward(RankSet(std::move(dx)), ctx, placement);
  return out;
}

// ---------------------------------------------------------------------------

std::pair<RankSet, LayerCache> layer_forward(const RankSet& x, const CaatLayer& layer,
                                             std::size_t seq_len, const ExecContext& ctx,
                                             std::size_t layer_index) {
  LayerCache cache;
  cache.input = x;
  std::vector<Tensor> attn_in;
  for (const auto& xm : x) attn_in.push_back(rmsnorm(xm, layer.attn_norm));
  cache.attn_in = RankSet(std::move(attn_in));
  auto [za, attn_cache] =
      attention_forward(cache.attn_in, layer.attn, layer.spec, seq_len, ctx, 2 * layer_index);
  cache.attn = std::move(attn_cache);

  RankSet mid = x;
  for (std::size_t m = 0; m < mid.ranks(); ++m) add_inplace(mid[m], za[m]);
  cache.mid = mid;

  std::vector<Tensor> mlp_in;
  for (const auto& xm : mid) mlp_in.push_back(rmsnorm(xm, layer.mlp_norm));
  cache.mlp_in = RankSet(std::move(mlp_in));
  auto [zm, mlp_cache] = mlp_forward(cache.mlp_in, layer.mlp, layer.spec, ctx, 2 * layer_index + 1);
  cache.mlp = std::move(mlp_cache);

  RankSet out = std::move(mid);
  for (std::size_t m = 0; m < out.ranks(); ++m) add_inplace(out[m], zm[m]);
  return {std::move(out), std::move(cache)};
}

LayerBackward layer_backward(const RankSet& upstream, const CaatLayer& layer,
                             const LayerCache& cache, BackwardPlacement placement,
                             const ExecContext& ctx) {
  if (cache.input.ranks() != upstream.ranks() || cache.input.shape() != upstream.shape()) {
    throw ShapeError("layer_backward: cache does not match upstream gradient");
  }
  const bool needs_sync = placement == BackwardPlacement::h_after_norm;
  LayerBackward out;
  out.grads.attn_norm.needs_sync = needs_sync;
  out.grads.mlp_norm.needs_sync = needs_sync;

  MlpBackward mb = mlp_backward(upstream, layer.mlp, cache.mlp, layer.spec, placement, ctx);
  RankSet dmid = upstream;
  for (std::size_t m = 0; m < upstream.ranks(); ++m) {
    RmsNormGrads ng = rmsnorm_backward(cache.mid[m], layer.mlp_norm, mb.dx[m]);
    add_inplace(dmid[m], ng.dx);
    out.grads.mlp_norm.per_rank.push_back(std::move(ng.dgamma));
  }
  out.grads.mlp = std::move(mb.grads);

  AttentionBackward ab =
      attention_backward(dmid, layer.attn, cache.attn, layer.spec, placement, ctx);
  RankSet dx = dmid;
  for (std::size_t m = 0; m < dmid.ranks(); ++m) {
    RmsNormGrads ng = rmsnorm_backward(cache.input[m], layer.attn_norm, ab.dx[m]);
    add_inplace(dx[m], ng.dx);
    out.grads.attn_norm.per_rank.push_back(std::move(ng.dgamma));
  }
  out.grads.attn = std::move(ab.grads);
  out.dx = std::move(dx);
  return out;
}

Tensor sync_norm_param_grads(const NormGradShards& grads, CommLedger* ledger) {
  const RankSet rs(grads.per_rank);
  return all_reduce(rs, PrecisionMode::full64, ledger, Pass::backward, CommKind::norm_sync)[0];
}

Tensor resolve_norm_grad(const NormGradShards& grads, CommLedger* ledger) {
  if (grads.needs_sync) return sync_norm_param_grads(grads, ledger);
  return grads.per_rank.at(0);
}

}  // namespace caat
