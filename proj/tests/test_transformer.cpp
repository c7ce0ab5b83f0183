#include <gtest/gtest.h>

#include <cmath>

#include "caat/model.hpp"
#include "caat/rng.hpp"
#include "caat/train.hpp"
#include "caat/transformer.hpp"
#include "support/grad_check.hpp"
#include "support/reference_model.hpp"

using namespace caat;
using caat::testing::Mat;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, double scale = 0.5) {
  Tensor t(std::move(shape));
  CounterRng rng(seed);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

RankSet random_ranks(std::size_t ranks, std::size_t tokens, std::size_t h, std::uint64_t seed) {
  std::vector<Tensor> ts;
  for (std::size_t m = 0; m < ranks; ++m) ts.push_back(randn({tokens, h}, seed + m));
  return RankSet(std::move(ts));
}

double sum_dot(const RankSet& a, const RankSet& b) {
  double s = 0.0;
  for (std::size_t m = 0; m < a.ranks(); ++m) s += dot(a[m], b[m]);
  return s;
}

double rel(const Tensor& a, const Tensor& fd) { return caat::testing::compare(a, fd).rel_err; }

// Unsharded two-layer MLP on one device.
Tensor dense_mlp(const Tensor& x, const Tensor& up, const Tensor& down) {
  return matmul(gelu(matmul(x, up)), down);
}

}  // namespace

TEST(ShardedMlp, ShardsReassemble) {
  const Tensor up = randn({8, 32}, 1), down = randn({32, 8}, 2);
  const ShardedMlp mlp = ShardedMlp::shard(up, down, 4);
  EXPECT_EQ(mlp.up[0].shape(), (Shape{8, 8}));
  EXPECT_EQ(mlp.down[3].shape(), (Shape{8, 8}));
  EXPECT_EQ(mlp.full_up(), up);
  EXPECT_EQ(mlp.full_down(), down);
  EXPECT_THROW(ShardedMlp::shard(up, down, 3), ShapeError);
  EXPECT_THROW(ShardedMlp::shard(up, randn({32, 4}, 3), 2), ShapeError);
}

TEST(ShardedAttention, RejectsIndivisibleHeads) {
  const Tensor w = randn({8, 8}, 1);
  EXPECT_THROW(ShardedAttention::shard(3, w, w, w, w, 1), ShapeError);
  EXPECT_THROW(ShardedAttention::shard(2, w, w, w, w, 4), ShapeError);
  EXPECT_EQ(ShardedAttention::shard(4, w, w, w, w, 2).wq[0].shape(), (Shape{8, 4}));
}

TEST(MlpForward, POneMatchesUnshardedMlp) {
  const Tensor up = randn({8, 32}, 11), down = randn({32, 8}, 12);
  const Tensor x = randn({5, 8}, 13);
  const Tensor want = dense_mlp(x, up, down);
  for (std::size_t ranks : {1u, 2u, 4u}) {
    const auto [z, cache] = mlp_forward(RankSet::replicate(x, ranks),
                                        ShardedMlp::shard(up, down, ranks),
                                        PartialReduceSpec(1.0, 8, true, ranks), ExecContext{});
    for (const auto& zm : z) EXPECT_LT(max_abs_diff(zm, want), 1e-10);
  }
}

TEST(MlpForward, SingleRankIgnoresP) {
  const Tensor up = randn({8, 32}, 21), down = randn({32, 8}, 22);
  const Tensor x = randn({3, 8}, 23);
  for (double p : {0.0, 0.5, 1.0}) {
    const auto [z, c] = mlp_forward(RankSet({x}), ShardedMlp::shard(up, down, 1),
                                    PartialReduceSpec(p, 8, true, 1), ExecContext{});
    EXPECT_EQ(z[0], matmul(gelu(matmul(x, up)), down));
  }
}

TEST(MlpForward, PZeroGivesIndependentRankMlps) {
  const ShardedMlp mlp = ShardedMlp::shard(randn({8, 32}, 31), randn({32, 8}, 32), 2);
  const RankSet x = random_ranks(2, 3, 8, 33);
  CommLedger ledger;
  ExecContext ctx;
  ctx.ledger = &ledger;
  const auto [z, c] = mlp_forward(x, mlp, PartialReduceSpec(0.0, 8, false, 2), ctx);
  for (std::size_t m = 0; m < 2; ++m) EXPECT_EQ(z[m], dense_mlp(x[m], mlp.up[m], mlp.down[m]));
  EXPECT_EQ(ledger.total(), 0u);
}

TEST(MlpForward, RejectsWrongWidth) {
  const ShardedMlp mlp = ShardedMlp::shard(randn({8, 32}, 1), randn({32, 8}, 2), 2);
  EXPECT_THROW(mlp_forward(random_ranks(2, 3, 6, 1), mlp, PartialReduceSpec(0.5, 6), ExecContext{}),
               ShapeError);
  EXPECT_THROW(mlp_forward(random_ranks(3, 3, 8, 1), mlp, PartialReduceSpec(0.5, 8), ExecContext{}),
               ShapeError);
}

TEST(MlpBackward, MatchesFiniteDifferences) {
  const std::size_t h = 8, ranks = 2;
  const PartialReduceSpec spec(0.5, h, true, ranks);
  ShardedMlp mlp = ShardedMlp::shard(randn({h, 4 * h}, 41), randn({4 * h, h}, 42), ranks);
  RankSet x = random_ranks(ranks, 3, h, 43);
  const RankSet u = random_ranks(ranks, 3, h, 45);
  auto objective = [&] { return sum_dot(mlp_forward(x, mlp, spec, ExecContext{}).first, u); };

  const auto [z, cache] = mlp_forward(x, mlp, spec, ExecContext{});
  const MlpBackward g = mlp_backward(u, mlp, cache, spec, BackwardPlacement::h_after_norm, ExecContext{});
  auto fd_of = [&](Tensor& t) {
    return finite_difference_grad(
        [&](const Tensor& p) {
          const Tensor saved = t;
          t = p;
          const double v = objective();
          t = saved;
          return v;
        },
        t, 1e-5);
  };
  for (std::size_t m = 0; m < ranks; ++m) {
    EXPECT_LT(rel(g.grads.up[m], fd_of(mlp.up[m])), 1e-6);
    EXPECT_LT(rel(g.grads.down[m], fd_of(mlp.down[m])), 1e-6);
    EXPECT_LT(rel(g.dx[m], fd_of(x[m])), 1e-6);
  }
}

TEST(MlpBackward, ZeroUpstreamGivesZeroGrads) {
  const std::size_t h = 8;
  const ShardedMlp mlp = ShardedMlp::shard(randn({h, 32}, 51), randn({32, h}, 52), 2);
  const auto [z, cache] = mlp_forward(random_ranks(2, 3, h, 53), mlp, PartialReduceSpec(0.5, h), ExecContext{});
  for (auto placement : {BackwardPlacement::g_before_norm, BackwardPlacement::h_after_norm}) {
    const MlpBackward g = mlp_backward(RankSet::zeros(2, {3, h}), mlp, cache,
                                       PartialReduceSpec(0.5, h), placement, ExecContext{});
    for (std::size_t m = 0; m < 2; ++m) {
      EXPECT_EQ(sum(g.grads.up[m]), 0.0);
      EXPECT_EQ(max_abs_diff(g.grads.down[m], Tensor::zeros_like(g.grads.down[m])), 0.0);
      EXPECT_EQ(max_abs_diff(g.dx[m], Tensor::zeros_like(g.dx[m])), 0.0);
    }
  }
}

TEST(MlpBackward, POneCaatMatchesVanillaTensorParallel) {
  // Vanilla TP: full all-reduce via reduce-scatter/all-gather (a mask with
  // p=1) and the conventional gradient placement.
  const std::size_t h = 8, ranks = 2;
  const ShardedMlp mlp = ShardedMlp::shard(randn({h, 32}, 61), randn({32, h}, 62), ranks);
  const Tensor x = randn({4, h}, 63);
  const Tensor u_full = randn({4, h}, 64);
  const RankSet u = RankSet::replicate(u_full, ranks);
  const PartialReduceSpec spec(1.0, h, true, ranks);

  // The h placement differentiates the sum over rank copies, so each copy
  // receives 1/M of the logical upstream (exact for M = 2).
  Tensor u_share = u_full;
  scale_inplace(u_share, 1.0 / ranks);
  const auto [zc, cc] = mlp_forward(RankSet::replicate(x, ranks), mlp, spec, ExecContext{});
  const MlpBackward gc = mlp_backward(RankSet::replicate(u_share, ranks), mlp, cc, spec,
                                      BackwardPlacement::h_after_norm, ExecContext{});
  ExecContext vanilla;
  vanilla.mask = MaskSpec{MaskKind::topk, 1.0, 0};
  const auto [zv, cv] = mlp_forward(RankSet::replicate(x, ranks), mlp, spec, vanilla);
  const MlpBackward gv = mlp_backward(u, mlp, cv, spec, BackwardPlacement::g_before_norm, vanilla);
  for (std::size_t m = 0; m < ranks; ++m) {
    EXPECT_LT(max_abs_diff(zc[m], zv[m]), 1e-10);
    EXPECT_LT(max_abs_diff(gc.grads.up[m], gv.grads.up[m]), 1e-10);
    EXPECT_LT(max_abs_diff(gc.grads.down[m], gv.grads.down[m]), 1e-10);
  }
}

TEST(AttentionForward, SingleTokenPassesValuePath) {
  const std::size_t h = 8;
  const Tensor wq = randn({h, h}, 71), wk = randn({h, h}, 72), wv = randn({h, h}, 73),
               wo = randn({h, h}, 74);
  const Tensor x = randn({1, h}, 75);
  const ShardedAttention attn = ShardedAttention::shard(2, wq, wk, wv, wo, 2);
  const auto [z, cache] = attention_forward(RankSet::replicate(x, 2), attn,
                                            PartialReduceSpec(1.0, h, true, 2), 1, ExecContext{});
  EXPECT_LT(max_abs_diff(z[0], matmul(matmul(x, wv), wo)), 1e-12);
  EXPECT_EQ(cache.probs[0][0][0], 1.0);
}

TEST(AttentionForward, POneMatchesSingleRank) {
  const std::size_t h = 16;
  const Tensor wq = randn({h, h}, 81), wk = randn({h, h}, 82), wv = randn({h, h}, 83),
               wo = randn({h, h}, 84);
  const Tensor x = randn({10, h}, 85);
  const auto [ref, c1] = attention_forward(RankSet({x}), ShardedAttention::shard(4, wq, wk, wv, wo, 1),
                                           PartialReduceSpec(1.0, h), 5, ExecContext{});
  for (std::size_t ranks : {2u, 4u}) {
    const auto [z, c] = attention_forward(RankSet::replicate(x, ranks),
                                          ShardedAttention::shard(4, wq, wk, wv, wo, ranks),
                                          PartialReduceSpec(1.0, h, true, ranks), 5, ExecContext{});
    for (const auto& zm : z) EXPECT_LT(max_abs_diff(zm, ref[0]), 1e-10);
  }
  EXPECT_THROW(attention_forward(RankSet({x}), ShardedAttention::shard(4, wq, wk, wv, wo, 1),
                                 PartialReduceSpec(1.0, h), 3, ExecContext{}),
               ShapeError);
}

TEST(AttentionBackward, MatchesFiniteDifferences) {
  const std::size_t h = 8, ranks = 2, t = 3;
  const PartialReduceSpec spec(0.5, h, true, ranks);
  ShardedAttention attn = ShardedAttention::shard(2, randn({h, h}, 91), randn({h, h}, 92),
                                                  randn({h, h}, 93), randn({h, h}, 94), ranks);
  RankSet x = random_ranks(ranks, 2 * t, h, 95);
  const RankSet u = random_ranks(ranks, 2 * t, h, 97);
  auto objective = [&] {
    return sum_dot(attention_forward(x, attn, spec, t, ExecContext{}).first, u);
  };
  const auto [z, cache] = attention_forward(x, attn, spec, t, ExecContext{});
  const AttentionBackward g =
      attention_backward(u, attn, cache, spec, BackwardPlacement::h_after_norm, ExecContext{});
  auto fd_of = [&](Tensor& target) {
    return finite_difference_grad(
        [&](const Tensor& p) {
          const Tensor saved = target;
          target = p;
          const double v = objective();
          target = saved;
          return v;
        },
        target, 1e-5);
  };
  for (std::size_t m = 0; m < ranks; ++m) {
    EXPECT_LT(rel(g.grads.wq[m], fd_of(attn.wq[m])), 1e-6);
    EXPECT_LT(rel(g.grads.wk[m], fd_of(attn.wk[m])), 1e-6);
    EXPECT_LT(rel(g.grads.wv[m], fd_of(attn.wv[m])), 1e-6);
    EXPECT_LT(rel(g.grads.out[m], fd_of(attn.out[m])), 1e-6);
    EXPECT_LT(rel(g.dx[m], fd_of(x[m])), 1e-6);
  }
}

TEST(AttentionBackward, ZeroUpstreamGivesZeroGrads) {
  const std::size_t h = 8;
  const ShardedAttention attn = ShardedAttention::shard(2, randn({h, h}, 1), randn({h, h}, 2),
                                                        randn({h, h}, 3), randn({h, h}, 4), 2);
  const auto [z, cache] = attention_forward(random_ranks(2, 4, h, 5), attn,
                                            PartialReduceSpec(0.5, h), 2, ExecContext{});
  const AttentionBackward g = attention_backward(RankSet::zeros(2, {4, h}), attn, cache,
                                                 PartialReduceSpec(0.5, h),
                                                 BackwardPlacement::h_after_norm, ExecContext{});
  for (std::size_t m = 0; m < 2; ++m) {
    EXPECT_EQ(max_abs_diff(g.grads.wq[m], Tensor::zeros_like(g.grads.wq[m])), 0.0);
    EXPECT_EQ(max_abs_diff(g.dx[m], Tensor::zeros_like(g.dx[m])), 0.0);
  }
}

TEST(Layer, ZeroWeightsAreIdentity) {
  ModelConfig cfg = caat::testing::tiny_config(2, 0.5);
  CaatModel model = CaatModel::init(cfg);
  CaatLayer layer = model.layers[0].zeros_like();
  layer.attn_norm.fill(1.0);
  layer.mlp_norm.fill(1.0);
  const RankSet x = random_ranks(2, 8, 16, 101);
  const auto [out, cache] = layer_forward(x, layer, 4, ExecContext{});
  EXPECT_EQ(out, x);
}

TEST(Layer, SharedChannelsStayIdenticalAcrossRanks) {
  for (double p : {0.25, 0.5, 0.75}) {
    ModelConfig cfg = caat::testing::tiny_config(4, p);
    CaatModel model = CaatModel::init(cfg);
    caat::testing::randomize(model, 7);
    const std::size_t shared = cfg.reduce_spec().shared_count();
    // Input with identical shared channels, divergent private ones.
    RankSet x = random_ranks(4, 8, 16, 111);
    for (std::size_t m = 1; m < 4; ++m)
      for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t c = 0; c < shared; ++c) x[m][t * 16 + c] = x[0][t * 16 + c];
    for (const auto& layer : model.layers) {
      x = layer_forward(x, layer, 4, ExecContext{}).first;
      for (std::size_t m = 1; m < 4; ++m)
        for (std::size_t t = 0; t < 8; ++t)
          for (std::size_t c = 0; c < 16; ++c) {
            if (c < shared) {
              EXPECT_EQ(x[m][t * 16 + c], x[0][t * 16 + c]);
            } else {
              EXPECT_NE(x[m][t * 16 + c], x[0][t * 16 + c]);
            }
          }
    }
  }
}

TEST(Layer, BothPlacementsAgreeAtPOne) {
  ModelConfig cfg = caat::testing::tiny_config(2, 1.0);
  CaatModel model = CaatModel::init(cfg);
  caat::testing::randomize(model, 9);
  const Batch batch = caat::testing::random_batch(cfg.vocab, 2, 4, 10);
  const LossGrad g = loss_and_grad(model, batch, BackwardPlacement::g_before_norm, ExecContext{});
  const LossGrad h = loss_and_grad(model, batch, BackwardPlacement::h_after_norm, ExecContext{});
  EXPECT_EQ(g.loss, h.loss);
  std::map<std::string, const Tensor*> hg;
  for_each_param(h.grads, [&](const std::string& n, const Tensor& t) { hg[n] = &t; });
  for_each_param(g.grads, [&](const std::string& n, const Tensor& t) {
    EXPECT_LT(caat::testing::compare(t, *hg[n]).rel_err, 1e-10) << n;
  });
}

TEST(Layer, PlacementHIsExactAndPlacementGIsNotBelowPOne) {
  ModelConfig cfg = caat::testing::tiny_config(2, 0.5);
  CaatModel model = CaatModel::init(cfg);
  caat::testing::randomize(model, 11);
  const Batch batch = caat::testing::random_batch(cfg.vocab, 1, 4, 12);
  std::string where;
  const double h_err = caat::testing::worst(
      caat::testing::check_model_gradients(model, batch, BackwardPlacement::h_after_norm), &where);
  EXPECT_LT(h_err, 1e-6) << where;
  const double g_err = caat::testing::worst(
      caat::testing::check_model_gradients(model, batch, BackwardPlacement::g_before_norm));
  EXPECT_GT(g_err, 1e-2);
}

TEST(Layer, ZeroUpstreamGivesZeroGrads) {
  ModelConfig cfg = caat::testing::tiny_config(2, 0.5);
  CaatModel model = CaatModel::init(cfg);
  const RankSet x = random_ranks(2, 4, 16, 121);
  const auto [out, cache] = layer_forward(x, model.layers[0], 4, ExecContext{});
  const LayerBackward b = layer_backward(RankSet::zeros(2, {4, 16}), model.layers[0], cache,
                                         BackwardPlacement::h_after_norm, ExecContext{});
  for (std::size_t m = 0; m < 2; ++m) {
    EXPECT_EQ(max_abs_diff(b.dx[m], Tensor::zeros_like(b.dx[m])), 0.0);
    EXPECT_EQ(sum(b.grads.attn_norm.per_rank[m]), 0.0);
  }
  EXPECT_TRUE(b.grads.attn_norm.needs_sync);
  EXPECT_THROW(layer_backward(RankSet::zeros(2, {3, 16}), model.layers[0], cache,
                              BackwardPlacement::h_after_norm, ExecContext{}),
               ShapeError);
}

TEST(NormSync, OppositeGradsCancelAndSingleRankUnchanged) {
  const Tensor g = randn({6}, 131);
  Tensor neg = g;
  scale_inplace(neg, -1.0);
  CommLedger ledger;
  const Tensor s = sync_norm_param_grads(NormGradShards{{g, neg}, true}, &ledger);
  for (double v : s.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(ledger.total(CommKind::norm_sync), 6u);
  EXPECT_EQ(sync_norm_param_grads(NormGradShards{{g}, true}, nullptr), g);
}

TEST(NormSync, LedgerIncrementPerLayerIsTwoNormsTimesH) {
  ModelConfig cfg = caat::testing::tiny_config(2, 0.5);
  const CaatModel model = CaatModel::init(cfg);
  CommLedger ledger;
  ExecContext ctx;
  ctx.ledger = &ledger;
  loss_and_grad(model, caat::testing::random_batch(cfg.vocab, 2, 4, 1),
                BackwardPlacement::h_after_norm, ctx);
  EXPECT_EQ(ledger.total(CommKind::norm_sync), cfg.layers * 2 * cfg.hidden);
}

TEST(Model, ForwardAndGradientsMatchUnshardedOracle) {
  for (std::size_t ranks : {1u, 2u, 4u}) {
    ModelConfig cfg = caat::testing::tiny_config(ranks, 1.0);
    CaatModel model = CaatModel::init(cfg);
    caat::testing::randomize(model, 13);
    const Batch batch = caat::testing::random_batch(cfg.vocab, 2, 4, 14);
    caat::testing::ReferenceModel ref(caat::testing::gather(model), cfg.heads);
    const auto want = ref.run(batch.inputs, batch.targets, 4);

    const ModelForward fwd = model_forward(model, batch.inputs, 4, ExecContext{});
    EXPECT_LT(max_abs_diff(fwd.logits, Tensor({want.logits.r, want.logits.c}, want.logits.v)), 1e-10);
    const LossGrad lg = loss_and_grad(model, batch, BackwardPlacement::h_after_norm, ExecContext{});
    EXPECT_NEAR(lg.loss, want.loss, 1e-12);
    const auto got = caat::testing::gather(lg.grads);
    auto close = [](const Mat& a, const Mat& b) {
      double d = 0.0;
      for (std::size_t i = 0; i < a.v.size(); ++i) d = std::max(d, std::fabs(a.v[i] - b.v[i]));
      return d;
    };
    EXPECT_LT(close(got.tok, want.grads.tok), 1e-10);
    EXPECT_LT(close(got.head, want.grads.head), 1e-10);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      EXPECT_LT(close(got.layers[l].wq, want.grads.layers[l].wq), 1e-10);
      EXPECT_LT(close(got.layers[l].down, want.grads.layers[l].down), 1e-10);
      EXPECT_LT(close(got.layers[l].g1, want.grads.layers[l].g1), 1e-10);
    }
  }
}

TEST(Model, InitDescribesSameFunctionForEveryRankCount) {
  ModelConfig c1 = caat::testing::tiny_config(1, 1.0);
  ModelConfig c4 = caat::testing::tiny_config(4, 1.0);
  const auto a = caat::testing::gather(CaatModel::init(c1));
  const auto b = caat::testing::gather(CaatModel::init(c4));
  EXPECT_EQ(a.layers[1].up.v, b.layers[1].up.v);
  EXPECT_EQ(a.head.v, b.head.v);
}

TEST(Model, RejectsBadTokensAndLengths) {
  const CaatModel model = CaatModel::init(caat::testing::tiny_config(2, 0.5));
  const std::vector<int> bad{1, 2, 99, 3};
  EXPECT_THROW(model_forward(model, bad, 4, ExecContext{}), std::out_of_range);
  const std::vector<int> three{1, 2, 3};
  EXPECT_THROW(model_forward(model, three, 4, ExecContext{}), ShapeError);
  EXPECT_THROW(model_forward(model, three, 5, ExecContext{}), ShapeError);
}

TEST(ModelConfig, ValidationMessages) {
  ModelConfig c = caat::testing::tiny_config(3, 0.5);
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = caat::testing::tiny_config(2, 1.5);
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = caat::testing::tiny_config(2, 0.5);
  c.heads = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
