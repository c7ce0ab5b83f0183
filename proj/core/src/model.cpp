#include "caat/model.hpp"

#include <stdexcept>

#include "caat/rng.hpp"

namespace caat {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (layers == 0) fail("layers must be at least 1");
  if (hidden == 0) fail("hidden must be at least 1");
  if (vocab < 2) fail("vocab must be at least 2");
  if (seq_len == 0) fail("seq_len must be at least 1");
  if (ranks == 0) fail("tensor-parallel rank count must be at least 1");
  if (heads == 0 || hidden % heads != 0) {
    fail("hidden " + std::to_string(hidden) + " must be divisible by heads " +
         std::to_string(heads));
  }
  if (heads % ranks != 0) {
    fail("heads " + std::to_string(heads) + " must be divisible by ranks " +
         std::to_string(ranks));
  }
  if ((4 * hidden) % ranks != 0) fail("4*hidden must be divisible by ranks");
  if (!(p >= 0.0 && p <= 1.0)) fail("p must lie in [0, 1]");
}

PartialReduceSpec ModelConfig::reduce_spec() const {
  return PartialReduceSpec(p, hidden, scale_private, ranks);
}

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_tensor(Shape shape, std::uint64_t seed, std::uint64_t id) {
  Tensor t(std::move(shape));
  CounterRng rng(mix_seed({seed, id}));
  for (auto& v : t.data()) v = kInitStd * rng.normal();
  return t;
}

}  // namespace

CaatModel CaatModel::init(const ModelConfig& config) {
  config.validate();
  const std::size_t h = config.hidden;
  const std::size_t v = config.vocab;
  const std::size_t f = 4 * h;
  const std::uint64_t seed = config.seed;
  CaatModel model;
  model.config = config;
  model.token_embedding = normal_tensor({v, h}, seed, 1);
  model.position_embedding = normal_tensor({config.seq_len, h}, seed, 2);
  for (std::size_t i = 0; i < config.layers; ++i) {
    const std::uint64_t base = 100 + 10 * static_cast<std::uint64_t>(i);
    CaatLayer layer;
    layer.attn_norm = Tensor({h}, 1.0);
    layer.mlp_norm = Tensor({h}, 1.0);
    layer.attn = ShardedAttention::shard(
        config.heads, normal_tensor({h, h}, seed, base + 0), normal_tensor({h, h}, seed, base + 1),
        normal_tensor({h, h}, seed, base + 2), normal_tensor({h, h}, seed, base + 3),
        config.ranks);
    layer.mlp = ShardedMlp::shard(normal_tensor({h, f}, seed, base + 4),
                                  normal_tensor({f, h}, seed, base + 5), config.ranks);
    layer.spec = config.reduce_spec();
    model.layers.push_back(std::move(layer));
  }
  model.final_norm = Tensor({h}, 1.0);
  model.lm_head = normal_tensor({h, v}, seed, 3);
  return model;
}

CaatModel CaatModel::zeros_like() const {
  CaatModel z;
  z.config = config;
  z.token_embedding = Tensor::zeros_like(token_embedding);
  z.position_embedding = Tensor::zeros_like(position_embedding);
  for (const auto& layer : layers) z.layers.push_back(layer.zeros_like());
  z.final_norm = Tensor::zeros_like(final_norm);
  z.lm_head = Tensor::zeros_like(lm_head);
  return z;
}

std::size_t CaatModel::parameter_count() const {
  std::size_t n = 0;
  for_each_param(*this, [&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

namespace {

template <class Model, class Fn>
void visit(Model& model, const Fn& fn) {
  fn(std::string("tok_emb"), model.token_embedding);
  fn(std::string("pos_emb"), model.position_embedding);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& layer = model.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    fn(pre + "attn_norm", layer.attn_norm);
    for (std::size_t m = 0; m < layer.attn.ranks(); ++m) {
      const std::string r = "." + std::to_string(m);
      fn(pre + "attn.wq" + r, layer.attn.wq[m]);
      fn(pre + "attn.wk" + r, layer.attn.wk[m]);
      fn(pre + "attn.wv" + r, layer.attn.wv[m]);
      fn(pre + "attn.out" + r, layer.attn.out[m]);
    }
    fn(pre + "mlp_norm", layer.mlp_norm);
    for (std::size_t m = 0; m < layer.mlp.ranks(); ++m) {
      const std::string r = "." + std::to_string(m);
      fn(pre + "mlp.up" + r, layer.mlp.up[m]);
      fn(pre + "mlp.down" + r, layer.mlp.down[m]);
    }
  }
  fn(std::string("final_norm"), model.final_norm);
  fn(std::string("lm_head"), model.lm_head);
}

}  // namespace

void for_each_param(CaatModel& model, const ParamVisitor& fn) { visit(model, fn); }

void for_each_param(const CaatModel& model, const ConstParamVisitor& fn) { visit(model, fn); }

ModelForward model_forward(const CaatModel& model, std::span<const int> inputs,
                           std::size_t seq_len, const ExecContext& ctx) {
  const auto& cfg = model.config;
  if (seq_len == 0 || seq_len > cfg.seq_len) {
    throw ShapeError("sequence length " + std::to_string(seq_len) + " outside [1, " +
                     std::to_string(cfg.seq_len) + "]");
  }
  if (inputs.empty() || inputs.size() % seq_len != 0) {
    throw ShapeError("input length " + std::to_string(inputs.size()) +
                     " is not a whole number of sequences");
  }
  const std::size_t h = cfg.hidden;
  const std::size_t tokens = inputs.size();

  Tensor embedded({tokens, h});
  for (std::size_t i = 0; i < tokens; ++i) {
    const int tok = inputs[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab) {
      throw std::out_of_range("token id " + std::to_string(tok) + " outside vocabulary");
    }
    const auto te = model.token_embedding.row(static_cast<std::size_t>(tok));
    const auto pe = model.position_embedding.row(i % seq_len);
    auto dst = embedded.row(i);
    for (std::size_t c = 0; c < h; ++c) dst[c] = te[c] + pe[c];
  }

  ModelForward out;
  out.cache.inputs.assign(inputs.begin(), inputs.end());
  out.cache.seq_len = seq_len;
  RankSet x = RankSet::replicate(embedded, cfg.ranks);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto [next, cache] = layer_forward(x, model.layers[i], seq_len, ctx, i);
    out.cache.layers.push_back(std::move(cache));
    x = std::move(next);
  }

  Tensor head_in =
      all_reduce(x, PrecisionMode::full64, ctx.ledger, Pass::forward, CommKind::head_reduce)[0];
  scale_inplace(head_in, 1.0 / static_cast<double>(cfg.ranks));
  Tensor normed = rmsnorm(head_in, model.final_norm);
  out.logits = matmul(normed, model.lm_head);
  out.cache.head_in = std::move(head_in);
  out.cache.normed = std::move(normed);
  return out;
}

CaatModel model_backward(const CaatModel& model, const ModelCache& cache, const Tensor& dlogits,
                         BackwardPlacement placement, const ExecContext& ctx) {
  const auto& cfg = model.config;
  if (cache.layers.size() != model.layers.size() || dlogits.rows() != cache.inputs.size()) {
    throw ShapeError("model_backward: cache does not match the model or gradient");
  }
  CaatModel grads = model.zeros_like();
  grads.lm_head = matmul_tn(cache.normed, dlogits);
  const Tensor dnormed = matmul_nt(dlogits, model.lm_head);
  RmsNormGrads fin = rmsnorm_backward(cache.head_in, model.final_norm, dnormed);
  grads.final_norm = std::move(fin.dgamma);

  // The head input is the rank average. With h_after_norm each rank receives
  // its exact share; the conventional path treats the stream as one
  // replicated tensor.
  Tensor dstream = std::move(fin.dx);
  if (placement == BackwardPlacement::h_after_norm) {
    scale_inplace(dstream, 1.0 / static_cast<double>(cfg.ranks));
  }
  RankSet dx = RankSet::replicate(dstream, cfg.ranks);

  for (std::size_t i = model.layers.size(); i-- > 0;) {
    LayerBackward lb = layer_backward(dx, model.layers[i], cache.layers[i], placement, ctx);
    auto& g = grads.layers[i];
    g.attn = std::move(lb.grads.attn);
    g.mlp = std::move(lb.grads.mlp);
    g.attn_norm = resolve_norm_grad(lb.grads.attn_norm, ctx.ledger);
    g.mlp_norm = resolve_norm_grad(lb.grads.mlp_norm, ctx.ledger);
    dx = std::move(lb.dx);
  }

  Tensor dembedded = placement == BackwardPlacement::h_after_norm
                         ? all_reduce(dx, ctx.grad_precision, ctx.ledger, Pass::backward,
                                      CommKind::embedding_reduce)[0]
                         : dx[0];
  const std::size_t h = cfg.hidden;
  for (std::size_t i = 0; i < cache.inputs.size(); ++i) {
    const auto src = dembedded.row(i);
    auto te = grads.token_embedding.row(static_cast<std::size_t>(cache.inputs[i]));
    auto pe = grads.position_embedding.row(i % cache.seq_len);
    for (std::size_t c = 0; c < h; ++c) {
      te[c] += src[c];
      pe[c] += src[c];
    }
  }
  return grads;
}

}  // namespace caat
