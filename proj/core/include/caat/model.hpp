#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "caat/collectives.hpp"
#include "caat/tensor.hpp"
#include "caat/transformer.hpp"

namespace caat {

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t vocab = 256;
  std::size_t seq_len = 256;  // number of learned positions
  std::size_t ranks = 1;
  double p = 1.0;
  bool scale_private = true;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  PartialReduceSpec reduce_spec() const;
};

/// Decoder-only transformer sharded over `config.ranks` simulated ranks.
/// Embeddings, the final norm and the LM head are replicated.
struct CaatModel {
  ModelConfig config;
  Tensor token_embedding;     // [V x h]
  Tensor position_embedding;  // [t x h]
  std::vector<CaatLayer> layers;
  Tensor final_norm;  // [h]
  Tensor lm_head;     // [h x V]

  /// Projections and embeddings ~ N(0, 0.02), gammas = 1. The unsharded
  /// matrices are drawn first and then sharded, so a given seed describes
  /// the same function for every rank count.
  static CaatModel init(const ModelConfig& config);
  CaatModel zeros_like() const;

  std::size_t parameter_count() const;
};

using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor& param)>;

/// Visits every parameter tensor in a fixed order with a stable name.
void for_each_param(CaatModel& model, const ParamVisitor& fn);
void for_each_param(const CaatModel& model, const ConstParamVisitor& fn);

struct ModelCache {
  std::vector<int> inputs;
  std::size_t seq_len = 0;
  std::vector<LayerCache> layers;
  Tensor head_in;  // rank average of the final hidden states
  Tensor normed;
};

struct ModelForward {
  Tensor logits;  // [tokens x V]
  ModelCache cache;
};

/// `inputs` holds whole sequences of `seq_len` tokens back to back.
ModelForward model_forward(const CaatModel& model, std::span<const int> inputs,
                           std::size_t seq_len, const ExecContext& ctx);

/// Gradients with the same layout as the model. Norm gradients are
/// synchronized (h_after_norm) or taken from rank 0 (g_before_norm).
CaatModel model_backward(const CaatModel& model, const ModelCache& cache, const Tensor& dlogits,
                         BackwardPlacement placement, const ExecContext& ctx);

}  // namespace caat
