#pragma once

#include <cstdint>
#include <vector>

#include "caat/model.hpp"
#include "caat/tensor.hpp"

namespace caat {

struct AdamWConfig {
  double lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Decoupled-weight-decay Adam over a fixed, ordered list of tensors.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig config) : config_(config) {}

  const AdamWConfig& config() const noexcept { return config_; }
  std::uint64_t steps() const noexcept { return steps_; }

  /// Advances the bias-correction counter; call once before the updates of
  /// a step.
  void begin_step() { ++steps_; }

  /// Updates param in place using moment slot `slot`.
  void update(std::size_t slot, Tensor& param, const Tensor& grad, bool decay);

  /// One full step over a model: matrices decay, norm gammas do not.
  void step(CaatModel& model, const CaatModel& grads);

  // checkpoint access
  std::vector<Tensor>& first_moments() noexcept { return m_; }
  std::vector<Tensor>& second_moments() noexcept { return v_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }
  void set_steps(std::uint64_t steps) noexcept { steps_ = steps; }

 private:
  AdamWConfig config_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace caat
