#include "caat/optimizer.hpp"

#include <cmath>

namespace caat {

void AdamW::update(std::size_t slot, Tensor& param, const Tensor& grad, bool decay) {
  if (!param.same_shape(grad)) throw ShapeError("AdamW: gradient shape mismatch");
  if (steps_ == 0) throw std::logic_error("AdamW::update before begin_step");
  while (m_.size() <= slot) {
    m_.emplace_back();
    v_.emplace_back();
  }
  if (m_[slot].empty()) {
    m_[slot] = Tensor::zeros_like(param);
    v_[slot] = Tensor::zeros_like(param);
  }
  Tensor& m = m_[slot];
  Tensor& v = v_[slot];
  if (!m.same_shape(param)) throw ShapeError("AdamW: moment slot reused for another shape");

  const double lr = config_.lr;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(b1, t);
  const double bc2 = 1.0 - std::pow(b2, t);
  const double shrink = decay ? 1.0 - lr * config_.weight_decay : 1.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] = param[i] * shrink - lr * mhat / (std::sqrt(vhat) + config_.eps);
  }
}

void AdamW::step(CaatModel& model, const CaatModel& grads) {
  std::vector<const Tensor*> flat_grads;
  for_each_param(grads, [&](const std::string&, const Tensor& g) { flat_grads.push_back(&g); });
  begin_step();
  std::size_t slot = 0;
  for_each_param(model, [&](const std::string&, Tensor& p) {
    update(slot, p, *flat_grads.at(slot), p.ndim() >= 2);
    ++slot;
  });
}

}  // namespace caat
