#include "skd/adam.hpp"

#include <cmath>

#include "skd/errors.hpp"

namespace skd {

AdamState AdamState::like(std::span<const Tensor> params) {
  AdamState s;
  for (const Tensor& p : params) {
    s.m.emplace_back(p.shape());
    s.v.emplace_back(p.shape());
  }
  return s;
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               double lr, const AdamConfig& cfg, std::span<const std::string> names) {
  SKD_REQUIRE(lr > 0.0, "learning rate must be positive");
  SKD_REQUIRE(params.size() == grads.size() && params.size() == state.m.size() &&
                  params.size() == state.v.size(),
              "adam: parameter, gradient and moment counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    SKD_REQUIRE(params[i].shape() == grads[i].shape() && params[i].shape() == state.m[i].shape(),
                "adam: shape mismatch for parameter " + std::to_string(i));
    if (!grads[i].all_finite()) {
      const std::string label = i < names.size() ? names[i] : "#" + std::to_string(i);
      throw NumericError("non-finite gradient for parameter " + label);
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].span();
    auto g = grads[i].span();
    auto m = state.m[i].span();
    auto v = state.v[i].span();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace skd
