#include "tdlm/optim.hpp"

#include <cmath>

namespace tdlm {

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (config_.learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
}

void Optimizer::step(TransformerParams& params) {
  Scalar clip_factor = 1;
  if (config_.grad_clip > 0) {
    Scalar sq = 0;
    params.visit([&](const std::string&, const Tensor& t) {
      for (auto g : t.grad()) sq += g * g;
    });
    const Scalar norm = std::sqrt(sq);
    if (norm > config_.grad_clip) clip_factor = config_.grad_clip / norm;
  }

  ++t_;
  const Scalar lr = config_.learning_rate;
  std::size_t idx = 0;
  if (config_.kind == OptimizerKind::Sgd) {
    params.visit([&](const std::string&, Tensor& t) {
      if (!t.has_grad()) return;
      auto g = t.grad();
      auto w = t.data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] * clip_factor);
    });
    return;
  }

  const Scalar b1 = config_.beta1, b2 = config_.beta2;
  const Scalar c1 = 1 - std::pow(b1, static_cast<Scalar>(t_));
  const Scalar c2 = 1 - std::pow(b2, static_cast<Scalar>(t_));
  params.visit([&](const std::string&, Tensor& t) {
    if (m_.size() <= idx) {
      m_.emplace_back(t.size(), Scalar(0));
      v_.emplace_back(t.size(), Scalar(0));
    }
    auto& m = m_[idx];
    auto& v = v_[idx];
    ++idx;
    if (!t.has_grad()) return;
    auto g = t.grad();
    auto w = t.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const Scalar gi = g[i] * clip_factor;
      m[i] = b1 * m[i] + (1 - b1) * gi;
      v[i] = b2 * v[i] + (1 - b2) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  });
}

}  // namespace tdlm
