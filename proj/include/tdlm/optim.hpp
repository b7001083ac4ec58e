#pragma once

#include <vector>

#include "tdlm/model.hpp"

namespace tdlm {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  Scalar learning_rate = Scalar(5e-4);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  // Rescales the global gradient norm down to this value; 0 disables.
  Scalar grad_clip = Scalar(1.0);
};

// Applies one update from the gradients currently stored in the parameters.
// Gradients are not zeroed; the caller owns that.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  void step(TransformerParams& params);
  const OptimizerConfig& config() const { return config_; }
  void set_learning_rate(Scalar lr) { config_.learning_rate = lr; }
  long steps() const { return t_; }

 private:
  OptimizerConfig config_;
  std::vector<std::vector<Scalar>> m_, v_;
  long t_ = 0;
};

}  // namespace tdlm
