#pragma once

#include <functional>

#include "tdlm/graph.hpp"

namespace tdlm {

// Builds the scalar root from a fresh graph; called repeatedly by grad_check.
using RootBuilder = std::function<Var(Graph&)>;

// Compares the analytic gradient of the root w.r.t. `leaf` with central
// differences. The step is rounded to the nearest power of two. Returns
//   max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
// `leaf` is restored bit-exactly and its grad buffer is left untouched.
Scalar grad_check(const RootBuilder& build, Tensor& leaf, Scalar step);

}  // namespace tdlm
