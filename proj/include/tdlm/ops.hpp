#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tdlm/graph.hpp"

namespace tdlm {

// Differentiable operations on graph nodes. Matrix operations treat rank-1
// nodes as a single row. Every operation validates shapes and throws
// ShapeError naming both operands on mismatch.

Var matmul(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Scalar factor);
Var add_scalar(Var a, Scalar offset);
// Adds a [1 x cols] (or rank-1) bias to every row of a.
Var add_row(Var a, Var bias);

Var exp(Var a);
Var log(Var a);
// tanh approximation of GELU
Var gelu(Var a);
// Gradient passes only where lo < a < hi.
Var clamp(Var a, Scalar lo, Scalar hi);
// Elementwise minimum; ties send the gradient to a.
Var minimum(Var a, Var b);

Var sum(Var a);
Var mean(Var a);
// sum(a * c) for a constant tensor c of the same size.
Var dot(Var a, const Tensor& c);

Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
// Row i only sees columns j <= i + (cols - rows); masked entries are exactly 0.
Var causal_softmax_rows(Var x);
Var layer_norm_rows(Var x, Var gain, Var bias, Scalar eps = Scalar(1e-5));

// Rows of table selected by ids: result [ids.size() x table.cols()].
Var embedding(Var table, std::span<const std::int32_t> ids);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
// Result i = a[i, index[i]]; shape [rows].
Var gather_cols(Var a, std::span<const std::int32_t> index);
Var reshape(Var a, Shape shape);

// Sum over rows with mask[i] of -log softmax(logits[i])[targets[i]].
Var masked_nll_sum(Var logits, std::span<const std::int32_t> targets,
                   std::span<const std::uint8_t> mask);

}  // namespace tdlm
