#include "tdlm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "eigen_util.hpp"

namespace tdlm {
namespace {

using detail::cmap;
using detail::mmap;

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

std::vector<Scalar> copy_of(std::span<const Scalar> v) { return {v.begin(), v.end()}; }

// Applies f elementwise and routes the gradient through df(x, y).
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  auto x = a.value();
  std::vector<Scalar> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const auto pa = a.id();
  return a.graph().emit(a.shape(), std::move(y), {a}, [pa, df](Graph& g, std::uint32_t self) {
    if (!g.requires_grad(pa)) return;
    auto gy = g.grad_of(self);
    auto xs = g.value_of(pa);
    auto ys = g.value_of(self);
    auto gx = g.grad_of(pa);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * df(xs[i], ys[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<Scalar> out(m * n);
  mmap(out.data(), m, n).noalias() = cmap(a.value().data(), m, k) * cmap(b.value().data(), k, n);
  const auto pa = a.id(), pb = b.id();
  return a.graph().emit({m, n}, std::move(out), {a, b},
                        [pa, pb, m, k, n](Graph& g, std::uint32_t self) {
                          auto gy = cmap(g.grad_of(self).data(), m, n);
                          if (g.requires_grad(pa))
                            mmap(g.grad_of(pa).data(), m, k).noalias() +=
                                gy * cmap(g.value_of(pb).data(), k, n).transpose();
                          if (g.requires_grad(pb))
                            mmap(g.grad_of(pb).data(), k, n).noalias() +=
                                cmap(g.value_of(pa).data(), m, k).transpose() * gy;
                        });
}

Var transpose(Var a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<Scalar> out(r * c);
  mmap(out.data(), c, r) = cmap(a.value().data(), r, c).transpose();
  const auto pa = a.id();
  return a.graph().emit({c, r}, std::move(out), {a}, [pa, r, c](Graph& g, std::uint32_t self) {
    mmap(g.grad_of(pa).data(), r, c) += cmap(g.grad_of(self).data(), c, r).transpose();
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  auto x = a.value(), y = b.value();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  const auto pa = a.id(), pb = b.id();
  return a.graph().emit(a.shape(), std::move(out), {a, b}, [pa, pb](Graph& g, std::uint32_t self) {
    auto gy = g.grad_of(self);
    for (auto p : {pa, pb}) {
      if (!g.requires_grad(p)) continue;
      auto gx = g.grad_of(p);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  auto x = a.value(), y = b.value();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  const auto pa = a.id(), pb = b.id();
  return a.graph().emit(a.shape(), std::move(out), {a, b}, [pa, pb](Graph& g, std::uint32_t self) {
    auto gy = g.grad_of(self);
    if (g.requires_grad(pa)) {
      auto gx = g.grad_of(pa);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (g.requires_grad(pb)) {
      auto gx = g.grad_of(pb);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] -= gy[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  auto x = a.value(), y = b.value();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  const auto pa = a.id(), pb = b.id();
  return a.graph().emit(a.shape(), std::move(out), {a, b}, [pa, pb](Graph& g, std::uint32_t self) {
    auto gy = g.grad_of(self);
    auto xa = g.value_of(pa), xb = g.value_of(pb);
    if (g.requires_grad(pa)) {
      auto gx = g.grad_of(pa);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * xb[i];
    }
    if (g.requires_grad(pb)) {
      auto gx = g.grad_of(pb);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * xa[i];
    }
  });
}

Var scale(Var a, Scalar factor) {
  return unary(a, [factor](Scalar x) { return x * factor; },
               [factor](Scalar, Scalar) { return factor; });
}

Var add_scalar(Var a, Scalar offset) {
  return unary(a, [offset](Scalar x) { return x + offset; }, [](Scalar, Scalar) { return Scalar(1); });
}

Var add_row(Var a, Var bias) {
  const std::size_t r = a.rows(), c = a.cols();
  if (bias.size() != c)
    throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " does not match columns of " +
                     shape_str(a.shape()));
  auto x = a.value(), b = bias.value();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + b[j];
  const auto pa = a.id(), pb = bias.id();
  return a.graph().emit(a.shape(), std::move(out), {a, bias},
                        [pa, pb, r, c](Graph& g, std::uint32_t self) {
                          auto gy = g.grad_of(self);
                          if (g.requires_grad(pa)) {
                            auto gx = g.grad_of(pa);
                            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                          }
                          if (g.requires_grad(pb)) {
                            auto gb = g.grad_of(pb);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) gb[j] += gy[i * c + j];
                          }
                        });
}

Var exp(Var a) {
  return unary(a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

Var log(Var a) {
  return unary(a, [](Scalar x) { return std::log(x); }, [](Scalar x, Scalar) { return 1 / x; });
}

Var gelu(Var a) {
  constexpr Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar kA = Scalar(0.044715);
  return unary(
      a,
      [](Scalar x) { return Scalar(0.5) * x * (1 + std::tanh(kC * (x + kA * x * x * x))); },
      [](Scalar x, Scalar) {
        const Scalar u = kC * (x + kA * x * x * x);
        const Scalar t = std::tanh(u);
        const Scalar du = kC * (1 + 3 * kA * x * x);
        return Scalar(0.5) * (1 + t) + Scalar(0.5) * x * (1 - t * t) * du;
      });
}

Var clamp(Var a, Scalar lo, Scalar hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
  return unary(a, [lo, hi](Scalar x) { return std::clamp(x, lo, hi); },
               [lo, hi](Scalar x, Scalar) { return (x > lo && x < hi) ? Scalar(1) : Scalar(0); });
}

Var minimum(Var a, Var b) {
  require_same_shape(a, b, "minimum");
  auto x = a.value(), y = b.value();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = y[i] < x[i] ? y[i] : x[i];
  const auto pa = a.id(), pb = b.id();
  return a.graph().emit(a.shape(), std::move(out), {a, b}, [pa, pb](Graph& g, std::uint32_t self) {
    auto gy = g.grad_of(self);
    auto xa = g.value_of(pa), xb = g.value_of(pb);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const auto target = xb[i] < xa[i] ? pb : pa;
      if (g.requires_grad(target)) g.grad_of(target)[i] += gy[i];
    }
  });
}

Var sum(Var a) {
  Scalar s = 0;
  for (auto v : a.value()) s += v;
  const auto pa = a.id();
  return a.graph().emit({1}, {s}, {a}, [pa](Graph& g, std::uint32_t self) {
    const Scalar gy = g.grad_of(self)[0];
    for (auto& gx : g.grad_of(pa)) gx += gy;
  });
}

Var mean(Var a) { return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size())); }

Var dot(Var a, const Tensor& c) {
  if (c.size() != a.size())
    throw ShapeError("dot: operand sizes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(c.shape()));
  return sum(mul(a, a.graph().constant(Tensor(a.shape(), c.values()))));
}

Var softmax_rows(Var x) {
  const std::size_t r = x.rows(), c = x.cols();
  auto v = x.value();
  std::vector<Scalar> out(v.size());
  for (std::size_t i = 0; i < r; ++i) {
    const Scalar* row = v.data() + i * c;
    Scalar* o = out.data() + i * c;
    const Scalar mx = *std::max_element(row, row + c);
    Scalar z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  const auto px = x.id();
  return x.graph().emit(x.shape(), std::move(out), {x}, [px, r, c](Graph& g, std::uint32_t self) {
    auto gy = g.grad_of(self);
    auto y = g.value_of(self);
    auto gx = g.grad_of(px);
    for (std::size_t i = 0; i < r; ++i) {
      Scalar s = 0;
      for (std::size_t j = 0; j < c; ++j) s += gy[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (gy[i * c + j] - s);
    }
  });
}

Var causal_softmax_rows(Var x) {
  const std::size_t r = x.rows(), c = x.cols();
  if (r > c) throw ShapeError("causal_softmax_rows: more rows than columns in " + shape_str(x.shape()));
  const std::size_t offset = c - r;
  auto v = x.value();
  std::vector<Scalar> out(v.size(), Scalar(0));
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t n = i + offset + 1;
    const Scalar* row = v.data() + i * c;
    Scalar* o = out.data() + i * c;
    const Scalar mx = *std::max_element(row, row + n);
    Scalar z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  const auto px = x.id();
  return x.graph().emit(x.shape(), std::move(out), {x},
                        [px, r, c, offset](Graph& g, std::uint32_t self) {
                          auto gy = g.grad_of(self);
                          auto y = g.value_of(self);
                          auto gx = g.grad_of(px);
                          for (std::size_t i = 0; i < r; ++i) {
                            const std::size_t n = i + offset + 1;
                            Scalar s = 0;
                            for (std::size_t j = 0; j < n; ++j) s += gy[i * c + j] * y[i * c + j];
                            for (std::size_t j = 0; j < n; ++j)
                              gx[i * c + j] += y[i * c + j] * (gy[i * c + j] - s);
                          }
                        });
}

Var log_softmax_rows(Var x) {
  const std::size_t r = x.rows(), c = x.cols();
  auto v = x.value();
  std::vector<Scalar> out(v.size());
  for (std::size_t i = 0; i < r; ++i) {
    const Scalar* row = v.data() + i * c;
    const Scalar mx = *std::max_element(row, row + c);
    Scalar z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const Scalar lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lz;
  }
  const auto px = x.id();
  return x.graph().emit(x.shape(), std::move(out), {x}, [px, r, c](Graph& g, std::uint32_t self) {
    auto gy = g.grad_of(self);
    auto y = g.value_of(self);
    auto gx = g.grad_of(px);
    for (std::size_t i = 0; i < r; ++i) {
      Scalar s = 0;
      for (std::size_t j = 0; j < c; ++j) s += gy[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[i * c + j] - std::exp(y[i * c + j]) * s;
    }
  });
}

Var layer_norm_rows(Var x, Var gain, Var bias, Scalar eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c)
    throw ShapeError("layer_norm_rows: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  auto v = x.value(), gv = gain.value(), bv = bias.value();
  std::vector<Scalar> out(v.size());
  // normalized values and inverse std are needed by backward
  auto xhat = std::make_shared<std::vector<Scalar>>(v.size());
  auto inv_std = std::make_shared<std::vector<Scalar>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Scalar* row = v.data() + i * c;
    Scalar mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<Scalar>(c);
    Scalar var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Scalar>(c);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar h = (row[j] - mu) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gv[j] + bv[j];
    }
  }
  const auto px = x.id(), pg = gain.id(), pb = bias.id();
  return x.graph().emit(
      x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, r, c, xhat, inv_std](Graph& g, std::uint32_t self) {
        auto gy = g.grad_of(self);
        auto gv = g.value_of(pg);
        const auto& h = *xhat;
        if (g.requires_grad(pg)) {
          auto gg = g.grad_of(pg);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += gy[i * c + j] * h[i * c + j];
        }
        if (g.requires_grad(pb)) {
          auto gb = g.grad_of(pb);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += gy[i * c + j];
        }
        if (g.requires_grad(px)) {
          auto gx = g.grad_of(px);
          const Scalar inv_c = Scalar(1) / static_cast<Scalar>(c);
          for (std::size_t i = 0; i < r; ++i) {
            Scalar m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const Scalar dh = gy[i * c + j] * gv[j];
              m1 += dh;
              m2 += dh * h[i * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const Scalar dh = gy[i * c + j] * gv[j];
              gx[i * c + j] += (*inv_std)[i] * (dh - m1 - h[i * c + j] * m2);
            }
          }
        }
      });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
  const std::size_t rows = table.rows(), c = table.cols();
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  auto t = table.value();
  std::vector<Scalar> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows)
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(rows) + " rows");
    std::copy_n(t.data() + ids[i] * c, c, out.data() + i * c);
  }
  const auto pt = table.id();
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return table.graph().emit({ids.size(), c}, std::move(out), {table},
                            [pt, c, idx = std::move(idx)](Graph& g, std::uint32_t self) {
                              auto gy = g.grad_of(self);
                              auto gt = g.grad_of(pt);
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  gt[idx[i] * c + j] += gy[i * c + j];
                            });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const std::size_t r = a.rows(), c = a.cols();
  if (count == 0 || begin + count > c)
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_str(a.shape()));
  auto v = a.value();
  std::vector<Scalar> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(v.data() + i * c + begin, count, out.data() + i * count);
  const auto pa = a.id();
  return a.graph().emit({r, count}, std::move(out), {a},
                        [pa, r, c, begin, count](Graph& g, std::uint32_t self) {
                          auto gy = g.grad_of(self);
                          auto gx = g.grad_of(pa);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < count; ++j)
                              gx[i * c + begin + j] += gy[i * count + j];
                        });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r)
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    c += p.cols();
  }
  std::vector<Scalar> out(r * c);
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    auto v = p.value();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(v.data() + i * w, w, out.data() + i * c + off);
    off += w;
    ids.push_back(p.id());
    widths.push_back(w);
  }
  return parts[0].graph().emit({r, c}, std::move(out), parts,
                               [ids, widths, r, c](Graph& g, std::uint32_t self) {
                                 auto gy = g.grad_of(self);
                                 std::size_t off = 0;
                                 for (std::size_t k = 0; k < ids.size(); ++k) {
                                   const std::size_t w = widths[k];
                                   if (g.requires_grad(ids[k])) {
                                     auto gx = g.grad_of(ids[k]);
                                     for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < w; ++j)
                                         gx[i * w + j] += gy[i * c + off + j];
                                   }
                                   off += w;
                                 }
                               });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const std::size_t r = a.rows(), c = a.cols();
  if (count == 0 || begin + count > r)
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_str(a.shape()));
  auto v = a.value();
  std::vector<Scalar> out(v.begin() + begin * c, v.begin() + (begin + count) * c);
  const auto pa = a.id();
  return a.graph().emit({count, c}, std::move(out), {a},
                        [pa, begin, c](Graph& g, std::uint32_t self) {
                          auto gy = g.grad_of(self);
                          auto gx = g.grad_of(pa);
                          for (std::size_t i = 0; i < gy.size(); ++i) gx[begin * c + i] += gy[i];
                        });
}

Var gather_cols(Var a, std::span<const std::int32_t> index) {
  const std::size_t r = a.rows(), c = a.cols();
  if (index.size() != r)
    throw ShapeError("gather_cols: " + std::to_string(index.size()) + " indices for " +
                     shape_str(a.shape()));
  auto v = a.value();
  std::vector<Scalar> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= c)
      throw InputError("gather_cols: index " + std::to_string(index[i]) + " outside " +
                       shape_str(a.shape()));
    out[i] = v[i * c + index[i]];
  }
  const auto pa = a.id();
  std::vector<std::int32_t> idx(index.begin(), index.end());
  return a.graph().emit({r}, std::move(out), {a}, [pa, c, idx = std::move(idx)](Graph& g, std::uint32_t self) {
    auto gy = g.grad_of(self);
    auto gx = g.grad_of(pa);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[i * c + idx[i]] += gy[i];
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  const auto pa = a.id();
  return a.graph().emit(std::move(shape), copy_of(a.value()), {a}, [pa](Graph& g, std::uint32_t self) {
    auto gy = g.grad_of(self);
    auto gx = g.grad_of(pa);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var masked_nll_sum(Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r || mask.size() != r)
    throw ShapeError("masked_nll_sum: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for logits " +
                     shape_str(logits.shape()));
  auto v = logits.value();
  auto probs = std::make_shared<std::vector<Scalar>>(r * c, Scalar(0));
  Scalar total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
      throw InputError("masked_nll_sum: target " + std::to_string(targets[i]) +
                       " outside vocabulary of " + std::to_string(c));
    const Scalar* row = v.data() + i * c;
    const Scalar mx = *std::max_element(row, row + c);
    Scalar z = 0;
    for (std::size_t j = 0; j < c; ++j) z += ((*probs)[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
    total -= row[targets[i]] - mx - std::log(z);
  }
  const auto pl = logits.id();
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  Mask mk(mask.begin(), mask.end());
  return logits.graph().emit(
      {1}, {total}, {logits},
      [pl, r, c, probs, tg = std::move(tg), mk = std::move(mk)](Graph& g, std::uint32_t self) {
        const Scalar gy = g.grad_of(self)[0];
        auto gx = g.grad_of(pl);
        for (std::size_t i = 0; i < r; ++i) {
          if (!mk[i]) continue;
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy * (*probs)[i * c + j];
          gx[i * c + tg[i]] -= gy;
        }
      });
}

}  // namespace tdlm
