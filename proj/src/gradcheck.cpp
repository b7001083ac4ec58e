#include "tdlm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace tdlm {

Scalar grad_check(const RootBuilder& build, Tensor& leaf, Scalar step) {
  if (!(step > 0)) throw ContractError("grad_check: step must be positive");

  std::vector<Scalar> saved_grad(leaf.grad().begin(), leaf.grad().end());
  leaf.zero_grad();
  std::vector<Scalar> analytic;
  {
    Graph g;
    g.backward(build(g));
    analytic.assign(leaf.grad().begin(), leaf.grad().end());
  }
  std::copy(saved_grad.begin(), saved_grad.end(), leaf.grad().begin());

  auto eval = [&] {
    Graph g;
    return build(g).item();
  };
  // nearest power of two, so orig +/- h loses no bits for short mantissas
  const Scalar h = std::exp2(std::round(std::log2(step)));
  Scalar worst = 0;
  auto data = leaf.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Scalar orig = data[i];
    const Scalar hi = orig + h, lo = orig - h;
    data[i] = hi;
    const Scalar up = eval();
    data[i] = lo;
    const Scalar down = eval();
    data[i] = orig;
    // hi - lo is exact, unlike 2 * step after rounding orig +/- step
    const Scalar numeric = (up - down) / (hi - lo);
    const Scalar err = std::abs(analytic[i] - numeric) / std::max(Scalar(1), std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace tdlm
