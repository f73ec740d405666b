#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "deepbirads/gradcheck.hpp"
#include "deepbirads/tensor.hpp"

namespace testutil {

using namespace deepbirads;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Worst group-relative finite-difference error of `fn` with respect to
/// `inputs`. Non-scalar outputs are reduced with fixed random weights.
inline double op_grad_error(std::vector<Tensor> inputs, const std::function<Tensor()>& fn, std::uint64_t seed = 1) {
  Rng rng(seed);
  Tensor probe = fn();
  Tensor weights = random_tensor(probe.shape(), rng);
  std::vector<NamedTensor> named;
  for (std::size_t i = 0; i < inputs.size(); ++i) named.push_back({"input" + std::to_string(i), inputs[i]});
  auto report = gradient_check(named, [&] { return sum(mul(fn(), weights)); });
  return report.worst_rel_error;
}

}  // namespace testutil
