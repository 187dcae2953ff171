#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "minidrive/ops.hpp"

namespace minidrive {

/// Draws in [lo, hi) from explicit mt19937_64 bits so results do not
/// depend on the standard library's distribution implementations.
template <class S>
S uniform(std::mt19937_64& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return static_cast<S>(lo + u * (hi - lo));
}

template <class S>
TensorPtr<S> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  auto t = make_tensor<S>(std::move(shape));
  for (auto& v : t->data) v = uniform<S>(rng, lo, hi);
  return t;
}

struct GradCheckOptions {
  double step = 1e-5;
  // 0 = check every coordinate; otherwise check this many per tensor,
  // stratified over the buffer.
  int max_coords_per_tensor = 0;
};

/// Compares the tape gradient of a scalar-valued function against central
/// differences and returns the max relative error, using
/// |a - n| / max(|a|, |n|, 1e-8).
///
/// `fn` must be a pure function of `inputs` (plus constants): it is
/// re-evaluated many times with perturbed entries.
template <class S>
double finite_diff_gradcheck(
    const std::function<TensorPtr<S>(const std::vector<TensorPtr<S>>&, Tape<S>*)>& fn,
    const std::vector<TensorPtr<S>>& inputs, const GradCheckOptions& opt = {}) {
  for (const auto& in : inputs) in->requires_grad = true;

  Tape<S> tape;
  auto y = fn(inputs, &tape);
  if (y->numel() != 1) throw DimError("gradcheck: objective must be scalar");
  tape.backward(y);

  const double e = opt.step;
  double max_rel = 0.0;
  for (const auto& in : inputs) {
    const auto* g = tape.find_grad(in.get());
    const int64_t n = in->numel();
    int64_t stride = 1;
    if (opt.max_coords_per_tensor > 0 && n > opt.max_coords_per_tensor)
      stride = n / opt.max_coords_per_tensor;
    for (int64_t i = 0; i < n; i += stride) {
      const S saved = in->data[i];
      in->data[i] = saved + static_cast<S>(e);
      const double fp = static_cast<double>(fn(inputs, nullptr)->data[0]);
      in->data[i] = saved - static_cast<S>(e);
      const double fm = static_cast<double>(fn(inputs, nullptr)->data[0]);
      in->data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * e);
      const double analytic = g ? static_cast<double>((*g)[i]) : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    }
  }
  return max_rel;
}

/// Weighted-sum objective: reduces an arbitrary op output to a scalar with
/// fixed random weights so every output coordinate influences the check.
template <class S>
std::function<TensorPtr<S>(const std::vector<TensorPtr<S>>&, Tape<S>*)> weighted_objective(
    std::function<TensorPtr<S>(const std::vector<TensorPtr<S>>&, Tape<S>*)> op, Shape out_shape,
    uint64_t weight_seed) {
  std::mt19937_64 rng(weight_seed);
  auto w = random_tensor<S>(std::move(out_shape), rng);
  return [op = std::move(op), w](const std::vector<TensorPtr<S>>& ins, Tape<S>* tape) {
    return ops::sum(ops::mul(op(ins, tape), w, tape), tape);
  };
}

}  // namespace minidrive
