#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "minidrive/gradcheck.hpp"
#include "minidrive/ops.hpp"

namespace minidrive {

/// Ordered, named parameter registry. Construction order is fixed per
/// module so checkpoints and seeded init are reproducible.
template <class S>
struct ParamList {
  std::vector<std::pair<std::string, TensorPtr<S>>> items;

  void add(std::string name, TensorPtr<S> t) { items.emplace_back(std::move(name), std::move(t)); }

  TensorPtr<S> find(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return t;
    return nullptr;
  }

  std::vector<TensorPtr<S>> tensors() const {
    std::vector<TensorPtr<S>> out;
    out.reserve(items.size());
    for (const auto& [n, t] : items) out.push_back(t);
    return out;
  }

  int64_t numel() const {
    int64_t n = 0;
    for (const auto& [_, t] : items) n += t->numel();
    return n;
  }
};

namespace init {

template <class S>
TensorPtr<S> kaiming_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  return random_tensor<S>(std::move(shape), rng, -bound, bound);
}

template <class S>
TensorPtr<S> uniform(Shape shape, double bound, std::mt19937_64& rng) {
  return random_tensor<S>(std::move(shape), rng, -bound, bound);
}

template <class S>
TensorPtr<S> zeros(Shape shape) {
  return make_tensor<S>(std::move(shape));
}

template <class S>
TensorPtr<S> ones(Shape shape) {
  return full_like_shape<S>(std::move(shape), S(1));
}

}  // namespace init

/// Adam with decoupled weight decay. Only tensors with requires_grad are
/// registered, so frozen parameters are never touched (not even by decay).
template <class S>
class AdamW {
 public:
  AdamW(std::vector<TensorPtr<S>> params, double lr, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : params) {
      if (!p->requires_grad) continue;
      params_.push_back(p);
      m_.emplace_back(p->data.size(), S(0));
      v_.emplace_back(p->data.size(), S(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->ensure_grad().assign(p->data.size(), S(0));
  }

  /// Scales all gradients so their global L2 norm is at most `max_norm`.
  void clip_global_norm(double max_norm) {
    double sq = 0.0;
    for (auto& p : params_)
      for (S g : p->ensure_grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const S f = static_cast<S>(max_norm / norm);
    for (auto& p : params_)
      for (S& g : p->grad) g *= f;
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& g = p.ensure_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < g.size(); ++j) {
        m[j] = static_cast<S>(b1_ * m[j] + (1.0 - b1_) * g[j]);
        v[j] = static_cast<S>(b2_ * v[j] + (1.0 - b2_) * g[j] * g[j]);
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p.data[j] -= static_cast<S>(lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.data[j]));
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<TensorPtr<S>> params_;
  std::vector<std::vector<S>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

/// Scaled dot-product attention, multi-head over column slices.
/// `additive_mask` ([lq,lk] or null) is added to every head's scores;
/// biases may be null for bias-free maps.
template <class S>
struct AttnWeights {
  TensorPtr<S> wq, wk, wv, wo;      // all [dim,dim]
  TensorPtr<S> bq, bk, bv, bo;      // [dim] or null
};

template <class S>
TensorPtr<S> multi_head_attention(const TensorPtr<S>& q_in, const TensorPtr<S>& kv_in,
                                  const AttnWeights<S>& w, int heads,
                                  const TensorPtr<S>& additive_mask, Tape<S>* tape) {
  const int dim = q_in->extent(1);
  if (kv_in->extent(1) != dim) throw DimError("attention: query/key dim mismatch");
  if (kv_in->extent(0) < 1) throw ValidationError("attention: empty key/value sequence");
  if (heads < 1 || dim % heads != 0) throw DimError("attention: head count must divide dim");
  const int dh = dim / heads;

  auto project = [&](const TensorPtr<S>& x, const TensorPtr<S>& wm, const TensorPtr<S>& bias) {
    auto y = ops::matmul(x, wm, tape);
    return bias ? ops::bias_add_rows(y, bias, tape) : y;
  };
  auto q = project(q_in, w.wq, w.bq);
  auto k = project(kv_in, w.wk, w.bk);
  auto v = project(kv_in, w.wv, w.bv);

  std::vector<TensorPtr<S>> head_outs;
  head_outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    auto qh = ops::slice_last(q, h * dh, dh, tape);
    auto kh = ops::slice_last(k, h * dh, dh, tape);
    auto vh = ops::slice_last(v, h * dh, dh, tape);
    auto scores = ops::scale(ops::matmul(qh, ops::transpose(kh, tape), tape),
                             1.0 / std::sqrt(static_cast<double>(dh)), tape);
    if (additive_mask) scores = ops::add(scores, additive_mask, tape);
    head_outs.push_back(ops::matmul(ops::softmax(scores, tape), vh, tape));
  }
  auto merged = heads == 1 ? head_outs[0] : ops::concat(head_outs, 1, tape);
  return project(merged, w.wo, w.bo);
}

/// Score offset that zeroes masked keys exactly: exp(-1e9 - max)
/// underflows to 0 in both float and double.
constexpr double kMaskOff = -1e9;

}  // namespace minidrive
