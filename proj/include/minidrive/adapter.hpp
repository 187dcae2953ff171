#pragma once

#include <string>

#include "minidrive/nn.hpp"

namespace minidrive {

struct AdapterConfig {
  int dim = 128;
  int head_count = 1;

  void validate() const {
    if (dim < 1) throw ValidationError("adapter: dim must be >= 1");
    if (head_count < 1 || dim % head_count != 0)
      throw ValidationError("adapter: head_count must divide dim");
  }
};

/// Dynamic Instruction Adapter: visual tokens query the instruction
/// embeddings (q=V, k=T, v=T) and the attended output is added back
/// residually. W_o starts at zero, so a fresh adapter is the identity on V
/// and training departs from the un-adapted pipeline.
template <class S>
class DIAdapter {
 public:
  DIAdapter(AdapterConfig cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    w_.wq = init::kaiming_uniform<S>({cfg_.dim, cfg_.dim}, cfg_.dim, rng);
    w_.wk = init::kaiming_uniform<S>({cfg_.dim, cfg_.dim}, cfg_.dim, rng);
    w_.wv = init::kaiming_uniform<S>({cfg_.dim, cfg_.dim}, cfg_.dim, rng);
    w_.wo = init::zeros<S>({cfg_.dim, cfg_.dim});
    for (auto t : {w_.wq, w_.wk, w_.wv, w_.wo}) t->requires_grad = true;
  }

  const AdapterConfig& config() const { return cfg_; }

  /// V' = softmax((V Wq)(T Wk)^T / sqrt(d_h)) (T Wv) Wo. `key_mask`
  /// ([lv,lt] additive, or null) excludes pad columns of T.
  TensorPtr<S> cross_attention(const TensorPtr<S>& v, const TensorPtr<S>& t,
                               const TensorPtr<S>& key_mask = nullptr,
                               Tape<S>* tape = nullptr) const {
    if (v->rank() != 2 || t->rank() != 2) throw DimError("cross_attention: expected matrices");
    if (t->extent(0) < 1) throw ValidationError("cross_attention: instruction must be non-empty");
    if (v->extent(1) != cfg_.dim || t->extent(1) != cfg_.dim)
      throw DimError("cross_attention: dim mismatch");
    return multi_head_attention(v, t, w_, cfg_.head_count, key_mask, tape);
  }

  /// V_input = V + V'.
  TensorPtr<S> residual_fuse(const TensorPtr<S>& v, const TensorPtr<S>& v_prime,
                             Tape<S>* tape = nullptr) const {
    return ops::add(v, v_prime, tape);
  }

  TensorPtr<S> forward(const TensorPtr<S>& v, const TensorPtr<S>& t,
                       const TensorPtr<S>& key_mask = nullptr, Tape<S>* tape = nullptr) const {
    return residual_fuse(v, cross_attention(v, t, key_mask, tape), tape);
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(prefix + ".wq", w_.wq);
    out.add(prefix + ".wk", w_.wk);
    out.add(prefix + ".wv", w_.wv);
    out.add(prefix + ".wo", w_.wo);
  }

  AttnWeights<S>& weights() { return w_; }

 private:
  AdapterConfig cfg_;
  AttnWeights<S> w_;
};

}  // namespace minidrive
