#pragma once

#include <string>
#include <vector>

#include "minidrive/encoder.hpp"
#include "minidrive/nn.hpp"

namespace minidrive {

struct MoEConfig {
  int num_experts = 4;
  int expert_out_channels = 16;  // c', also the tokens-per-image count
  int expert_kernel = 2;
  int expert_stride = 2;
  int gate_hidden = 16;
  int proj_dim = 128;

  void validate(int in_channels, int in_h, int in_w) const {
    if (num_experts < 1) throw ValidationError("moe: num_experts must be >= 1");
    if (expert_out_channels < 1) throw ValidationError("moe: expert_out_channels must be >= 1");
    if (expert_out_channels >= in_channels)
      throw ValidationError("moe: expert must decrease channels (c' < c)");
    if (proj_dim < 1) throw ValidationError("moe: proj_dim must be >= 1");
    if (gate_hidden < 1) throw ValidationError("moe: gate_hidden must be >= 1");
    if (expert_kernel < 1 || expert_stride < 1)
      throw ValidationError("moe: expert kernel/stride must be >= 1");
    if (in_h % 2 != 0 || in_w % 2 != 0)
      throw ValidationError("moe: gate max-pool needs even feature extents");
  }
};

/// Feature Engineering Mixture of Experts. A small gate scores each view's
/// feature map into softmax weights over N experts; every expert runs
/// (dense mixture, no top-k) and the weighted sum is flattened into c'
/// tokens and projected to the language-model width.
template <class S>
class FeMoE {
 public:
  FeMoE(MoEConfig cfg, int in_channels, int in_h, int in_w, std::mt19937_64& rng)
      : cfg_(cfg), c_(in_channels), h_(in_h), w_(in_w) {
    cfg_.validate(in_channels, in_h, in_w);
    const int gh = cfg_.gate_hidden;
    gate_conv_w_ = init::kaiming_uniform<S>({gh, c_, 3, 3}, c_ * 9, rng);
    gate_conv_b_ = init::zeros<S>({gh});
    const int gate_flat = gh * (h_ / 2) * (w_ / 2);
    gate_fc_w_ = init::kaiming_uniform<S>({gate_flat, cfg_.num_experts}, gate_flat, rng);
    gate_fc_b_ = init::zeros<S>({cfg_.num_experts});

    const int ck = cfg_.expert_kernel;
    for (int i = 0; i < cfg_.num_experts; ++i) {
      Expert e;
      e.deconv_w = init::kaiming_uniform<S>({c_, cfg_.expert_out_channels, ck, ck}, c_ * ck * ck, rng);
      e.deconv_b = init::zeros<S>({cfg_.expert_out_channels});
      e.conv_w = init::kaiming_uniform<S>(
          {cfg_.expert_out_channels, cfg_.expert_out_channels, 3, 3},
          cfg_.expert_out_channels * 9, rng);
      e.conv_b = init::zeros<S>({cfg_.expert_out_channels});
      experts_.push_back(std::move(e));
    }

    proj_w_ = init::kaiming_uniform<S>({token_width(), cfg_.proj_dim}, token_width(), rng);
    proj_b_ = init::zeros<S>({cfg_.proj_dim});
    mark_trainable();
  }

  const MoEConfig& config() const { return cfg_; }
  int tokens_per_image() const { return cfg_.expert_out_channels; }
  int out_h() const { return (h_ - 1) * cfg_.expert_stride + cfg_.expert_kernel; }
  int out_w() const { return (w_ - 1) * cfg_.expert_stride + cfg_.expert_kernel; }
  int token_width() const { return out_h() * out_w(); }  // dim1 = h' * w'

  /// Eq. 1: softmax over gate logits, one weight vector per view.
  TensorPtr<S> gate_weights(const TensorPtr<S>& f1, Tape<S>* tape = nullptr) const {
    check_input(f1, "gate_weights");
    auto x = ops::conv2d(f1, gate_conv_w_, 1, 1, tape);
    x = ops::bias_add_channels(x, gate_conv_b_, tape);
    x = ops::relu(x, tape);
    x = ops::maxpool2d(x, 2, tape);
    x = ops::reshape(x, {1, static_cast<int>(x->numel())}, tape);
    x = ops::matmul(x, gate_fc_w_, tape);
    x = ops::bias_add_rows(x, gate_fc_b_, tape);
    x = ops::reshape(x, {cfg_.num_experts}, tape);
    return ops::softmax(x, tape);
  }

  /// Eq. 2/3: Conv(ReLU(Deconv(F1))) with fewer channels and doubled
  /// spatial extents.
  TensorPtr<S> expert_forward(const TensorPtr<S>& f1, int expert_index,
                              Tape<S>* tape = nullptr) const {
    check_input(f1, "expert_forward");
    const Expert& e = experts_.at(static_cast<size_t>(expert_index));
    auto x = ops::conv_transpose2d(f1, e.deconv_w, cfg_.expert_stride, tape);
    x = ops::bias_add_channels(x, e.deconv_b, tape);
    x = ops::relu(x, tape);
    x = ops::conv2d(x, e.conv_w, 1, 1, tape);
    return ops::bias_add_channels(x, e.conv_b, tape);
  }

  /// Eq. 4/5: V_moe = sum_i W_i * Expert_i(F1), dense over all experts.
  TensorPtr<S> moe_combine(const TensorPtr<S>& f1, Tape<S>* tape = nullptr) const {
    auto weights = gate_weights(f1, tape);
    TensorPtr<S> acc;
    for (int i = 0; i < cfg_.num_experts; ++i) {
      auto wi = ops::slice_last(weights, i, 1, tape);
      auto term = ops::scale_by(expert_forward(f1, i, tape), wi, tape);
      acc = acc ? ops::add(acc, term, tape) : term;
    }
    return acc;
  }

  /// Flatten to [c', h'*w'] (one token per channel) and project each row
  /// to the language-model width.
  TensorPtr<S> flatten_project(const TensorPtr<S>& v_moe, Tape<S>* tape = nullptr) const {
    auto v = ops::flatten2d(v_moe, tape);
    v = ops::matmul(v, proj_w_, tape);
    return ops::bias_add_rows(v, proj_b_, tape);
  }

  TensorPtr<S> forward_view(const TensorPtr<S>& f1, Tape<S>* tape = nullptr) const {
    return flatten_project(moe_combine(f1, tape), tape);
  }

  /// Tokens for all views, concatenated in canonical camera order.
  TensorPtr<S> moe_pipeline(const std::vector<FeatureMap<S>>& views,
                            Tape<S>* tape = nullptr) const {
    if (views.empty()) throw ValidationError("moe_pipeline: no views");
    std::vector<TensorPtr<S>> per_view;
    per_view.reserve(views.size());
    for (const auto& v : views) per_view.push_back(forward_view(v.values, tape));
    return per_view.size() == 1 ? per_view[0] : ops::concat(per_view, 0, tape);
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(prefix + ".gate.conv.weight", gate_conv_w_);
    out.add(prefix + ".gate.conv.bias", gate_conv_b_);
    out.add(prefix + ".gate.fc.weight", gate_fc_w_);
    out.add(prefix + ".gate.fc.bias", gate_fc_b_);
    for (size_t i = 0; i < experts_.size(); ++i) {
      const std::string ep = prefix + ".expert." + std::to_string(i);
      out.add(ep + ".deconv.weight", experts_[i].deconv_w);
      out.add(ep + ".deconv.bias", experts_[i].deconv_b);
      out.add(ep + ".conv.weight", experts_[i].conv_w);
      out.add(ep + ".conv.bias", experts_[i].conv_b);
    }
    out.add(prefix + ".proj.weight", proj_w_);
    out.add(prefix + ".proj.bias", proj_b_);
  }

  // test hook: zero the gate's final linear layer -> uniform weights
  TensorPtr<S> gate_fc_weight() { return gate_fc_w_; }
  TensorPtr<S> gate_fc_bias() { return gate_fc_b_; }
  std::vector<TensorPtr<S>> expert_tensors(int i) {
    auto& e = experts_.at(static_cast<size_t>(i));
    return {e.deconv_w, e.deconv_b, e.conv_w, e.conv_b};
  }

 private:
  struct Expert {
    TensorPtr<S> deconv_w, deconv_b;  // [c,c',k,k]
    TensorPtr<S> conv_w, conv_b;      // [c',c',3,3]
  };

  void check_input(const TensorPtr<S>& f1, const char* op) const {
    if (f1->shape != Shape{c_, h_, w_})
      throw DimError(std::string(op) + ": expected feature map " + shape_str({c_, h_, w_}) +
                     ", got " + shape_str(f1->shape));
  }

  void mark_trainable() {
    ParamList<S> ps;
    collect_params(ps, "moe");
    for (auto& [_, t] : ps.items) t->requires_grad = true;
  }

  MoEConfig cfg_;
  int c_, h_, w_;
  TensorPtr<S> gate_conv_w_, gate_conv_b_, gate_fc_w_, gate_fc_b_;
  std::vector<Expert> experts_;
  TensorPtr<S> proj_w_, proj_b_;
};

}  // namespace minidrive
