#pragma once

#include <string>
#include <vector>

#include "minidrive/adapter.hpp"
#include "minidrive/encoder.hpp"
#include "minidrive/lm.hpp"
#include "minidrive/moe.hpp"
#include "minidrive/serialize.hpp"

namespace minidrive {

struct ModelConfig {
  EncoderConfig encoder;
  MoEConfig moe;
  AdapterConfig adapter;
  LMConfig lm;
  uint64_t seed = 42;

  void validate() const {
    encoder.validate();
    adapter.validate();
    lm.validate();
    moe.validate(encoder.out_channels(), encoder.out_spatial(), encoder.out_spatial());
    if (moe.proj_dim != lm.dim || adapter.dim != lm.dim)
      throw ValidationError("config: moe.proj_dim, adapter.dim and lm.dim must agree");
  }
};

/// Full pipeline: vision encoder -> FE-MoE tokens -> instruction-
/// conditioned fusion -> encoder-decoder LM.
template <class S>
class MiniDriveModel {
 public:
  explicit MiniDriveModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    encoder_ = std::make_unique<VisionEncoder<S>>(cfg_.encoder, rng);
    moe_ = std::make_unique<FeMoE<S>>(cfg_.moe, cfg_.encoder.out_channels(),
                                      cfg_.encoder.out_spatial(), cfg_.encoder.out_spatial(), rng);
    adapter_ = std::make_unique<DIAdapter<S>>(cfg_.adapter, rng);
    lm_ = std::make_unique<TransformerLM<S>>(cfg_.lm, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  VisionEncoder<S>& encoder() { return *encoder_; }
  FeMoE<S>& moe() { return *moe_; }
  DIAdapter<S>& adapter() { return *adapter_; }
  TransformerLM<S>& lm() { return *lm_; }

  struct Output {
    TensorPtr<S> logits;
    TensorPtr<S> loss;
  };

  /// Loss from precomputed feature maps (the frozen-encoder fast path).
  Output forward_from_features(const std::vector<FeatureMap<S>>& features,
                               const std::vector<int>& question_ids,
                               const std::vector<int>& target_ids, Tape<S>* tape = nullptr) const {
    if (target_ids.size() < 2 || target_ids.front() != Vocabulary::kBos ||
        target_ids.back() != Vocabulary::kEos)
      throw ValidationError("forward: target must be [bos, ..., eos]");
    auto fused = fuse_tokens(features, question_ids, tape);
    std::vector<int> dec_in(target_ids.begin(), target_ids.end() - 1);
    std::vector<int> labels(target_ids.begin() + 1, target_ids.end());
    auto logits = lm_->decode_logits(fused.memory, dec_in, fused.memory_pad_cols, tape);
    auto loss = ops::cross_entropy(logits, labels, Vocabulary::kPad, tape);
    return {logits, loss};
  }

  Output forward(const std::vector<TensorPtr<S>>& views, const std::vector<int>& question_ids,
                 const std::vector<int>& target_ids, Tape<S>* tape = nullptr) const {
    return forward_from_features(encoder_->encode_views(views, tape), question_ids, target_ids,
                                 tape);
  }

  std::vector<int> greedy_answer_from_features(const std::vector<FeatureMap<S>>& features,
                                               const std::vector<int>& question_ids) const {
    auto fused = fuse_tokens(features, question_ids, nullptr);
    auto next = [&](const std::vector<int>& prefix) {
      auto logits = lm_->decode_logits(fused.memory, prefix, fused.memory_pad_cols);
      const int vocab = logits->extent(1);
      const S* last = logits->data.data() + static_cast<int64_t>(prefix.size() - 1) * vocab;
      return std::vector<S>(last, last + vocab);
    };
    return greedy_loop<S>(next, Vocabulary::kBos, Vocabulary::kEos, cfg_.lm.max_answer_len);
  }

  std::vector<int> greedy_answer(const std::vector<TensorPtr<S>>& views,
                                 const std::vector<int>& question_ids) const {
    return greedy_answer_from_features(encoder_->encode_views(views), question_ids);
  }

  ParamList<S> params() const {
    ParamList<S> ps;
    encoder_->collect_params(ps, "encoder");
    moe_->collect_params(ps, "moe");
    adapter_->collect_params(ps, "adapter");
    lm_->collect_params(ps, "lm");
    return ps;
  }

  std::vector<NamedTensor> export_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : params().items) out.push_back(to_named(name, *t));
    return out;
  }

  void import_tensors(const std::vector<NamedTensor>& tensors) {
    auto ps = params();
    if (tensors.size() != ps.items.size())
      throw ValidationError("checkpoint: parameter count mismatch (config/checkpoint disagree)");
    for (const auto& nt : tensors) {
      auto t = ps.find(nt.name);
      if (!t) throw ValidationError("checkpoint: unknown parameter name: " + nt.name);
      if (t->shape != nt.shape)
        throw ValidationError("checkpoint: shape mismatch for " + nt.name + ": expected " +
                              shape_str(t->shape) + ", got " + shape_str(nt.shape));
      for (size_t i = 0; i < nt.data.size(); ++i) t->data[i] = static_cast<S>(nt.data[i]);
    }
  }

 private:
  struct FusedState {
    TensorPtr<S> memory;
    std::vector<int> memory_pad_cols;
  };

  /// T = embed(question); V = moe tokens; V_input = V + CrossAtt(V,T,T);
  /// memory = LM encoder over [V_input, T_input].
  FusedState fuse_tokens(const std::vector<FeatureMap<S>>& features,
                         const std::vector<int>& question_ids, Tape<S>* tape) const {
    if (question_ids.empty()) throw ValidationError("forward: empty question");
    auto t_input = lm_->embed_text(question_ids, tape);
    auto v = moe_->moe_pipeline(features, tape);

    // pad columns of T, unoffset for the adapter, offset past V for the LM
    std::vector<int> t_pads, mem_pads;
    for (size_t i = 0; i < question_ids.size(); ++i)
      if (question_ids[i] == Vocabulary::kPad) {
        t_pads.push_back(static_cast<int>(i));
        mem_pads.push_back(v->extent(0) + static_cast<int>(i));
      }
    TensorPtr<S> adapter_mask = nullptr;
    if (!t_pads.empty()) {
      adapter_mask = make_tensor<S>({v->extent(0), t_input->extent(0)});
      for (int i = 0; i < v->extent(0); ++i)
        for (int c : t_pads)
          adapter_mask->data[static_cast<int64_t>(i) * t_input->extent(0) + c] =
              static_cast<S>(kMaskOff);
    }
    auto v_input = adapter_->forward(v, t_input, adapter_mask, tape);
    auto memory = lm_->encode_multimodal(v_input, t_input, question_ids, tape);
    return {memory, mem_pads};
  }

  ModelConfig cfg_;
  std::unique_ptr<VisionEncoder<S>> encoder_;
  std::unique_ptr<FeMoE<S>> moe_;
  std::unique_ptr<DIAdapter<S>> adapter_;
  std::unique_ptr<TransformerLM<S>> lm_;
};

}  // namespace minidrive
