#pragma once

#include <array>
#include <string>
#include <vector>

#include "minidrive/nn.hpp"

namespace minidrive {

inline const std::array<std::string, 6> kCameraOrder = {
    "CAM_FRONT", "CAM_FRONT_LEFT", "CAM_FRONT_RIGHT",
    "CAM_BACK",  "CAM_BACK_LEFT",  "CAM_BACK_RIGHT"};

struct EncoderConfig {
  int input_size = 64;
  std::vector<std::pair<int, int>> stages = {{16, 1}, {32, 1}, {64, 2}};  // (channels, blocks)
  int large_kernel = 7;
  bool frozen = true;
  bool single_view = false;

  void validate() const {
    if (stages.empty()) throw ValidationError("encoder: at least one stage required");
    if (large_kernel < 1 || large_kernel % 2 == 0)
      throw ValidationError("encoder: large_kernel must be odd");
    int div = 1;
    int prev_c = 0;
    for (const auto& [c, blocks] : stages) {
      if (c < 1 || blocks < 1) throw ValidationError("encoder: stage channels/blocks must be >= 1");
      if (c < prev_c) throw ValidationError("encoder: channels must be nondecreasing");
      prev_c = c;
      div *= 2;
    }
    if (input_size <= 0 || input_size % div != 0)
      throw ValidationError("encoder: input_size must be divisible by 2^stages");
  }

  int out_channels() const { return stages.back().first; }
  int out_spatial() const { return input_size >> static_cast<int>(stages.size()); }
};

/// Per-view encoder output F1 with its camera label.
template <class S>
struct FeatureMap {
  TensorPtr<S> values;  // [c,h,w]
  std::string view_name;
};

/// Large-kernel residual block: depthwise k*k (same padding), pointwise
/// 1x1, ReLU, residual add. With zero kernels and biases the block is the
/// identity.
template <class S>
struct LkBlock {
  TensorPtr<S> dw_w, dw_b;  // [c,k,k], [c]
  TensorPtr<S> pw_w, pw_b;  // [c,c,1,1], [c]
  int kernel = 7;

  LkBlock() = default;
  LkBlock(int channels, int k, std::mt19937_64& rng) : kernel(k) {
    dw_w = init::kaiming_uniform<S>({channels, k, k}, k * k, rng);
    dw_b = init::zeros<S>({channels});
    pw_w = init::kaiming_uniform<S>({channels, channels, 1, 1}, channels, rng);
    pw_b = init::zeros<S>({channels});
  }

  TensorPtr<S> forward(const TensorPtr<S>& x, Tape<S>* tape) const {
    auto y = ops::depthwise_conv2d(x, dw_w, (kernel - 1) / 2, tape);
    y = ops::bias_add_channels(y, dw_b, tape);
    y = ops::conv2d(y, pw_w, 1, 0, tape);
    y = ops::bias_add_channels(y, pw_b, tape);
    y = ops::relu(y, tape);
    return ops::add(x, y, tape);
  }

  void collect(ParamList<S>& out, const std::string& prefix) const {
    out.add(prefix + ".dw.weight", dw_w);
    out.add(prefix + ".dw.bias", dw_b);
    out.add(prefix + ".pw.weight", pw_w);
    out.add(prefix + ".pw.bias", pw_b);
  }
};

/// Miniature large-kernel backbone: each stage halves the spatial extent
/// with a strided 3x3 conv, then applies its LkBlocks. The final stage's
/// output is the feature map F1 handed to the token mixer.
template <class S>
class VisionEncoder {
 public:
  explicit VisionEncoder(EncoderConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int in_c = 3;
    for (const auto& [c, blocks] : cfg_.stages) {
      Stage st;
      st.down_w = init::kaiming_uniform<S>({c, in_c, 3, 3}, in_c * 9, rng);
      st.down_b = init::zeros<S>({c});
      for (int b = 0; b < blocks; ++b) st.blocks.emplace_back(c, cfg_.large_kernel, rng);
      stages_.push_back(std::move(st));
      in_c = c;
    }
    set_frozen(cfg_.frozen);
  }

  const EncoderConfig& config() const { return cfg_; }

  void set_frozen(bool frozen) {
    cfg_.frozen = frozen;
    ParamList<S> ps;
    collect_params(ps, "encoder");
    for (auto& [_, t] : ps.items) t->requires_grad = !frozen;
  }

  TensorPtr<S> encode_view(const TensorPtr<S>& image, Tape<S>* tape = nullptr) const {
    if (image->shape != Shape{3, cfg_.input_size, cfg_.input_size})
      throw DimError("encode_view: expected image [3," + std::to_string(cfg_.input_size) + "," +
                     std::to_string(cfg_.input_size) + "], got " + shape_str(image->shape));
    auto x = image;
    for (const auto& st : stages_) {
      x = ops::conv2d(x, st.down_w, 2, 1, tape);
      x = ops::bias_add_channels(x, st.down_b, tape);
      x = ops::relu(x, tape);
      for (const auto& blk : st.blocks) x = blk.forward(x, tape);
    }
    return x;
  }

  /// Canonical order: CAM_FRONT, CAM_FRONT_LEFT, CAM_FRONT_RIGHT,
  /// CAM_BACK, CAM_BACK_LEFT, CAM_BACK_RIGHT. Single-view input is
  /// accepted only when the config allows it.
  std::vector<FeatureMap<S>> encode_views(const std::vector<TensorPtr<S>>& views,
                                          Tape<S>* tape = nullptr) const {
    if (views.size() != kCameraOrder.size() && !(cfg_.single_view && views.size() == 1))
      throw ValidationError("encode_views: expected " + std::to_string(kCameraOrder.size()) +
                            " views (or 1 in single-view mode), got " +
                            std::to_string(views.size()));
    std::vector<FeatureMap<S>> out;
    out.reserve(views.size());
    for (size_t i = 0; i < views.size(); ++i)
      out.push_back({encode_view(views[i], tape), kCameraOrder[i]});
    return out;
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    for (size_t s = 0; s < stages_.size(); ++s) {
      const std::string sp = prefix + ".stage" + std::to_string(s);
      out.add(sp + ".down.weight", stages_[s].down_w);
      out.add(sp + ".down.bias", stages_[s].down_b);
      for (size_t b = 0; b < stages_[s].blocks.size(); ++b)
        stages_[s].blocks[b].collect(out, sp + ".block" + std::to_string(b));
    }
  }

 private:
  struct Stage {
    TensorPtr<S> down_w, down_b;
    std::vector<LkBlock<S>> blocks;
  };
  EncoderConfig cfg_;
  std::vector<Stage> stages_;
};

}  // namespace minidrive
