#pragma once

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "minidrive/nn.hpp"
#include "minidrive/text.hpp"

namespace minidrive {

struct LMConfig {
  int dim = 128;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 4;
  int ffn_dim = 256;
  int max_text_len = 32;
  int max_answer_len = 24;
  int vocab_size = 0;  // corpus-derived

  void validate() const {
    if (dim < 1 || ffn_dim < 1) throw ValidationError("lm: dim/ffn_dim must be >= 1");
    if (heads < 1 || dim % heads != 0) throw ValidationError("lm: heads must divide dim");
    if (enc_layers < 1 || dec_layers < 1) throw ValidationError("lm: layer counts must be >= 1");
    if (max_text_len < 1 || max_answer_len < 1) throw ValidationError("lm: lengths must be >= 1");
    if (vocab_size < 4) throw ValidationError("lm: vocab_size must cover the reserved ids");
  }
};

/// Argmax decoding loop: feeds the growing prefix to `next_logits`,
/// appends the lowest-id argmax each step, stops at `eos` or after
/// `max_len` emitted tokens.
template <class S>
std::vector<int> greedy_loop(const std::function<std::vector<S>(const std::vector<int>&)>& next_logits,
                             int bos, int eos, int max_len) {
  std::vector<int> prefix{bos};
  std::vector<int> emitted;
  while (static_cast<int>(emitted.size()) < max_len) {
    const std::vector<S> logits = next_logits(prefix);
    int best = 0;
    for (int j = 1; j < static_cast<int>(logits.size()); ++j)
      if (logits[j] > logits[best]) best = j;  // ties keep the lowest id
    if (best == eos) break;
    emitted.push_back(best);
    prefix.push_back(best);
  }
  return emitted;
}

/// Minimal pre-layer-norm encoder-decoder transformer with learned
/// absolute positions for text and decoder tokens. Visual tokens carry no
/// positional embedding; their order is conveyed by camera/channel
/// structure.
template <class S>
class TransformerLM {
 public:
  TransformerLM(LMConfig cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.dim;
    tok_embed_ = init::uniform<S>({cfg_.vocab_size, d}, 0.05, rng);
    pos_text_ = init::uniform<S>({cfg_.max_text_len, d}, 0.05, rng);
    pos_dec_ = init::uniform<S>({cfg_.max_answer_len + 1, d}, 0.05, rng);
    for (int l = 0; l < cfg_.enc_layers; ++l) enc_.push_back(make_enc_layer(rng));
    for (int l = 0; l < cfg_.dec_layers; ++l) dec_.push_back(make_dec_layer(rng));
    enc_ln_f_ = make_ln();
    dec_ln_f_ = make_ln();
    out_w_ = init::uniform<S>({d, cfg_.vocab_size}, 0.02, rng);
    out_b_ = init::zeros<S>({cfg_.vocab_size});
    ParamList<S> ps;
    collect_params(ps, "lm");
    for (auto& [_, t] : ps.items) t->requires_grad = true;
  }

  const LMConfig& config() const { return cfg_; }

  /// Token embedding + learned positional embedding.
  TensorPtr<S> embed_text(const std::vector<int>& ids, Tape<S>* tape = nullptr) const {
    if (static_cast<int>(ids.size()) > cfg_.max_text_len)
      throw DimError("embed_text: sequence exceeds max_text_len");
    auto tok = ops::embedding(tok_embed_, ids, Vocabulary::kPad, tape);
    std::vector<int> pos(ids.size());
    std::iota(pos.begin(), pos.end(), 0);
    return ops::add(tok, ops::embedding(pos_text_, pos, -1, tape), tape);
  }

  /// Full self-attention encoder over [visual tokens, text tokens].
  /// `pad_cols` lists masked key columns (text pads).
  TensorPtr<S> encode(const TensorPtr<S>& input, const std::vector<int>& pad_cols,
                      Tape<S>* tape = nullptr) const {
    const int n = input->extent(0);
    auto mask = key_mask(n, n, pad_cols);
    auto x = input;
    for (const auto& layer : enc_) {
      auto h = ops::layer_norm(x, layer.ln1_g, layer.ln1_b, 1e-5, tape);
      x = ops::add(x, multi_head_attention(h, h, layer.attn, cfg_.heads, mask, tape), tape);
      h = ops::layer_norm(x, layer.ln2_g, layer.ln2_b, 1e-5, tape);
      x = ops::add(x, ffn(layer, h, tape), tape);
    }
    return ops::layer_norm(x, enc_ln_f_.g, enc_ln_f_.b, 1e-5, tape);
  }

  /// Causally masked decoder with cross-attention into the encoder
  /// memory; returns next-token logits per step.
  TensorPtr<S> decode_logits(const TensorPtr<S>& memory, const std::vector<int>& dec_ids,
                             const std::vector<int>& memory_pad_cols,
                             Tape<S>* tape = nullptr) const {
    const int steps = static_cast<int>(dec_ids.size());
    if (steps < 1) throw ValidationError("decode: empty target");
    if (steps > cfg_.max_answer_len + 1) throw DimError("decode: target exceeds max_answer_len");
    auto tok = ops::embedding(tok_embed_, dec_ids, Vocabulary::kPad, tape);
    std::vector<int> pos(dec_ids.size());
    std::iota(pos.begin(), pos.end(), 0);
    auto x = ops::add(tok, ops::embedding(pos_dec_, pos, -1, tape), tape);

    auto causal = causal_mask(steps);
    auto cross = key_mask(steps, memory->extent(0), memory_pad_cols);
    for (const auto& layer : dec_) {
      auto h = ops::layer_norm(x, layer.ln1_g, layer.ln1_b, 1e-5, tape);
      x = ops::add(x, multi_head_attention(h, h, layer.self_attn, cfg_.heads, causal, tape), tape);
      h = ops::layer_norm(x, layer.ln2_g, layer.ln2_b, 1e-5, tape);
      x = ops::add(x, multi_head_attention(h, memory, layer.cross_attn, cfg_.heads, cross, tape),
                   tape);
      h = ops::layer_norm(x, layer.ln3_g, layer.ln3_b, 1e-5, tape);
      x = ops::add(x, ffn(layer, h, tape), tape);
    }
    x = ops::layer_norm(x, dec_ln_f_.g, dec_ln_f_.b, 1e-5, tape);
    return ops::bias_add_rows(ops::matmul(x, out_w_, tape), out_b_, tape);
  }

  struct ForwardResult {
    TensorPtr<S> logits;  // [steps-1, vocab]
    TensorPtr<S> loss;    // scalar
  };

  /// Teacher-forced step: the encoder consumes [V_input, T_input]
  /// (visual tokens first), the decoder consumes target[:-1] and is
  /// scored against target[1:]. `target_ids` must begin with bos and end
  /// with eos.
  ForwardResult forward(const TensorPtr<S>& v_input, const std::vector<int>& text_ids,
                        const std::vector<int>& target_ids, Tape<S>* tape = nullptr) const {
    if (target_ids.size() < 2 || target_ids.front() != Vocabulary::kBos ||
        target_ids.back() != Vocabulary::kEos)
      throw ValidationError("lm_forward: target must be [bos, ..., eos]");
    auto t_input = embed_text(text_ids, tape);
    auto memory = encode_multimodal(v_input, t_input, text_ids, tape);
    std::vector<int> dec_in(target_ids.begin(), target_ids.end() - 1);
    std::vector<int> labels(target_ids.begin() + 1, target_ids.end());
    auto logits = decode_logits(memory, dec_in, text_pad_cols(v_input->extent(0), text_ids), tape);
    auto loss = ops::cross_entropy(logits, labels, Vocabulary::kPad, tape);
    return {logits, loss};
  }

  /// Encoder pass over the concatenated multimodal sequence.
  TensorPtr<S> encode_multimodal(const TensorPtr<S>& v_input, const TensorPtr<S>& t_input,
                                 const std::vector<int>& text_ids, Tape<S>* tape = nullptr) const {
    auto enc_in = ops::concat<S>({v_input, t_input}, 0, tape);
    return encode(enc_in, text_pad_cols(v_input->extent(0), text_ids), tape);
  }

  std::vector<int> greedy_decode(const TensorPtr<S>& v_input, const std::vector<int>& text_ids,
                                 int max_len) const {
    auto t_input = embed_text(text_ids);
    auto memory = encode_multimodal(v_input, t_input, text_ids);
    const auto pad_cols = text_pad_cols(v_input->extent(0), text_ids);
    auto next = [&](const std::vector<int>& prefix) {
      auto logits = decode_logits(memory, prefix, pad_cols);
      const int vocab = logits->extent(1);
      const S* last = logits->data.data() + static_cast<int64_t>(prefix.size() - 1) * vocab;
      return std::vector<S>(last, last + vocab);
    };
    return greedy_loop<S>(next, Vocabulary::kBos, Vocabulary::kEos, max_len);
  }

  void collect_params(ParamList<S>& out, const std::string& prefix) const {
    out.add(prefix + ".embed.token", tok_embed_);
    out.add(prefix + ".embed.pos_text", pos_text_);
    out.add(prefix + ".embed.pos_dec", pos_dec_);
    for (size_t l = 0; l < enc_.size(); ++l) {
      const std::string lp = prefix + ".enc." + std::to_string(l);
      collect_attn(out, lp + ".attn", enc_[l].attn);
      out.add(lp + ".ln1.gamma", enc_[l].ln1_g);
      out.add(lp + ".ln1.beta", enc_[l].ln1_b);
      out.add(lp + ".ln2.gamma", enc_[l].ln2_g);
      out.add(lp + ".ln2.beta", enc_[l].ln2_b);
      collect_ffn(out, lp + ".ffn", enc_[l]);
    }
    for (size_t l = 0; l < dec_.size(); ++l) {
      const std::string lp = prefix + ".dec." + std::to_string(l);
      collect_attn(out, lp + ".self", dec_[l].self_attn);
      collect_attn(out, lp + ".cross", dec_[l].cross_attn);
      out.add(lp + ".ln1.gamma", dec_[l].ln1_g);
      out.add(lp + ".ln1.beta", dec_[l].ln1_b);
      out.add(lp + ".ln2.gamma", dec_[l].ln2_g);
      out.add(lp + ".ln2.beta", dec_[l].ln2_b);
      out.add(lp + ".ln3.gamma", dec_[l].ln3_g);
      out.add(lp + ".ln3.beta", dec_[l].ln3_b);
      collect_ffn(out, lp + ".ffn", dec_[l]);
    }
    out.add(prefix + ".enc.ln_f.gamma", enc_ln_f_.g);
    out.add(prefix + ".enc.ln_f.beta", enc_ln_f_.b);
    out.add(prefix + ".dec.ln_f.gamma", dec_ln_f_.g);
    out.add(prefix + ".dec.ln_f.beta", dec_ln_f_.b);
    out.add(prefix + ".out.weight", out_w_);
    out.add(prefix + ".out.bias", out_b_);
  }

  TensorPtr<S> token_embedding() { return tok_embed_; }

 private:
  struct LayerCommon {
    TensorPtr<S> ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    TensorPtr<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  struct EncLayer : LayerCommon {
    AttnWeights<S> attn;
  };
  struct DecLayer : LayerCommon {
    AttnWeights<S> self_attn, cross_attn;
  };
  struct Ln {
    TensorPtr<S> g, b;
  };

  Ln make_ln() { return {init::ones<S>({cfg_.dim}), init::zeros<S>({cfg_.dim})}; }

  AttnWeights<S> make_attn(std::mt19937_64& rng) {
    const int d = cfg_.dim;
    AttnWeights<S> w;
    w.wq = init::kaiming_uniform<S>({d, d}, d, rng);
    w.wk = init::kaiming_uniform<S>({d, d}, d, rng);
    w.wv = init::kaiming_uniform<S>({d, d}, d, rng);
    w.wo = init::kaiming_uniform<S>({d, d}, d, rng);
    w.bq = init::zeros<S>({d});
    w.bk = init::zeros<S>({d});
    w.bv = init::zeros<S>({d});
    w.bo = init::zeros<S>({d});
    return w;
  }

  void fill_common(LayerCommon& l, std::mt19937_64& rng) {
    l.ln1_g = init::ones<S>({cfg_.dim});
    l.ln1_b = init::zeros<S>({cfg_.dim});
    l.ln2_g = init::ones<S>({cfg_.dim});
    l.ln2_b = init::zeros<S>({cfg_.dim});
    l.ln3_g = init::ones<S>({cfg_.dim});
    l.ln3_b = init::zeros<S>({cfg_.dim});
    l.ffn_w1 = init::kaiming_uniform<S>({cfg_.dim, cfg_.ffn_dim}, cfg_.dim, rng);
    l.ffn_b1 = init::zeros<S>({cfg_.ffn_dim});
    l.ffn_w2 = init::kaiming_uniform<S>({cfg_.ffn_dim, cfg_.dim}, cfg_.ffn_dim, rng);
    l.ffn_b2 = init::zeros<S>({cfg_.dim});
  }

  EncLayer make_enc_layer(std::mt19937_64& rng) {
    EncLayer l;
    l.attn = make_attn(rng);
    fill_common(l, rng);
    return l;
  }

  DecLayer make_dec_layer(std::mt19937_64& rng) {
    DecLayer l;
    l.self_attn = make_attn(rng);
    l.cross_attn = make_attn(rng);
    fill_common(l, rng);
    return l;
  }

  TensorPtr<S> ffn(const LayerCommon& l, const TensorPtr<S>& x, Tape<S>* tape) const {
    auto h = ops::bias_add_rows(ops::matmul(x, l.ffn_w1, tape), l.ffn_b1, tape);
    h = ops::relu(h, tape);
    return ops::bias_add_rows(ops::matmul(h, l.ffn_w2, tape), l.ffn_b2, tape);
  }

  void collect_attn(ParamList<S>& out, const std::string& p, const AttnWeights<S>& w) const {
    out.add(p + ".wq", w.wq);
    out.add(p + ".wk", w.wk);
    out.add(p + ".wv", w.wv);
    out.add(p + ".wo", w.wo);
    out.add(p + ".bq", w.bq);
    out.add(p + ".bk", w.bk);
    out.add(p + ".bv", w.bv);
    out.add(p + ".bo", w.bo);
  }

  void collect_ffn(ParamList<S>& out, const std::string& p, const LayerCommon& l) const {
    out.add(p + ".w1", l.ffn_w1);
    out.add(p + ".b1", l.ffn_b1);
    out.add(p + ".w2", l.ffn_w2);
    out.add(p + ".b2", l.ffn_b2);
  }

  /// Key columns holding text pads, offset past the visual block.
  static std::vector<int> text_pad_cols(int lv, const std::vector<int>& text_ids) {
    std::vector<int> cols;
    for (size_t i = 0; i < text_ids.size(); ++i)
      if (text_ids[i] == Vocabulary::kPad) cols.push_back(lv + static_cast<int>(i));
    return cols;
  }

  /// Additive [lq,lk] mask with kMaskOff at the given key columns, or
  /// null when nothing is masked.
  static TensorPtr<S> key_mask(int lq, int lk, const std::vector<int>& pad_cols) {
    if (pad_cols.empty()) return nullptr;
    auto m = make_tensor<S>({lq, lk});
    for (int i = 0; i < lq; ++i)
      for (int c : pad_cols) m->data[static_cast<int64_t>(i) * lk + c] = static_cast<S>(kMaskOff);
    return m;
  }

  static TensorPtr<S> causal_mask(int steps) {
    auto m = make_tensor<S>({steps, steps});
    for (int i = 0; i < steps; ++i)
      for (int j = i + 1; j < steps; ++j)
        m->data[static_cast<int64_t>(i) * steps + j] = static_cast<S>(kMaskOff);
    return m;
  }

  LMConfig cfg_;
  TensorPtr<S> tok_embed_, pos_text_, pos_dec_;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  Ln enc_ln_f_, dec_ln_f_;
  TensorPtr<S> out_w_, out_b_;
};

}  // namespace minidrive
