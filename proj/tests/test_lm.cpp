#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "minidrive/gradcheck.hpp"
#include "minidrive/model.hpp"
#include "oracles.hpp"

using namespace minidrive;

namespace {

Vocabulary toy_vocab() {
  return Vocabulary::build({"turn left now .", "turn right now .", "stop for the pedestrian .",
                            "keep lane and maintain speed ."});
}

LMConfig tiny_lm(int vocab) {
  LMConfig cfg;
  cfg.dim = 16;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.heads = 2;
  cfg.ffn_dim = 24;
  cfg.max_text_len = 12;
  cfg.max_answer_len = 8;
  cfg.vocab_size = vocab;
  return cfg;
}

}  // namespace

TEST_CASE("tokenize keeps punctuation, lowercases, maps OOV to unk") {
  auto toks = tokenize_words("Turn left.");
  REQUIRE(toks.size() == 3);
  CHECK(toks[0] == "turn");
  CHECK(toks[1] == "left");
  CHECK(toks[2] == ".");

  auto v = toy_vocab();
  auto ids = v.encode("Turn left.", 32);
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == v.id_of("turn"));
  CHECK(ids[1] == v.id_of("left"));
  CHECK(ids[2] == v.id_of("."));
  CHECK(v.encode("zebra", 32)[0] == Vocabulary::kUnk);

  // truncation
  CHECK(v.encode("turn turn turn turn turn", 3).size() == 3);
}

TEST_CASE("round trip: detokenize(tokenize(s)) == normalized s for in-vocab text") {
  for (const std::string s :
       {"turn left now.", "stop for the pedestrian.", "keep lane and maintain speed."}) {
    auto v = toy_vocab();
    auto ids = v.encode(s, 32);
    CHECK(v.decode(ids) == s);
  }
}

TEST_CASE("vocabulary is deterministic: frequency then lexicographic order") {
  auto v = Vocabulary::build({"b b b", "a a", "c c", "d"});
  CHECK(v.id_to_token[0] == "<pad>");
  CHECK(v.id_to_token[1] == "<bos>");
  CHECK(v.id_to_token[2] == "<eos>");
  CHECK(v.id_to_token[3] == "<unk>");
  CHECK(v.id_to_token[4] == "b");   // freq 3
  CHECK(v.id_to_token[5] == "a");   // freq 2, ties broken lexicographically
  CHECK(v.id_to_token[6] == "c");
  CHECK(v.id_to_token[7] == "d");
  auto v2 = Vocabulary::build({"b b b", "a a", "c c", "d"});
  CHECK(v == v2);
}

TEST_CASE("embed_text shape and determinism") {
  std::mt19937_64 rng(1);
  TransformerLM<double> lm(tiny_lm(20), rng);
  std::vector<int> ids{5, 9, 4, 2};
  auto t1 = lm.embed_text(ids);
  CHECK(t1->shape == Shape{4, 16});
  auto t2 = lm.embed_text(ids);
  CHECK(t1->data == t2->data);
  CHECK_THROWS_AS(lm.embed_text({25}), DimError);
  CHECK_THROWS_AS(lm.embed_text(std::vector<int>(13, 4)), DimError);
}

TEST_CASE("untrained loss sits near ln(vocab)") {
  std::mt19937_64 rng(2);
  TransformerLM<float> lm(tiny_lm(512), rng);
  std::mt19937_64 drng(3);
  auto v_input = random_tensor<float>({6, 16}, drng);
  std::vector<int> text{10, 64, 200, 7};
  std::vector<int> target{Vocabulary::kBos, 100, 350, 42, Vocabulary::kEos};
  auto out = lm.forward(v_input, text, target);
  CHECK(std::abs(out.loss->data[0] - std::log(512.0)) <= 0.5);
}

TEST_CASE("loss equals the direct formula on the same logits") {
  std::mt19937_64 rng(4);
  TransformerLM<double> lm(tiny_lm(24), rng);
  std::mt19937_64 drng(5);
  auto v_input = random_tensor<double>({3, 16}, drng);
  std::vector<int> text{4, 5, 6};
  std::vector<int> target{Vocabulary::kBos, 7, 9, 11, Vocabulary::kEos};
  auto out = lm.forward(v_input, text, target);
  std::vector<int> labels(target.begin() + 1, target.end());
  const double ref = oracle::cross_entropy(out.logits->data, out.logits->extent(0),
                                           out.logits->extent(1), labels, Vocabulary::kPad);
  CHECK(std::abs(out.loss->data[0] - ref) <= 1e-6);
}

TEST_CASE("decoder causality: future-target perturbation cannot reach earlier logits") {
  std::mt19937_64 rng(6);
  TransformerLM<double> lm(tiny_lm(24), rng);
  std::mt19937_64 drng(7);
  auto v_input = random_tensor<double>({3, 16}, drng);
  std::vector<int> text{4, 5};
  std::vector<int> target{Vocabulary::kBos, 7, 9, 11, 13, Vocabulary::kEos};
  auto base = lm.forward(v_input, text, target);

  for (size_t t = 1; t + 1 < target.size(); ++t) {
    auto perturbed = target;
    perturbed[t] = perturbed[t] == 7 ? 8 : 7;
    auto out = lm.forward(v_input, text, perturbed);
    const int vocab = out.logits->extent(1);
    // decoder input position t holds target[t]; logits rows < t are
    // produced from inputs 0..t-1 only
    for (size_t row = 0; row < t; ++row)
      for (int j = 0; j < vocab; ++j)
        CHECK(out.logits->data[row * vocab + j] == base.logits->data[row * vocab + j]);
  }
}

TEST_CASE("logits are bit-invariant to pad-position content") {
  std::mt19937_64 rng(8);
  TransformerLM<double> lm(tiny_lm(24), rng);
  std::mt19937_64 drng(9);
  auto v_input = random_tensor<double>({3, 16}, drng);
  std::vector<int> text{4, 5, Vocabulary::kPad, Vocabulary::kPad};
  std::vector<int> target{Vocabulary::kBos, 7, 9, Vocabulary::kEos};
  auto base = lm.forward(v_input, text, target);

  // rewriting the pad embedding row changes T_input only at pad positions
  auto tok = lm.token_embedding();
  for (int j = 0; j < 16; ++j) tok->data[j] = 1e3 + j;
  auto out = lm.forward(v_input, text, target);
  CHECK(out.logits->data == base.logits->data);
}

TEST_CASE("greedy loop: forced ranking, cutoff, tie-break, determinism") {
  // stub logits: token 7 first, then eos forever
  auto stub = [](const std::vector<int>& prefix) {
    std::vector<float> l(10, 0.0f);
    if (prefix.size() == 1)
      l[7] = 5.0f;
    else
      l[Vocabulary::kEos] = 5.0f;
    return l;
  };
  auto out = greedy_loop<float>(stub, Vocabulary::kBos, Vocabulary::kEos, 8);
  REQUIRE(out.size() == 1);
  CHECK(out[0] == 7);

  auto never_eos = [](const std::vector<int>&) { return std::vector<float>{0, 0, 0, 0, 1}; };
  CHECK(greedy_loop<float>(never_eos, 1, 2, 1).size() == 1);

  // exact tie between ids 4 and 6 resolves to the lowest id
  auto tied = [](const std::vector<int>& prefix) {
    std::vector<float> l(8, 0.0f);
    if (prefix.size() == 1) {
      l[4] = 3.0f;
      l[6] = 3.0f;
    } else {
      l[Vocabulary::kEos] = 9.0f;
    }
    return l;
  };
  auto t1 = greedy_loop<float>(tied, Vocabulary::kBos, Vocabulary::kEos, 4);
  REQUIRE(t1.size() == 1);
  CHECK(t1[0] == 4);

  std::mt19937_64 rng(10);
  TransformerLM<float> lm(tiny_lm(24), rng);
  std::mt19937_64 drng(11);
  auto v_input = random_tensor<float>({3, 16}, drng);
  auto a = lm.greedy_decode(v_input, {4, 5, 6}, 8);
  auto b = lm.greedy_decode(v_input, {4, 5, 6}, 8);
  CHECK(a == b);
  CHECK(a.size() <= 8);
}

TEST_CASE("target validation") {
  std::mt19937_64 rng(12);
  TransformerLM<double> lm(tiny_lm(24), rng);
  auto v_input = make_tensor<double>({2, 16});
  CHECK_THROWS_AS(lm.forward(v_input, {4}, {7, 9}), ValidationError);
  CHECK_THROWS_AS(lm.forward(v_input, {4}, {Vocabulary::kBos}), ValidationError);
}

TEST_CASE("composed pipeline gradcheck: FE-MoE -> adapter -> LM -> loss (64-bit)") {
  ModelConfig cfg;
  cfg.encoder.input_size = 8;
  cfg.encoder.stages = {{4, 1}};
  cfg.encoder.large_kernel = 3;
  cfg.moe.num_experts = 2;
  cfg.moe.expert_out_channels = 2;
  cfg.moe.gate_hidden = 2;
  cfg.moe.proj_dim = 16;
  cfg.adapter.dim = 16;
  cfg.lm = tiny_lm(14);
  cfg.seed = 99;
  MiniDriveModel<double> model(cfg);

  // non-degenerate adapter output projection
  std::mt19937_64 rng(13);
  model.adapter().weights().wo->data = init::kaiming_uniform<double>({16, 16}, 16, rng)->data;

  std::vector<FeatureMap<double>> feats;
  for (int i = 0; i < 6; ++i)
    feats.push_back({random_tensor<double>({4, 4, 4}, rng), kCameraOrder[i]});
  std::vector<int> question{4, 5, 6, 7};
  std::vector<int> target{Vocabulary::kBos, 8, 9, 10, Vocabulary::kEos};

  std::vector<TensorPtr<double>> inputs;
  ParamList<double> ps;
  model.moe().collect_params(ps, "moe");
  model.adapter().collect_params(ps, "adapter");
  model.lm().collect_params(ps, "lm");
  inputs = ps.tensors();
  for (auto& f : feats) inputs.push_back(f.values);

  auto fn = [&model, &feats, &question, &target](const std::vector<TensorPtr<double>>&,
                                                 Tape<double>* tape) {
    return model.forward_from_features(feats, question, target, tape).loss;
  };
  GradCheckOptions opt;
  opt.max_coords_per_tensor = 3;
  CHECK(finite_diff_gradcheck<double>({fn}, inputs, opt) <= 1e-4);
}
