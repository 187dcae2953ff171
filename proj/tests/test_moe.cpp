#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "minidrive/gradcheck.hpp"
#include "minidrive/moe.hpp"

using namespace minidrive;

namespace {

MoEConfig tiny_cfg() {
  MoEConfig cfg;
  cfg.num_experts = 3;
  cfg.expert_out_channels = 2;
  cfg.gate_hidden = 2;
  cfg.proj_dim = 8;
  return cfg;
}

FeMoE<double> tiny_moe(uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  return FeMoE<double>(tiny_cfg(), 6, 4, 4, rng);
}

}  // namespace

TEST_CASE("config validation") {
  MoEConfig cfg = tiny_cfg();
  cfg.expert_out_channels = 6;  // must be < in channels
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(FeMoE<double>(cfg, 6, 4, 4, rng), ValidationError);
  cfg = tiny_cfg();
  cfg.num_experts = 0;
  CHECK_THROWS_AS(FeMoE<double>(cfg, 6, 4, 4, rng), ValidationError);
}

TEST_CASE("gate: zero final linear gives uniform weights; always a probability vector") {
  std::mt19937_64 rng(2);
  MoEConfig cfg = tiny_cfg();
  cfg.num_experts = 4;
  FeMoE<double> moe(cfg, 6, 4, 4, rng);
  std::fill(moe.gate_fc_weight()->data.begin(), moe.gate_fc_weight()->data.end(), 0.0);
  std::fill(moe.gate_fc_bias()->data.begin(), moe.gate_fc_bias()->data.end(), 0.0);
  auto f1 = random_tensor<double>({6, 4, 4}, rng);
  auto w = moe.gate_weights(f1);
  REQUIRE(w->shape == Shape{4});
  for (double v : w->data) CHECK(v == doctest::Approx(0.25));

  auto moe2 = tiny_moe(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor<double>({6, 4, 4}, rng, -3.0, 3.0);
    auto weights = moe2.gate_weights(x);
    double s = 0.0;
    for (double v : weights->data) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("expert: shape law c' < c, spatial x2; zero input leaves only the conv bias") {
  std::mt19937_64 rng(4);
  MoEConfig dflt;  // 4 experts, c'=16, paper defaults
  FeMoE<double> moe(dflt, 64, 8, 8, rng);
  auto f1 = random_tensor<double>({64, 8, 8}, rng);
  auto f2 = moe.expert_forward(f1, 0);
  CHECK(f2->shape == Shape{16, 16, 16});

  auto moe2 = tiny_moe(5);
  auto& conv_b = moe2.expert_tensors(1)[3];
  conv_b->data = {0.5, -0.25};
  auto zero_in = make_tensor<double>({6, 4, 4});
  auto out = moe2.expert_forward(zero_in, 1);
  REQUIRE(out->shape == Shape{2, 8, 8});
  for (int i = 0; i < 64; ++i) {
    CHECK(out->data[i] == doctest::Approx(0.5));
    CHECK(out->data[64 + i] == doctest::Approx(-0.25));
  }
}

TEST_CASE("moe_combine equals the manual weighted sum of expert outputs") {
  auto moe = tiny_moe(6);
  std::mt19937_64 rng(7);
  auto f1 = random_tensor<double>({6, 4, 4}, rng);
  auto combined = moe.moe_combine(f1);
  auto w = moe.gate_weights(f1);
  std::vector<double> manual(combined->data.size(), 0.0);
  for (int i = 0; i < 3; ++i) {
    auto ei = moe.expert_forward(f1, i);
    for (size_t j = 0; j < manual.size(); ++j) manual[j] += w->data[i] * ei->data[j];
  }
  for (size_t j = 0; j < manual.size(); ++j)
    CHECK(combined->data[j] == doctest::Approx(manual[j]).epsilon(1e-9));
}

TEST_CASE("one-hot gate weights select a single expert to within 1e-6") {
  auto moe = tiny_moe(8);
  // bias the gate so softmax is numerically one-hot on expert 1
  moe.gate_fc_bias()->data = {0.0, 60.0, 0.0};
  std::fill(moe.gate_fc_weight()->data.begin(), moe.gate_fc_weight()->data.end(), 0.0);
  std::mt19937_64 rng(9);
  auto f1 = random_tensor<double>({6, 4, 4}, rng);
  auto w = moe.gate_weights(f1);
  CHECK(w->data[1] == doctest::Approx(1.0).epsilon(1e-9));
  auto combined = moe.moe_combine(f1);
  auto e1 = moe.expert_forward(f1, 1);
  for (size_t j = 0; j < e1->data.size(); ++j)
    CHECK(std::abs(combined->data[j] - e1->data[j]) <= 1e-6);
}

TEST_CASE("parameter-identical experts make the mixture weight-independent") {
  auto moe = tiny_moe(10);
  auto ref = moe.expert_tensors(0);
  for (int i = 1; i < 3; ++i) {
    auto dst = moe.expert_tensors(i);
    for (size_t k = 0; k < ref.size(); ++k) dst[k]->data = ref[k]->data;
  }
  std::mt19937_64 rng(11);
  auto f1 = random_tensor<double>({6, 4, 4}, rng);
  auto combined = moe.moe_combine(f1);
  auto e0 = moe.expert_forward(f1, 0);
  for (size_t j = 0; j < e0->data.size(); ++j)
    CHECK(std::abs(combined->data[j] - e0->data[j]) <= 1e-6);
}

TEST_CASE("combine is linear in the expert outputs") {
  // zero conv biases, then scaling every expert's conv weights by a
  // scales every expert output (and thus the mixture) by a
  auto moe = tiny_moe(12);
  std::mt19937_64 rng(13);
  auto f1 = random_tensor<double>({6, 4, 4}, rng);
  for (int i = 0; i < 3; ++i) {
    auto ts = moe.expert_tensors(i);
    std::fill(ts[3]->data.begin(), ts[3]->data.end(), 0.0);
  }
  auto base = moe.moe_combine(f1);
  const double alpha = 2.5;
  for (int i = 0; i < 3; ++i) {
    auto ts = moe.expert_tensors(i);
    for (auto& v : ts[2]->data) v *= alpha;
  }
  auto scaled = moe.moe_combine(f1);
  for (size_t j = 0; j < base->data.size(); ++j)
    CHECK(scaled->data[j] == doctest::Approx(alpha * base->data[j]).epsilon(1e-9));
}

TEST_CASE("flatten_project: one token per channel, identity projection case") {
  std::mt19937_64 rng(14);
  MoEConfig dflt;
  FeMoE<double> moe(dflt, 64, 8, 8, rng);
  CHECK(moe.tokens_per_image() == 16);
  CHECK(moe.token_width() == 256);  // dim1 = h' * w' = 16*16
  auto vmoe = random_tensor<double>({16, 16, 16}, rng);
  auto v = moe.flatten_project(vmoe);
  CHECK(v->shape == Shape{16, 128});

  // dim1 == dim: an identity projection reproduces the flattened channels
  MoEConfig idc = tiny_cfg();
  idc.proj_dim = 64;  // h'=w'=8 for 4x4 input with stride 2 kernel 2
  std::mt19937_64 rng2(15);
  FeMoE<double> moe_id(idc, 6, 4, 4, rng2);
  auto pw = moe_id.flatten_project(random_tensor<double>({2, 8, 8}, rng2));  // probe shape only
  REQUIRE(pw->shape == Shape{2, 64});
  ParamList<double> ps;
  moe_id.collect_params(ps, "moe");
  auto proj_w = ps.find("moe.proj.weight");
  auto proj_b = ps.find("moe.proj.bias");
  std::fill(proj_w->data.begin(), proj_w->data.end(), 0.0);
  for (int i = 0; i < 64; ++i) proj_w->data[static_cast<size_t>(i) * 64 + i] = 1.0;
  std::fill(proj_b->data.begin(), proj_b->data.end(), 0.0);
  auto vm = random_tensor<double>({2, 8, 8}, rng2);
  auto out = moe_id.flatten_project(vm);
  for (size_t i = 0; i < vm->data.size(); ++i) CHECK(out->data[i] == doctest::Approx(vm->data[i]));
}

TEST_CASE("moe_pipeline: canonical concatenation, view swaps move token blocks") {
  std::mt19937_64 rng(16);
  MoEConfig dflt;
  FeMoE<float> moe(dflt, 64, 8, 8, rng);
  std::vector<FeatureMap<float>> views;
  for (size_t i = 0; i < 6; ++i)
    views.push_back({random_tensor<float>({64, 8, 8}, rng), kCameraOrder[i]});
  auto v = moe.moe_pipeline(views);
  CHECK(v->shape == Shape{96, 128});

  auto single = moe.moe_pipeline({views[2]});
  CHECK(single->shape == Shape{16, 128});

  auto swapped = views;
  std::swap(swapped[0], swapped[3]);
  auto v2 = moe.moe_pipeline(swapped);
  const size_t block = 16 * 128;
  for (size_t i = 0; i < block; ++i) {
    CHECK(v2->data[i] == v->data[3 * block + i]);
    CHECK(v2->data[3 * block + i] == v->data[i]);
    CHECK(v2->data[1 * block + i] == v->data[1 * block + i]);
  }
}

TEST_CASE("shape law holds across the ablation grid") {
  std::mt19937_64 rng(17);
  for (int experts : {2, 4, 6}) {
    MoEConfig cfg;
    cfg.num_experts = experts;
    FeMoE<float> moe(cfg, 64, 8, 8, rng);
    auto f1 = random_tensor<float>({64, 8, 8}, rng);
    CHECK(moe.gate_weights(f1)->shape == Shape{experts});
    CHECK(moe.expert_forward(f1, 0)->shape == Shape{16, 16, 16});
  }
  for (int tokens : {8, 16, 32}) {
    MoEConfig cfg;
    cfg.expert_out_channels = tokens;
    FeMoE<float> moe(cfg, 64, 8, 8, rng);
    auto f1 = random_tensor<float>({64, 8, 8}, rng);
    auto out = moe.expert_forward(f1, 0);
    CHECK(out->shape == Shape{tokens, 16, 16});
    CHECK(tokens < 64);
    CHECK(moe.forward_view(f1)->extent(0) == tokens);
  }
}

TEST_CASE("gradcheck through gate, experts and projection") {
  std::mt19937_64 rng(18);
  MoEConfig cfg = tiny_cfg();
  FeMoE<double> moe(cfg, 6, 4, 4, rng);
  ParamList<double> ps;
  moe.collect_params(ps, "moe");
  auto f1 = random_tensor<double>({6, 4, 4}, rng);
  std::vector<TensorPtr<double>> inputs = ps.tensors();
  inputs.push_back(f1);
  auto obj = weighted_objective<double>(
      [&moe](const std::vector<TensorPtr<double>>& ins, Tape<double>* tape) {
        return moe.forward_view(ins.back(), tape);
      },
      moe.forward_view(f1)->shape, 321);
  GradCheckOptions opt;
  opt.max_coords_per_tensor = 6;
  CHECK(finite_diff_gradcheck<double>(obj, inputs, opt) <= 1e-4);
}
