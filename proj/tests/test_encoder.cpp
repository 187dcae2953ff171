#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "minidrive/encoder.hpp"
#include "minidrive/gradcheck.hpp"

using namespace minidrive;

namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig cfg;
  cfg.input_size = 16;
  cfg.stages = {{4, 1}, {8, 1}};
  cfg.large_kernel = 3;
  return cfg;
}

}  // namespace

TEST_CASE("config invariants") {
  EncoderConfig bad = tiny_cfg();
  bad.large_kernel = 4;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = tiny_cfg();
  bad.input_size = 10;  // not divisible by 2^2
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = tiny_cfg();
  bad.stages = {{8, 1}, {4, 1}};  // decreasing channels
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK(tiny_cfg().out_spatial() == 4);

  EncoderConfig dflt;
  dflt.validate();
  CHECK(dflt.out_channels() == 64);
  CHECK(dflt.out_spatial() == 8);
}

TEST_CASE("lk_block: zero kernels give the identity, same padding preserves shape") {
  std::mt19937_64 rng(1);
  LkBlock<double> blk(4, 7, rng);
  for (auto t : {blk.dw_w, blk.dw_b, blk.pw_w, blk.pw_b})
    std::fill(t->data.begin(), t->data.end(), 0.0);
  auto x = random_tensor<double>({4, 8, 8}, rng);
  auto y = blk.forward(x, nullptr);
  CHECK(y->shape == Shape{4, 8, 8});
  CHECK(y->data == x->data);
}

TEST_CASE("lk_block matches a manual composition of primitives") {
  std::mt19937_64 rng(2);
  LkBlock<double> blk(3, 5, rng);
  auto x = random_tensor<double>({3, 6, 6}, rng);
  auto y = blk.forward(x, nullptr);

  auto z = ops::depthwise_conv2d(x, blk.dw_w, 2);
  z = ops::bias_add_channels(z, blk.dw_b);
  z = ops::conv2d(z, blk.pw_w, 1, 0);
  z = ops::bias_add_channels(z, blk.pw_b);
  z = ops::relu(z);
  z = ops::add(x, z);
  REQUIRE(y->shape == z->shape);
  for (size_t i = 0; i < y->data.size(); ++i) CHECK(y->data[i] == doctest::Approx(z->data[i]));
}

TEST_CASE("encode_view: default config produces 64x8x8, deterministic") {
  std::mt19937_64 rng(3);
  VisionEncoder<float> enc(EncoderConfig{}, rng);
  std::mt19937_64 img_rng(4);
  auto img = random_tensor<float>({3, 64, 64}, img_rng, 0.0, 1.0);
  auto f1 = enc.encode_view(img);
  CHECK(f1->shape == Shape{64, 8, 8});

  auto img2 = make_tensor<float>(img->shape, img->data);
  auto f2 = enc.encode_view(img2);
  CHECK(f1->data == f2->data);

  auto wrong = make_tensor<float>({3, 32, 32});
  CHECK_THROWS_AS(enc.encode_view(wrong), DimError);
}

TEST_CASE("frozen encoder accumulates no parameter gradients") {
  std::mt19937_64 rng(5);
  VisionEncoder<double> enc(tiny_cfg(), rng);
  ParamList<double> ps;
  enc.collect_params(ps, "encoder");
  for (auto& [_, t] : ps.items) CHECK_FALSE(t->requires_grad);

  auto img = random_tensor<double>({3, 16, 16}, rng, 0.0, 1.0);
  img->requires_grad = true;  // saliency-style: pixels still differentiable
  Tape<double> tape;
  auto f1 = enc.encode_view(img, &tape);
  auto loss = ops::sum(f1, &tape);
  tape.backward(loss);
  for (auto& [_, t] : ps.items) CHECK(tape.find_grad(t.get()) == nullptr);
  CHECK(tape.find_grad(img.get()) != nullptr);
}

TEST_CASE("unfrozen encoder is differentiable (gradcheck through a stage)") {
  std::mt19937_64 rng(6);
  EncoderConfig cfg;
  cfg.input_size = 8;
  cfg.stages = {{4, 1}};
  cfg.large_kernel = 3;
  cfg.frozen = false;
  VisionEncoder<double> enc(cfg, rng);
  ParamList<double> ps;
  enc.collect_params(ps, "encoder");

  auto img = random_tensor<double>({3, 8, 8}, rng, 0.0, 1.0);
  std::vector<TensorPtr<double>> inputs = ps.tensors();
  inputs.push_back(img);
  auto obj = weighted_objective<double>(
      [&enc, img](const std::vector<TensorPtr<double>>& ins, Tape<double>* tape) {
        return enc.encode_view(ins.back(), tape);
      },
      enc.encode_view(img)->shape, 99);
  GradCheckOptions opt;
  opt.max_coords_per_tensor = 8;
  CHECK(finite_diff_gradcheck<double>(obj, inputs, opt) <= 1e-4);
}

TEST_CASE("encode_views: order preserving, per-view independent") {
  std::mt19937_64 rng(7);
  VisionEncoder<float> enc(tiny_cfg(), rng);
  std::vector<TensorPtr<float>> views;
  for (int i = 0; i < 6; ++i) views.push_back(random_tensor<float>({3, 16, 16}, rng, 0.0, 1.0));

  auto maps = enc.encode_views(views);
  REQUIRE(maps.size() == 6);
  CHECK(maps[0].view_name == "CAM_FRONT");
  CHECK(maps[5].view_name == "CAM_BACK_RIGHT");
  for (const auto& m : maps) CHECK(m.values->shape == Shape{8, 4, 4});

  // permuting the inputs permutes the outputs identically
  std::vector<TensorPtr<float>> swapped = views;
  std::swap(swapped[1], swapped[4]);
  auto maps2 = enc.encode_views(swapped);
  CHECK(maps2[1].values->data == maps[4].values->data);
  CHECK(maps2[4].values->data == maps[1].values->data);
  CHECK(maps2[0].values->data == maps[0].values->data);

  CHECK_THROWS_AS(enc.encode_views({views[0]}), ValidationError);

  EncoderConfig sv = tiny_cfg();
  sv.single_view = true;
  std::mt19937_64 rng2(7);
  VisionEncoder<float> enc_sv(sv, rng2);
  auto one = enc_sv.encode_views({views[0]});
  CHECK(one.size() == 1);
  CHECK(one[0].view_name == "CAM_FRONT");
}
