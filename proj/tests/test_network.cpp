#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "qsmfine/network.hpp"

using namespace qsmfine;
using namespace qsmfine::nn;
namespace fs = std::filesystem;

namespace {

UnetConfig tiny() { return UnetConfig{2, {4, 8}, 2}; }

FeatureMap random_input(int c, int x, int y, int z, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-3, 3);
  FeatureMap f(c, x, y, z);
  for (double& v : f.data) v = u(rng);
  return f;
}

}  // namespace

TEST(UnetConfig, Validation) {
  EXPECT_THROW((UnetConfig{0, {}, 2}).validate(), ValidationError);
  EXPECT_THROW((UnetConfig{2, {4}, 2}).validate(), ValidationError);
  EXPECT_THROW((UnetConfig{2, {4, 0}, 2}).validate(), ValidationError);
  EXPECT_EQ((UnetConfig{3, {8, 16, 32}, 2}).divisor(), 4);
}

TEST(Unet, ParameterCountMatchesClosedForm) {
  for (const auto& cfg : {tiny(), UnetConfig{3, {8, 16, 32}, 2}, UnetConfig{1, {5}, 2}}) {
    const auto u = Unet::create(cfg, 1);
    EXPECT_EQ(u.trainable_count(), unet_parameter_count(cfg));
  }
  // Hand count for L=1, width 5, 2 inputs: two conv-BN layers and the head.
  EXPECT_EQ(unet_parameter_count(UnetConfig{1, {5}, 2}),
            (5u * 2 * 27 + 5 + 10) + (5u * 5 * 27 + 5 + 10) + (5 + 1));
}

TEST(Unet, OutputShapeAndDivisibility) {
  auto u = Unet::create(tiny(), 3);
  Tape t;
  const auto out = u.forward(t, t.constant(random_input(2, 8, 6, 4, 1)), BnMode::Train);
  const auto& o = t.value(out);
  EXPECT_EQ(o.channels, 1);
  EXPECT_EQ(o.nx, 8);
  EXPECT_EQ(o.ny, 6);
  EXPECT_EQ(o.nz, 4);
  Tape t2;
  EXPECT_THROW(u.forward(t2, t2.constant(random_input(2, 7, 6, 4, 1)), BnMode::Eval), ValidationError);
}

TEST(Unet, SeededInitIsDeterministic) {
  const auto a = Unet::create(tiny(), 5), b = Unet::create(tiny(), 5), c = Unet::create(tiny(), 6);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
    differs |= a.parameters()[i].value != c.parameters()[i].value;
  }
  EXPECT_TRUE(differs);
}

TEST(ProgNet, StagesSeePreviousOutput) {
  auto net = ProgNet::create(tiny(), 3, 11);
  EXPECT_EQ(net.stages(), 3);
  const auto hpfp = random_input(1, 8, 8, 4, 2);
  Tape t;
  const auto outs = net.forward(t, hpfp, BnMode::Eval);
  ASSERT_EQ(outs.size(), 3u);
  // Stage 2 run by hand on (QSM_1, HPFP) reproduces the network output.
  Tape t2;
  const auto in = t2.constant(stack_channels(t.value(outs[0]), hpfp));
  const auto o2 = net.stage(1).forward(t2, in, BnMode::Eval);
  EXPECT_EQ(t2.value(o2).data, t.value(outs[1]).data);
  // Stage 1 sees a zero estimate.
  Tape t3;
  const auto o1 = net.stage(0).forward(t3, t3.constant(stack_channels(FeatureMap(1, 8, 8, 4), hpfp)), BnMode::Eval);
  EXPECT_EQ(t3.value(o1).data, t.value(outs[0]).data);
}

TEST(ProgNet, ParameterNamesAreUnique) {
  auto net = ProgNet::create(tiny(), 2, 1);
  std::set<std::string> names;
  for (auto* p : net.all_parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_EQ(net.trainable_count(), 2 * unet_parameter_count(tiny()));
}

TEST(Adam, ConvergesOnQuadratic) {
  Parameter p("x", {2});
  p.value = {3.0, -2.0};
  Adam adam({&p}, AdamConfig{0.05});
  for (int i = 0; i < 2000; ++i) {
    p.grad = {2 * (p.value[0] - 1.0), 2 * (p.value[1] + 0.5)};
    adam.step();
  }
  EXPECT_NEAR(p.value[0], 1.0, 1e-3);
  EXPECT_NEAR(p.value[1], -0.5, 1e-3);
  EXPECT_EQ(adam.steps(), 2000);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  Parameter p("x", {3});
  p.value = {0, 0, 0};
  p.grad = {4.0, -1e-3, 0.0};
  Adam adam({&p}, AdamConfig{0.01});
  adam.step();
  EXPECT_NEAR(p.value[0], -0.01, 1e-9);
  EXPECT_NEAR(p.value[1], 0.01, 1e-7);
  EXPECT_EQ(p.value[2], 0.0);
}

TEST(Adam, NonFiniteGradientLeavesParametersUntouched) {
  Parameter p("x", {2});
  p.value = {1, 2};
  p.grad = {1, std::nan("")};
  Adam adam({&p}, AdamConfig{0.1});
  EXPECT_THROW(adam.step(), RuntimeFailure);
  EXPECT_EQ(p.value, (std::vector<double>{1, 2}));
}

TEST(Adam, SkipsFrozenParameters) {
  Parameter a("a", {1}), b("b", {1}, false);
  a.grad = {1};
  b.grad = {1};
  Adam adam({&a, &b}, AdamConfig{0.1});
  adam.step();
  EXPECT_NE(a.value[0], 0.0);
  EXPECT_EQ(b.value[0], 0.0);
}

TEST(Checkpoint, RoundTripIsFloatExact) {
  auto net = ProgNet::create(tiny(), 2, 9);
  const auto bytes = serialize_checkpoint(net);
  auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.stages(), 2);
  EXPECT_EQ(back.seed(), net.seed());
  auto a = net.all_parameters(), b = back.all_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    for (std::size_t k = 0; k < a[i]->size(); ++k)
      EXPECT_EQ(b[i]->value[k], static_cast<double>(static_cast<float>(a[i]->value[k])));
  }
  // A second trip is bit-identical.
  EXPECT_EQ(serialize_checkpoint(back), bytes);

  const fs::path p = fs::temp_directory_path() / "qsmfine_test_ckpt.qnt";
  save_checkpoint(p, back);
  auto loaded = load_checkpoint(p);
  const auto hpfp = random_input(1, 8, 8, 4, 3);
  Tape t1, t2;
  const auto o1 = back.forward(t1, hpfp, BnMode::Eval);
  const auto o2 = loaded.forward(t2, hpfp, BnMode::Eval);
  EXPECT_EQ(t1.value(o1.back()).data, t2.value(o2.back()).data);
}

TEST(Checkpoint, RejectsCorruption) {
  auto bytes = serialize_checkpoint(ProgNet::create(tiny(), 1, 1));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), ValidationError);
  bad = bytes;
  bad.resize(bad.size() - 8);
  EXPECT_THROW(deserialize_checkpoint(bad), ValidationError);
  EXPECT_THROW(load_checkpoint("/nonexistent/qsmfine.qnt"), RuntimeFailure);
}

TEST(Conversion, VolumeFeatureMapRoundTrip) {
  const auto v = oracle::random_real(oracle::grid(6, 5, 4), 1);
  const auto f = to_feature_map(v);
  EXPECT_EQ(f.channels, 1);
  EXPECT_EQ(to_volume(f, v.grid()).storage(), v.storage());
}
