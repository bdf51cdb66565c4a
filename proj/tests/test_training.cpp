#include <gtest/gtest.h>

#include <filesystem>
#include <algorithm>
#include <fstream>

#include "oracles.hpp"
#include "qsmfine/training.hpp"

using namespace qsmfine;
namespace fs = std::filesystem;

TEST(Patches, OriginsClampLastPatch) {
  EXPECT_EQ(patch_origins(64, 32, 32), (std::vector<int>{0, 32}));
  EXPECT_EQ(patch_origins(70, 32, 32), (std::vector<int>{0, 32, 38}));
  EXPECT_EQ(patch_origins(32, 32, 16), (std::vector<int>{0}));
  EXPECT_EQ(patch_origins(40, 16, 12), (std::vector<int>{0, 12, 24}));
  EXPECT_THROW(patch_origins(16, 32, 8), ValidationError);
}

TEST(Patches, FullResolutionEnumeration) {
  EXPECT_EQ(patch_origins(320, 128, 90), (std::vector<int>{0, 90, 180, 192}));
  EXPECT_EQ(patch_origins(48, 32, 10), (std::vector<int>{0, 10, 16}));
  EXPECT_EQ(patch_origins(320, 128, 90).size() * patch_origins(320, 128, 90).size() *
                patch_origins(48, 32, 10).size(),
            48u);
}

TEST(Patches, DeskTilingAndCoverage) {
  const auto g = oracle::grid(64, 64, 16);
  const auto v = oracle::random_real(g, 4);
  EXPECT_EQ(extract_patches(v, v, {32, 32, 8}, {32, 32, 8}).size(), 8u);
  EXPECT_EQ(extract_patches(v, v, {64, 64, 16}, {64, 64, 16}).size(), 1u);
  // Every voxel is covered for an awkward stride.
  for (int n : {13, 16, 29}) {
    std::vector<int> covered(n, 0);
    for (int o : patch_origins(n, 8, 5))
      for (int k = 0; k < 8; ++k) covered[o + k] = 1;
    EXPECT_EQ(std::count(covered.begin(), covered.end(), 1), n);
  }
}

TEST(Patches, ContentMatchesSource) {
  const auto g = oracle::grid(16, 12, 8);
  const auto in = oracle::random_real(g, 1), label = oracle::random_real(g, 2);
  const auto patches = extract_patches(in, label, {8, 8, 4}, {8, 4, 4});
  EXPECT_EQ(patches.size(), 2u * 2 * 2);
  for (const auto& p : patches) {
    const auto [x0, y0, z0] = p.origin;
    EXPECT_LE(x0 + 8, 16);
    EXPECT_LE(y0 + 8, 12);
    EXPECT_EQ(p.input.data[0], in.at(x0, y0, z0));
    EXPECT_EQ(p.label.data[p.label.data.size() - 1], label.at(x0 + 7, y0 + 7, z0 + 3));
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.patch = {30, 32, 8};
  EXPECT_THROW(c.validate(4), ValidationError);
  c.patch = {32, 32, 8};
  c.stride = {0, 32, 8};
  EXPECT_THROW(c.validate(4), ValidationError);
  c.stride = {32, 32, 8};
  c.epochs = 0;
  EXPECT_THROW(c.validate(4), ValidationError);
}

namespace {

TrainData toy_data() {
  // HPFP-like input and a label that is a smooth function of it.
  const auto g = oracle::grid(8, 8, 4);
  TrainData d;
  for (int i = 0; i < 3; ++i) {
    auto in = oracle::random_real(g, 10 + i, -1, 1);
    RealVolume label(g);
    for (std::size_t k = 0; k < in.size(); ++k) label[k] = 0.3 * in[k];
    (i < 2 ? d.train : d.val).emplace_back(std::move(in), std::move(label));
  }
  return d;
}

}  // namespace

TEST(Pretrain, LossDecreasesAndBestIsReported) {
  const auto data = toy_data();
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.learning_rate = 1e-2;
  cfg.patch = {4, 4, 4};
  cfg.stride = {4, 4, 4};
  cfg.batch_size = 2;
  int callbacks = 0, improvements = 0;
  const auto res = pretrain(nn::ProgNet::create(nn::UnetConfig{2, {4, 4}, 2}, 2, 3), data, cfg,
                            [&](const EpochLog& log, const nn::ProgNet* best) {
                              ++callbacks;
                              improvements += best != nullptr;
                              EXPECT_EQ(log.train_stage.size(), 2u);
                            });
  EXPECT_EQ(callbacks, 8);
  EXPECT_GE(improvements, 1);
  ASSERT_EQ(res.log.size(), 8u);
  EXPECT_LT(res.log.back().train_total(), res.log.front().train_total());
  double best = 1e300;
  for (const auto& e : res.log) best = std::min(best, e.val_total());
  EXPECT_EQ(res.best_val_loss, best);

  // The stored best network reproduces its validation loss exactly, also
  // after a checkpoint round trip.
  auto net = res.best;
  EXPECT_EQ(validation_loss(net, data.val), res.best_val_loss);
  auto reloaded = nn::deserialize_checkpoint(nn::serialize_checkpoint(res.best));
  EXPECT_EQ(validation_loss(reloaded, data.val), res.best_val_loss);
}

TEST(Pretrain, IsDeterministic) {
  const auto data = toy_data();
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.patch = {4, 4, 4};
  cfg.stride = {4, 4, 4};
  const auto make = [] { return nn::ProgNet::create(nn::UnetConfig{2, {4, 4}, 2}, 1, 5); };
  const auto a = pretrain(make(), data, cfg), b = pretrain(make(), data, cfg);
  EXPECT_EQ(a.best_val_loss, b.best_val_loss);
  EXPECT_EQ(nn::serialize_checkpoint(a.best), nn::serialize_checkpoint(b.best));
}

TEST(Pretrain, LossCsvHasHeaderAndTotals) {
  std::vector<EpochLog> log{{1, {0.5, 0.25}, {0.6, 0.3}}};
  const fs::path p = fs::temp_directory_path() / "qsmfine_test_loss.csv";
  write_loss_csv(p, log, "abc");
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "epoch,stage,train_loss,val_loss,config_hash");
  std::getline(is, line);
  EXPECT_EQ(line, "1,1,0.5,0.59999999999999998,abc");
  std::getline(is, line);
  std::getline(is, line);
  EXPECT_EQ(line.rfind("1,total,0.75,", 0), 0u);
}
