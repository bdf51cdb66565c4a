#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "qsmfine/harness.hpp"
#include "qsmfine/qvol.hpp"

using namespace qsmfine;
using namespace qsmfine::harness;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(
[dataset]
nx = 32
ny = 32
nz = 8
n_train = 2
n_val = 1
n_test = 2
seed = 99
fc = 1/2

[network]
levels = 2
widths = 4, 4
stages = 2

[training]
epochs = 2
patch = 16, 16, 8
stride = 16, 16, 8
batch_size = 2

[finetune]
max_iterations = 4
learning_rate = 1e-3

[sweep]
fc_list = 1/4, 1/2
matrices = 32x32, 40x40
)";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) ++n;
  return n;
}

}  // namespace

TEST(Config, DefaultsAndParsing) {
  const auto d = ExperimentConfig::parse("");
  EXPECT_EQ(d.dataset.grid.nx, 64);
  EXPECT_EQ(d.stages, 2);
  EXPECT_EQ(d.fc_list.size(), 5u);

  const auto c = ExperimentConfig::parse(kTinyConfig);
  EXPECT_EQ(c.dataset.grid.nx, 32);
  EXPECT_EQ(c.dataset.n_test, 2);
  EXPECT_DOUBLE_EQ(c.fc_list[0], 0.25);
  EXPECT_EQ(c.matrices[1], (std::array<int, 2>{40, 40}));
  EXPECT_EQ(c.network.widths, (std::vector<int>{4, 4}));
  EXPECT_EQ(c.training.patch, (std::array<int, 3>{16, 16, 8}));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(ExperimentConfig::parse("[dataset]\nnx_typo = 4\n"), ValidationError);
  EXPECT_THROW(ExperimentConfig::parse("[nonsense]\na = 1\n"), ValidationError);
  EXPECT_THROW(ExperimentConfig::parse("[dataset]\nnx = abc\n"), ValidationError);
  EXPECT_THROW(ExperimentConfig::parse("[sweep]\nfc_list = 0.5, 1.5\n"), ValidationError);
  EXPECT_THROW(ExperimentConfig::parse("[sweep]\nmatrices = 80\n"), ValidationError);
  EXPECT_THROW(ExperimentConfig::parse("[training]\npatch = 30, 32, 8\n"), ValidationError);
  EXPECT_THROW(ExperimentConfig::load("/nonexistent/config.ini"), ValidationError);
}

TEST(Config, HashTracksSettings) {
  const auto a = ExperimentConfig::parse(kTinyConfig);
  const auto b = ExperimentConfig::parse(kTinyConfig);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  auto c = a;
  c.finetune.learning_rate *= 2;
  EXPECT_NE(c.hash(), a.hash());
  auto d = a;
  d.override_seed(5);
  EXPECT_EQ(d.dataset.seed, 5u);
  EXPECT_NE(d.network_seed, a.network_seed);
  EXPECT_NE(d.hash(), a.hash());
  // The output directory is not part of the experiment identity.
  auto e = a;
  e.out_dir = "elsewhere";
  EXPECT_EQ(e.hash(), a.hash());
}

TEST(ParallelFor, CoversAllIndicesAndPropagatesErrors) {
  std::vector<int> hits(50, 0);
  parallel_for(50, 4, [&](int i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](int i) {
                 if (i == 7) throw RuntimeFailure("boom");
               }),
               RuntimeFailure);
}

TEST(Slices, PngIsWritten) {
  RealVolume v(VoxelGrid{8, 6, 4}, 0.3);
  const fs::path p = fs::temp_directory_path() / "qsmfine_slice.png";
  write_slice_png(p, v, 2);
  const std::string bytes = slurp(p);
  ASSERT_GT(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(1, 3), "PNG");
  EXPECT_THROW(write_slice_png(p, v, 4), ValidationError);
}

TEST(Pipeline, EndToEndOnTinyConfig) {
  auto cfg = ExperimentConfig::parse(kTinyConfig);
  cfg.out_dir = fs::temp_directory_path() / "qsmfine_pipeline";
  fs::remove_all(cfg.out_dir);
  const Layout layout{cfg.out_dir};

  EXPECT_THROW(cmd_train(cfg), RuntimeFailure);  // no dataset yet

  cmd_phantom(cfg);
  const std::string manifest = slurp(layout.manifest());
  cmd_phantom(cfg);
  EXPECT_EQ(slurp(layout.manifest()), manifest);

  const auto trained = cmd_train(cfg, RunOptions{2});
  EXPECT_EQ(trained.prognet.log.size(), 2u);
  EXPECT_TRUE(fs::exists(layout.checkpoint("prognet")));
  EXPECT_TRUE(fs::exists(layout.checkpoint("unet")));
  EXPECT_EQ(count_lines(layout.train() / "prognet_loss.csv"), 1 + 2 * 3);
  EXPECT_EQ(count_lines(layout.train() / "unet_loss.csv"), 1 + 2 * 2);

  // Reloading the checkpoint reproduces the best validation loss exactly.
  {
    const auto m = load_manifest(layout.manifest());
    const auto data = load_train_data(m);
    auto net = nn::load_checkpoint(layout.checkpoint("prognet"));
    EXPECT_EQ(validation_loss(net, data.val), trained.prognet.best_val_loss);
  }

  const auto rows = cmd_eval(cfg, RunOptions{2});
  ASSERT_EQ(rows.size(), 2u * 4);
  for (const auto& r : rows)
    if (r.method == "prognet-ft" || r.method == "unet-ft") {
      ASSERT_TRUE(r.loss_initial && r.loss_final);
      EXPECT_LE(*r.loss_final, *r.loss_initial);
    }
  EXPECT_EQ(count_lines(layout.eval() / "metrics.csv"), 1 + 8);
  EXPECT_TRUE(fs::exists(layout.eval() / "test_000" / "prognet-ft.png"));
  EXPECT_TRUE(fs::exists(layout.eval() / "test_000" / "prognet-ft_trace.csv"));

  // Same inputs in a serial run give identical rows.
  const std::string eval_csv = slurp(layout.eval() / "metrics.csv");
  cmd_eval(cfg, RunOptions{1});
  EXPECT_EQ(slurp(layout.eval() / "metrics.csv"), eval_csv);

  // Metrics recomputed from stored predictions agree with the evaluation.
  const auto recomputed = cmd_metrics(cfg);
  ASSERT_EQ(recomputed.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(recomputed[i].report.rmse, rows[i].report.rmse);
    EXPECT_EQ(recomputed[i].report.hfen, rows[i].report.hfen);
  }

  const auto fc_summary = cmd_sweep_fc(cfg);
  EXPECT_EQ(fc_summary.size(), 2u * 4);
  for (const auto& s : fc_summary) {
    EXPECT_EQ(s.n, 2);
    if (s.group == "fc=0.25" && s.method == "prognet-ft") EXPECT_FALSE(s.note.empty());
  }
  // The sweep point at the training cutoff reproduces the evaluation.
  const auto fc_rows = read_metrics_csv(layout.sweep_fc() / "metrics.csv");
  const auto eval_rows = read_metrics_csv(layout.eval() / "metrics.csv");
  int matched = 0;
  for (const auto& a : fc_rows)
    for (const auto& b : eval_rows)
      if (a.fc == 0.5 && a.case_id == b.case_id && a.method == b.method) {
        EXPECT_EQ(a.report.rmse, b.report.rmse);
        ++matched;
      }
  EXPECT_EQ(matched, 8);

  const auto vox_summary = cmd_sweep_voxel(cfg);
  EXPECT_EQ(vox_summary.size(), 2u * 4);
  const auto vox_rows = read_metrics_csv(layout.sweep_voxel() / "metrics.csv");
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(vox_rows[i].report.rmse, eval_rows[i].report.rmse);
    EXPECT_EQ(vox_rows[i].report.ssim, eval_rows[i].report.ssim);
  }
  std::ifstream gj(layout.sweep_voxel() / "grids.json");
  const auto grids = nlohmann::json::parse(gj);
  EXPECT_EQ(grids[1]["dx"].get<double>(), 0.75 * 32 / 40);

  const auto report = cmd_report(cfg);
  EXPECT_EQ(count_lines(report), 1 + 4 + 8 + 8);
}
