#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qsmfine/finetune.hpp"
#include "qsmfine/metrics.hpp"
#include "qsmfine/network.hpp"
#include "qsmfine/phantom.hpp"
#include "qsmfine/training.hpp"

namespace qsmfine::harness {

struct ExperimentConfig {
  DatasetOptions dataset;
  nn::UnetConfig network{3, {8, 16, 32}, 2};
  int stages = 2;
  std::uint64_t network_seed = 42;
  TrainConfig training;
  FinetuneConfig finetune;
  std::vector<double> fc_list{0.25, 0.375, 0.5, 0.625, 0.75};
  std::vector<std::array<int, 2>> matrices{{80, 80}, {51, 51}};  // in-plane nx, ny
  metrics::HfenOptions hfen;
  std::filesystem::path out_dir = "runs";

  void validate() const;
  // Stable text form of every setting; the hash is FNV-1a 64 over it.
  std::string canonical() const;
  std::string hash() const;

  // INI-style file with [dataset] [physics] [network] [training] [finetune]
  // [sweep] [metrics] [output] sections. Missing keys keep their defaults;
  // unknown sections or keys are rejected.
  static ExperimentConfig load(const std::filesystem::path& path);
  static ExperimentConfig parse(const std::string& text);

  // Replaces the dataset, network and training seeds with values derived
  // from one master seed.
  void override_seed(std::uint64_t seed);
};

// Output layout under out_dir.
struct Layout {
  std::filesystem::path root;
  std::filesystem::path dataset() const { return root / "dataset"; }
  std::filesystem::path manifest() const { return dataset() / "manifest.json"; }
  std::filesystem::path train() const { return root / "train"; }
  std::filesystem::path checkpoint(const std::string& model) const {
    return train() / (model + ".qnt");
  }
  std::filesystem::path eval() const { return root / "eval"; }
  std::filesystem::path sweep_fc() const { return root / "sweep_fc"; }
  std::filesystem::path sweep_voxel() const { return root / "sweep_voxel"; }
};

enum class Method { Unet, UnetFt, Prognet, PrognetFt };
const char* to_string(Method m);
inline constexpr std::array<Method, 4> kMethods{Method::Unet, Method::UnetFt, Method::Prognet,
                                                Method::PrognetFt};

struct MetricsRow {
  std::string case_id;
  std::string method;
  double fc = 0.0;
  VoxelGrid grid;
  metrics::MetricsReport report;
  // Filled for fine-tuned methods.
  std::optional<double> loss_initial, loss_final;
  int ft_iterations = 0;
  std::string stop_reason;
};

struct SummaryRow {
  std::string group;  // e.g. "fc=0.375" or "matrix=80x80"
  std::string method;
  int n = 0;
  double rmse_mean = 0, rmse_std = 0, psnr_mean = 0, psnr_std = 0;
  double ssim_mean = 0, ssim_std = 0, hfen_mean = 0, hfen_std = 0;
  std::string note;
};

// One test case at one acquisition condition.
struct EvalCase {
  std::string id;
  RealVolume hpfp, magnitude, chi;
  LabelVolume labels;
  ScanParams scan;
};

struct TrainedModels {
  nn::ProgNet prognet;
  nn::ProgNet unet;
};

struct CaseOutputs {
  std::vector<MetricsRow> rows;  // one per method, in kMethods order
  std::vector<RealVolume> predictions;
  std::vector<FinetuneState> traces;  // unet-ft, prognet-ft
};

// Predicts with both networks, fine-tunes both, and scores all four methods.
CaseOutputs evaluate_case(const TrainedModels& models, const EvalCase& c, double fc,
                          const FinetuneConfig& ft, const metrics::HfenOptions& hfen);

// Test case as stored on disk.
EvalCase load_eval_case(const DatasetManifest& m, const CaseEntry& e);
// Test case with HPFP regenerated at a different filter cutoff.
EvalCase regenerate_fc(const DatasetManifest& m, const CaseEntry& e, double fc);
// Test case resampled in k-space to a new in-plane matrix.
EvalCase resample_case(const DatasetManifest& m, const CaseEntry& e, int nx, int ny);

// Mean and sample standard deviation per (group, method); groups keep their
// first-seen order, methods follow kMethods.
std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& rows,
                                  const std::function<std::string(const MetricsRow&)>& group);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows,
                       const std::string& config_hash);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);
void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows,
                       const std::string& config_hash);

// 8-bit grayscale PNG of axial slice z with a fixed window.
void write_slice_png(const std::filesystem::path& path, const RealVolume& v, int z,
                     double lo = -0.2, double hi = 0.8);

struct RunOptions {
  int jobs = 1;
};

DatasetManifest cmd_phantom(const ExperimentConfig& cfg);
struct TrainOutputs {
  TrainResult prognet, unet;
};

TrainOutputs cmd_train(const ExperimentConfig& cfg, const RunOptions& opt = {});
std::vector<MetricsRow> cmd_eval(const ExperimentConfig& cfg, const RunOptions& opt = {});
std::vector<SummaryRow> cmd_sweep_fc(const ExperimentConfig& cfg, const RunOptions& opt = {});
std::vector<SummaryRow> cmd_sweep_voxel(const ExperimentConfig& cfg, const RunOptions& opt = {});
// Recomputes the evaluation metrics from the stored prediction volumes.
std::vector<MetricsRow> cmd_metrics(const ExperimentConfig& cfg, const RunOptions& opt = {});
// Merges every CSV produced so far into out_dir/report.csv; returns its path.
std::filesystem::path cmd_report(const ExperimentConfig& cfg);

TrainedModels load_models(const ExperimentConfig& cfg);

// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first
// failure after all workers finish.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

}  // namespace qsmfine::harness
