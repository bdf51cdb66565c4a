#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "qsmfine/network.hpp"
#include "qsmfine/phantom.hpp"

namespace qsmfine {

struct TrainConfig {
  int epochs = 20;
  double learning_rate = 1e-3;
  std::array<int, 3> patch{32, 32, 8};
  std::array<int, 3> stride{32, 32, 8};
  int batch_size = 4;
  std::uint64_t seed = 7;
  int checkpoint_every = 0;  // epochs; 0 keeps only the best checkpoint

  void validate(int divisor) const;
};

struct Patch {
  std::array<int, 3> origin{};
  nn::FeatureMap input;  // HPFP
  nn::FeatureMap label;  // chi
};

// Origins at multiples of the stride; the last origin on each axis is clamped
// so the final patch touches the far boundary.
std::vector<int> patch_origins(int extent, int patch, int stride);

std::vector<Patch> extract_patches(const RealVolume& input, const RealVolume& label,
                                   const std::array<int, 3>& patch,
                                   const std::array<int, 3>& stride);

// Mean-per-voxel L1 of each stage output against the label.
std::vector<double> stage_l1_losses(nn::ProgNet& net, const nn::FeatureMap& input,
                                    const nn::FeatureMap& label, nn::BnMode mode);

struct EpochLog {
  int epoch = 0;
  std::vector<double> train_stage;  // mean over patches, per stage
  std::vector<double> val_stage;    // mean over validation volumes, per stage
  double train_total() const;
  double val_total() const;
};

struct TrainResult {
  nn::ProgNet best;              // parameters rounded to the checkpoint precision
  int best_epoch = 0;
  double best_val_loss = 0.0;    // evaluated on `best` as stored
  std::vector<EpochLog> log;
};

struct TrainData {
  std::vector<std::pair<RealVolume, RealVolume>> train;  // (hpfp, chi)
  std::vector<std::pair<RealVolume, RealVolume>> val;
};

TrainData load_train_data(const DatasetManifest& m);

// Replaces every batch-norm running mean/variance with the equal-weight
// average of per-volume statistics over `inputs` (whole volumes).
void recalibrate_batchnorm(nn::ProgNet& net, const std::vector<RealVolume>& inputs);

// Total validation loss (sum of per-stage mean L1), whole volumes, BN eval mode.
double validation_loss(nn::ProgNet& net,
                       const std::vector<std::pair<RealVolume, RealVolume>>& val);

// Called after every epoch; `improved` points at the new best network when the
// epoch improved the validation loss, so callers can persist it immediately.
using EpochCallback = std::function<void(const EpochLog&, const nn::ProgNet* improved)>;

// Minimises sum over stages of mean |QSM_n - label| with Adam on patches and
// keeps the best-validation parameters. Validation runs on the network as it
// would be stored (float32 parameters). Throws RuntimeFailure on a non-finite
// loss, after the best network so far has been reported through `on_epoch`.
TrainResult pretrain(nn::ProgNet net, const TrainData& data, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log,
                    const std::string& config_hash);

}  // namespace qsmfine
