#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qsmfine/network.hpp"
#include "qsmfine/physics.hpp"

namespace qsmfine {

struct FinetuneConfig {
  double learning_rate = 1e-4;
  double threshold = 5e-3;     // relative loss change that counts as converged
  int fluctuation_window = 3;  // consecutive increases that end the run
  int max_iterations = 200;
  double fc = 0.5;             // Hann cutoff used inside the loss
  double beta = HannFilter::kDefaultBeta;

  void validate() const;
};

enum class StopReason { Converged, Fluctuation, MaxIterations, NonFinite };
const char* to_string(StopReason r);

// Stopping bookkeeping, fed one loss per iteration.
class StoppingRule {
 public:
  explicit StoppingRule(const FinetuneConfig& cfg);

  // Records the loss of the next iteration; returns a reason when the run
  // should end after this iteration.
  std::optional<StopReason> observe(double loss);

  const std::vector<double>& history() const { return history_; }
  int iteration() const { return static_cast<int>(history_.size()); }
  double best_loss() const { return best_loss_; }
  int best_iteration() const { return best_iteration_; }  // 1-based, 0 if none
  bool last_was_best() const { return last_best_; }

 private:
  FinetuneConfig cfg_;
  std::vector<double> history_;
  double best_loss_;
  int best_iteration_ = 0;
  bool last_best_ = false;
  int increases_ = 0;
};

struct FinetuneState {
  int iterations = 0;
  std::vector<double> history;  // loss_FT per iteration, in evaluation order
  double best_loss = 0.0;
  int best_iteration = 0;
  StopReason reason = StopReason::MaxIterations;
  std::string diagnostic;
  std::vector<nn::Parameter> best_snapshot;
};

// Generic adaptation loop: `evaluate` computes the loss at the current
// parameters and fills their gradients; `on_best` runs whenever the latest
// evaluation is the best so far. Parameters end at the best snapshot.
FinetuneState run_finetune(std::vector<nn::Parameter*> params,
                           const std::function<double()>& evaluate,
                           const std::function<void()>& on_best, const FinetuneConfig& cfg);

struct FinetuneResult {
  nn::ProgNet net;          // adapted copy; stages 1..K-1 untouched
  RealVolume prediction;    // QSM_K from the best-loss parameters, ppm
  RealVolume initial_prediction;
  double initial_loss = 0.0;
  FinetuneState state;
};

// Wraps every voxel into (-pi, pi].
RealVolume wrap_volume(const RealVolume& v);

// QSM_K of the progressive network on a whole volume. Inputs are wrapped to
// (-pi, pi] and zero-padded to the network's size multiple internally.
RealVolume predict(nn::ProgNet& net, const RealVolume& hpfp);

// Adapts the last stage against the filtered-dipole fidelity loss on one case.
FinetuneResult fine_tune(const nn::ProgNet& net, const RealVolume& hpfp,
                         const RealVolume& magnitude, const ScanParams& scan,
                         const FinetuneConfig& cfg);

void write_trace_csv(const std::filesystem::path& path, const FinetuneState& state,
                     const std::string& config_hash);

}  // namespace qsmfine
