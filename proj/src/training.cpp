#include "qsmfine/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "qsmfine/qvol.hpp"

namespace qsmfine {

void TrainConfig::validate(int divisor) const {
  require(epochs >= 1, "training needs at least one epoch");
  require(learning_rate > 0.0, "learning rate must be positive");
  require(batch_size >= 1, "batch size must be at least 1");
  require(checkpoint_every >= 0, "checkpoint cadence must be non-negative");
  for (int a = 0; a < 3; ++a) {
    require(patch[a] >= 1 && patch[a] % divisor == 0,
            "patch size must be divisible by the network down-sampling factor");
    require(stride[a] >= 1 && stride[a] <= patch[a], "patch stride must lie in [1, patch size]");
  }
}

std::vector<int> patch_origins(int extent, int patch, int stride) {
  require(patch <= extent, "volume is smaller than the patch size");
  std::vector<int> origins;
  for (int o = 0;; o += stride) {
    if (o + patch >= extent) {
      origins.push_back(extent - patch);
      break;
    }
    origins.push_back(o);
  }
  return origins;
}

namespace {

nn::FeatureMap crop(const RealVolume& v, const std::array<int, 3>& o, const std::array<int, 3>& p) {
  nn::FeatureMap f(1, p[0], p[1], p[2]);
  std::size_t k = 0;
  for (int z = 0; z < p[2]; ++z)
    for (int y = 0; y < p[1]; ++y)
      for (int x = 0; x < p[0]; ++x) f.data[k++] = v.at(o[0] + x, o[1] + y, o[2] + z);
  return f;
}

}  // namespace

std::vector<Patch> extract_patches(const RealVolume& input, const RealVolume& label,
                                   const std::array<int, 3>& patch,
                                   const std::array<int, 3>& stride) {
  require_same_grid(input.grid(), label.grid(), "extract_patches");
  const auto& g = input.grid();
  const auto ox = patch_origins(g.nx, patch[0], stride[0]);
  const auto oy = patch_origins(g.ny, patch[1], stride[1]);
  const auto oz = patch_origins(g.nz, patch[2], stride[2]);
  std::vector<Patch> out;
  for (int z : oz)
    for (int y : oy)
      for (int x : ox) {
        const std::array<int, 3> o{x, y, z};
        out.push_back(Patch{o, crop(input, o, patch), crop(label, o, patch)});
      }
  return out;
}

namespace {

double mean_l1(const nn::FeatureMap& pred, const nn::FeatureMap& label) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) s += std::abs(pred.data[i] - label.data[i]);
  return s / static_cast<double>(pred.data.size());
}

nn::FeatureMap l1_seed(const nn::FeatureMap& pred, const nn::FeatureMap& label, double scale) {
  nn::FeatureMap g = pred;
  const double w = scale / static_cast<double>(pred.data.size());
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const double d = pred.data[i] - label.data[i];
    g.data[i] = d > 0 ? w : d < 0 ? -w : 0.0;
  }
  return g;
}

std::vector<double> val_stage_losses(nn::ProgNet& net,
                                     const std::vector<std::pair<RealVolume, RealVolume>>& val) {
  std::vector<double> sums(net.stages(), 0.0);
  for (const auto& [in, label] : val) {
    const auto l = stage_l1_losses(net, nn::to_feature_map(in), nn::to_feature_map(label),
                                   nn::BnMode::Eval);
    for (int k = 0; k < net.stages(); ++k) sums[k] += l[k];
  }
  for (double& s : sums) s /= static_cast<double>(val.size());
  return sums;
}

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
}

}  // namespace

std::vector<double> stage_l1_losses(nn::ProgNet& net, const nn::FeatureMap& input,
                                    const nn::FeatureMap& label, nn::BnMode mode) {
  nn::Tape tape;
  const auto outs = net.forward(tape, input, mode);
  std::vector<double> losses;
  for (auto id : outs) losses.push_back(mean_l1(tape.value(id), label));
  return losses;
}

void recalibrate_batchnorm(nn::ProgNet& net, const std::vector<RealVolume>& inputs) {
  require(!inputs.empty(), "batch-norm recalibration needs at least one volume");
  // Stage by stage, so each stage is calibrated on the eval-mode outputs it will see.
  std::vector<nn::FeatureMap> hpfp, prev;
  for (const auto& v : inputs) {
    hpfp.push_back(nn::to_feature_map(v));
    prev.emplace_back(1, v.grid().nx, v.grid().ny, v.grid().nz);
  }
  for (int k = 0; k < net.stages(); ++k) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      nn::Tape tape;
      // Cumulative average: the first volume overwrites the old statistics.
      tape.set_bn_momentum(1.0 / static_cast<double>(i + 1));
      net.stage(k).forward(tape, tape.constant(nn::stack_channels(prev[i], hpfp[i])),
                           nn::BnMode::Train);
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      nn::Tape tape;
      const auto out = net.stage(k).forward(
          tape, tape.constant(nn::stack_channels(prev[i], hpfp[i])), nn::BnMode::Eval);
      prev[i] = tape.value(out);
    }
  }
}

double EpochLog::train_total() const {
  return std::accumulate(train_stage.begin(), train_stage.end(), 0.0);
}
double EpochLog::val_total() const {
  return std::accumulate(val_stage.begin(), val_stage.end(), 0.0);
}

TrainData load_train_data(const DatasetManifest& m) {
  TrainData d;
  for (const CaseEntry* c : m.split(Split::Train))
    d.train.emplace_back(qvol::read_real(m.resolve(c->hpfp)), qvol::read_real(m.resolve(c->chi)));
  for (const CaseEntry* c : m.split(Split::Val))
    d.val.emplace_back(qvol::read_real(m.resolve(c->hpfp)), qvol::read_real(m.resolve(c->chi)));
  require(!d.train.empty() && !d.val.empty(), "dataset needs training and validation cases");
  return d;
}

double validation_loss(nn::ProgNet& net,
                       const std::vector<std::pair<RealVolume, RealVolume>>& val) {
  const auto s = val_stage_losses(net, val);
  return std::accumulate(s.begin(), s.end(), 0.0);
}

TrainResult pretrain(nn::ProgNet net, const TrainData& data, const TrainConfig& cfg,
                     const EpochCallback& on_epoch) {
  cfg.validate(net.config().divisor());
  require(!data.train.empty() && !data.val.empty(), "training needs train and validation data");

  std::vector<Patch> patches;
  for (const auto& [in, label] : data.train) {
    auto p = extract_patches(in, label, cfg.patch, cfg.stride);
    std::move(p.begin(), p.end(), std::back_inserter(patches));
  }

  std::vector<RealVolume> calibration;
  for (const auto& tv : data.train) calibration.push_back(tv.first);

  nn::Adam adam(net.all_parameters(), nn::AdamConfig{cfg.learning_rate});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  const int K = net.stages();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    log.train_stage.assign(K, 0.0);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      net.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const Patch& p = patches[order[i]];
        nn::Tape tape;
        const auto outs = net.forward(tape, p.input, nn::BnMode::Train);
        for (int k = 0; k < K; ++k) {
          const auto& pred = tape.value(outs[k]);
          const double l = mean_l1(pred, p.label);
          if (!std::isfinite(l))
            throw RuntimeFailure("training loss became non-finite at epoch " +
                                 std::to_string(epoch));
          log.train_stage[k] += l;
          tape.seed(outs[k], l1_seed(pred, p.label, scale));
        }
        tape.propagate();
      }
      adam.step();
    }
    for (double& l : log.train_stage) l /= static_cast<double>(patches.size());
    recalibrate_batchnorm(net, calibration);

    // Validate what would be written to disk.
    nn::ProgNet stored = nn::deserialize_checkpoint(nn::serialize_checkpoint(net));
    log.val_stage = val_stage_losses(stored, data.val);
    if (!all_finite(log.val_stage))
      throw RuntimeFailure("validation loss became non-finite at epoch " + std::to_string(epoch));

    const bool improved = log.val_total() < result.best_val_loss;
    if (improved) {
      result.best = std::move(stored);
      result.best_epoch = epoch;
      result.best_val_loss = log.val_total();
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log, improved ? &result.best : nullptr);
  }
  return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log,
                    const std::string& config_hash) {
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os.precision(17);
  os << "epoch,stage,train_loss,val_loss,config_hash\n";
  for (const auto& e : log) {
    for (std::size_t k = 0; k < e.train_stage.size(); ++k)
      os << e.epoch << ',' << k + 1 << ',' << e.train_stage[k] << ',' << e.val_stage[k] << ','
         << config_hash << '\n';
    os << e.epoch << ",total," << e.train_total() << ',' << e.val_total() << ',' << config_hash
       << '\n';
  }
}

}  // namespace qsmfine
