#include "qsmfine/finetune.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace qsmfine {

void FinetuneConfig::validate() const {
  require(learning_rate > 0.0, "fine-tuning learning rate must be positive");
  require(threshold > 0.0, "fine-tuning stop threshold must be positive");
  require(fluctuation_window >= 1, "fluctuation window must be at least 1");
  require(max_iterations >= 1, "fine-tuning needs at least one iteration");
  require(fc > 0.0 && fc <= 1.0, "fine-tuning fc must lie in (0, 1]");
  require(beta > 0.0, "fine-tuning beta must be positive");
}

const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::Converged: return "converged";
    case StopReason::Fluctuation: return "fluctuation";
    case StopReason::MaxIterations: return "max-iterations";
    case StopReason::NonFinite: return "non-finite";
  }
  return "?";
}

StoppingRule::StoppingRule(const FinetuneConfig& cfg)
    : cfg_(cfg), best_loss_(std::numeric_limits<double>::infinity()) {
  cfg_.validate();
}

std::optional<StopReason> StoppingRule::observe(double loss) {
  last_best_ = false;
  if (!std::isfinite(loss)) return StopReason::NonFinite;
  const bool first = history_.empty();
  const double prev = first ? 0.0 : history_.back();
  history_.push_back(loss);
  if (loss < best_loss_) {
    best_loss_ = loss;
    best_iteration_ = iteration();
    last_best_ = true;
  }
  if (first) return iteration() >= cfg_.max_iterations ? std::optional(StopReason::MaxIterations)
                                                       : std::nullopt;

  const double change = std::abs(loss - prev);
  if (prev == 0.0 ? change == 0.0 : change / prev < cfg_.threshold) return StopReason::Converged;
  increases_ = loss > prev ? increases_ + 1 : 0;
  if (increases_ >= cfg_.fluctuation_window) return StopReason::Fluctuation;
  if (iteration() >= cfg_.max_iterations) return StopReason::MaxIterations;
  return std::nullopt;
}

FinetuneState run_finetune(std::vector<nn::Parameter*> params,
                           const std::function<double()>& evaluate,
                           const std::function<void()>& on_best, const FinetuneConfig& cfg) {
  StoppingRule rule(cfg);
  nn::Adam adam(params, nn::AdamConfig{cfg.learning_rate});

  FinetuneState state;
  auto snapshot = [&] {
    state.best_snapshot.clear();
    for (const nn::Parameter* p : params) state.best_snapshot.push_back(*p);
  };
  snapshot();  // fallback when the very first evaluation fails

  for (;;) {
    for (nn::Parameter* p : params) p->zero_grad();
    const double loss = evaluate();
    const auto stop = rule.observe(loss);
    if (rule.last_was_best()) {
      snapshot();
      if (on_best) on_best();
    }
    if (stop) {
      state.reason = *stop;
      if (*stop == StopReason::NonFinite)
        state.diagnostic = "non-finite loss at iteration " + std::to_string(rule.iteration() + 1);
      break;
    }
    try {
      adam.step();
    } catch (const RuntimeFailure& e) {
      state.reason = StopReason::NonFinite;
      state.diagnostic = e.what();
      break;
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = state.best_snapshot[i].value;
  state.iterations = rule.iteration();
  state.history = rule.history();
  state.best_loss = rule.best_loss();
  state.best_iteration = rule.best_iteration();
  return state;
}

RealVolume wrap_volume(const RealVolume& v) {
  RealVolume out = v;
  for (double& a : out.storage()) a = wrap_phase(a);
  return out;
}

namespace {

int round_up(int n, int d) { return (n + d - 1) / d * d; }

// Zero-pads a volume (one channel) up to a multiple of `d` on every axis.
nn::FeatureMap pad_to_multiple(const RealVolume& v, int d) {
  const auto& g = v.grid();
  nn::FeatureMap f(1, round_up(g.nx, d), round_up(g.ny, d), round_up(g.nz, d));
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x)
        f.data[(static_cast<std::size_t>(z) * f.ny + y) * f.nx + x] = v.at(x, y, z);
  return f;
}

RealVolume crop_to_grid(const nn::FeatureMap& f, const VoxelGrid& g) {
  RealVolume v(g);
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x)
        v.at(x, y, z) = f.data[(static_cast<std::size_t>(z) * f.ny + y) * f.nx + x];
  return v;
}

}  // namespace

RealVolume predict(nn::ProgNet& net, const RealVolume& hpfp) {
  const nn::FeatureMap input = pad_to_multiple(wrap_volume(hpfp), net.config().divisor());
  nn::Tape tape;
  const auto outs = net.forward(tape, input, nn::BnMode::Eval);
  return crop_to_grid(tape.value(outs.back()), hpfp.grid());
}

FinetuneResult fine_tune(const nn::ProgNet& pretrained, const RealVolume& hpfp_raw,
                         const RealVolume& magnitude, const ScanParams& scan,
                         const FinetuneConfig& cfg) {
  cfg.validate();
  require_same_grid(hpfp_raw.grid(), magnitude.grid(), "fine_tune");
  const VoxelGrid& grid = hpfp_raw.grid();
  const RealVolume hpfp = wrap_volume(hpfp_raw);

  FinetuneResult result;
  result.net = pretrained;
  nn::ProgNet& net = result.net;
  const int K = net.stages();

  // Frozen inputs of the last stage: (QSM_{K-1}, HPFP).
  const nn::FeatureMap f = pad_to_multiple(hpfp, net.config().divisor());
  nn::FeatureMap previous(1, f.nx, f.ny, f.nz);
  for (int k = 0; k < K - 1; ++k) {
    nn::Tape tape;
    const auto in = tape.constant(nn::stack_channels(previous, f));
    previous = tape.value(net.stage(k).forward(tape, in, nn::BnMode::Eval));
  }
  const nn::FeatureMap stage_input = nn::stack_channels(previous, f);

  const ForwardModel model(magnitude, make_hann_transfer(grid, cfg.fc, cfg.beta), scan);

  std::vector<nn::Parameter*> params;
  for (auto& p : net.last().parameters())
    if (p.trainable) params.push_back(&p);

  RealVolume current;
  auto evaluate = [&]() -> double {
    nn::Tape tape;
    const auto out = net.last().forward(tape, tape.constant(stage_input), nn::BnMode::Eval);
    current = crop_to_grid(tape.value(out), grid);
    const LossAndGradient lg = loss_ft_with_gradient(current, hpfp, model);
    if (!std::isfinite(lg.loss)) return lg.loss;
    nn::FeatureMap seed = pad_to_multiple(lg.gradient, net.config().divisor());
    tape.backward(out, seed);
    if (result.initial_prediction.size() == 0) {
      result.initial_prediction = current;
      result.initial_loss = lg.loss;
    }
    return lg.loss;
  };
  auto on_best = [&] { result.prediction = current; };

  result.state = run_finetune(params, evaluate, on_best, cfg);
  if (result.prediction.size() == 0) result.prediction = predict(net, hpfp);
  return result;
}

void write_trace_csv(const std::filesystem::path& path, const FinetuneState& state,
                     const std::string& config_hash) {
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os.precision(17);
  os << "iteration,loss_ft,relative_change,config_hash\n";
  for (std::size_t i = 0; i < state.history.size(); ++i) {
    os << i + 1 << ',' << state.history[i] << ',';
    if (i > 0 && state.history[i - 1] != 0.0)
      os << std::abs(state.history[i] - state.history[i - 1]) / state.history[i - 1];
    os << ',' << config_hash << '\n';
  }
}

}  // namespace qsmfine
