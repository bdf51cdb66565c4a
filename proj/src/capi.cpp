#include "qsmfine/qsmfine.h"

#include <cstring>
#include <string>

#include "qsmfine/finetune.hpp"
#include "qsmfine/harness.hpp"
#include "qsmfine/metrics.hpp"
#include "qsmfine/qvol.hpp"

struct qf_volume {
  qsmfine::RealVolume v;
};

struct qf_network {
  qsmfine::nn::ProgNet net;
};

namespace {

thread_local std::string g_error;

template <typename F>
qf_status guarded(F&& f) {
  g_error.clear();
  try {
    f();
    return QF_OK;
  } catch (const qsmfine::ValidationError& e) {
    g_error = e.what();
    return QF_ERR_VALIDATION;
  } catch (const qsmfine::RuntimeFailure& e) {
    g_error = e.what();
    return QF_ERR_RUNTIME;
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
    return QF_ERR_RUNTIME;
  } catch (const std::exception& e) {
    g_error = e.what();
    return QF_ERR_INTERNAL;
  } catch (...) {
    g_error = "unknown error";
    return QF_ERR_INTERNAL;
  }
}

template <typename T>
T& deref(T* p, const char* what) {
  if (!p) throw qsmfine::ValidationError(std::string(what) + " must not be null");
  return *p;
}

qsmfine::ScanParams scan(double b0, double te) {
  return qsmfine::ScanParams(b0, te, qsmfine::ScanParams::kDefaultGammaBar);
}

qsmfine::harness::ExperimentConfig config(const qf_run_options* opt) {
  deref(opt, "run options");
  if (!opt->config_path) throw qsmfine::ValidationError("a config file is required");
  auto cfg = qsmfine::harness::ExperimentConfig::load(opt->config_path);
  if (opt->out_dir) cfg.out_dir = opt->out_dir;
  if (opt->has_seed) cfg.override_seed(opt->seed);
  cfg.validate();
  return cfg;
}

qsmfine::harness::RunOptions run(const qf_run_options* opt) {
  return {opt->jobs > 0 ? opt->jobs : 1};
}

const char* path_arg(const char* p) {
  if (!p || !*p) throw qsmfine::ValidationError("path must not be empty");
  return p;
}

}  // namespace

extern "C" {

const char* qf_last_error(void) { return g_error.c_str(); }
const char* qf_version(void) { return "0.1.0"; }

qf_status qf_volume_create(int nx, int ny, int nz, double dx, double dy, double dz,
                           const double* data, qf_volume** out) {
  return guarded([&] {
    deref(out, "output pointer");
    qsmfine::VoxelGrid g{nx, ny, nz, dx, dy, dz};
    g.validate();
    auto* v = new qf_volume{qsmfine::RealVolume(g)};
    if (data) std::memcpy(v->v.storage().data(), data, g.size() * sizeof(double));
    *out = v;
  });
}

qf_status qf_volume_read(const char* path, qf_volume** out) {
  return guarded([&] {
    deref(out, "output pointer");
    *out = new qf_volume{qsmfine::qvol::read_real(path_arg(path))};
  });
}

qf_status qf_volume_write(const qf_volume* v, const char* path) {
  return guarded([&] { qsmfine::qvol::write(path_arg(path), deref(v, "volume").v); });
}

void qf_volume_free(qf_volume* v) { delete v; }

qf_status qf_volume_dims(const qf_volume* v, int dims[3], double spacing[3]) {
  return guarded([&] {
    const auto& g = deref(v, "volume").v.grid();
    if (dims) {
      dims[0] = g.nx;
      dims[1] = g.ny;
      dims[2] = g.nz;
    }
    if (spacing) {
      spacing[0] = g.dx;
      spacing[1] = g.dy;
      spacing[2] = g.dz;
    }
  });
}

qf_status qf_volume_copy(const qf_volume* v, double* out, size_t count) {
  return guarded([&] {
    const auto& vol = deref(v, "volume").v;
    deref(out, "output buffer");
    qsmfine::require(count == vol.size(), "buffer size does not match the volume");
    std::memcpy(out, vol.data().data(), count * sizeof(double));
  });
}

qf_status qf_forward_hpfp(const qf_volume* chi, const qf_volume* magnitude, double fc, double b0,
                          double te, qf_volume** out) {
  return guarded([&] {
    deref(out, "output pointer");
    const auto& m = deref(magnitude, "magnitude").v;
    const qsmfine::ForwardModel model(m, qsmfine::make_hann_transfer(m.grid(), fc), scan(b0, te));
    *out = new qf_volume{qsmfine::forward_hpfp(deref(chi, "chi").v, model)};
  });
}

qf_status qf_loss_ft(const qf_volume* chi, const qf_volume* measured, const qf_volume* magnitude,
                     double fc, double b0, double te, double* loss) {
  return guarded([&] {
    const auto& m = deref(magnitude, "magnitude").v;
    const qsmfine::ForwardModel model(m, qsmfine::make_hann_transfer(m.grid(), fc), scan(b0, te));
    deref(loss, "loss pointer") =
        qsmfine::loss_ft(deref(chi, "chi").v, deref(measured, "measured").v, model);
  });
}

qf_status qf_compute_metrics(const qf_volume* estimate, const qf_volume* reference,
                             qf_metrics* out) {
  return guarded([&] {
    const auto r = qsmfine::metrics::evaluate(deref(estimate, "estimate").v,
                                              deref(reference, "reference").v);
    deref(out, "output pointer") = qf_metrics{r.rmse, r.psnr, r.ssim, r.hfen};
  });
}

qf_status qf_network_load(const char* checkpoint, qf_network** out) {
  return guarded([&] {
    deref(out, "output pointer");
    *out = new qf_network{qsmfine::nn::load_checkpoint(path_arg(checkpoint))};
  });
}

void qf_network_free(qf_network* n) { delete n; }

qf_status qf_network_stages(const qf_network* n, int* stages) {
  return guarded([&] { deref(stages, "output pointer") = deref(n, "network").net.stages(); });
}

qf_status qf_network_predict(qf_network* n, const qf_volume* hpfp, qf_volume** out) {
  return guarded([&] {
    deref(out, "output pointer");
    *out = new qf_volume{qsmfine::predict(deref(n, "network").net, deref(hpfp, "hpfp").v)};
  });
}

void qf_finetune_defaults(qf_finetune_options* opt) {
  if (!opt) return;
  const qsmfine::FinetuneConfig d;
  *opt = qf_finetune_options{d.learning_rate,
                             d.threshold,
                             d.fluctuation_window,
                             d.max_iterations,
                             d.fc,
                             qsmfine::ScanParams::kDefaultB0,
                             qsmfine::ScanParams::kDefaultTe};
}

qf_status qf_network_finetune(qf_network* n, const qf_volume* hpfp, const qf_volume* magnitude,
                              const qf_finetune_options* opt, qf_volume** prediction,
                              qf_finetune_report* report) {
  return guarded([&] {
    auto& net = deref(n, "network").net;
    const auto& o = deref(opt, "options");
    deref(prediction, "output pointer");
    qsmfine::FinetuneConfig cfg;
    cfg.learning_rate = o.learning_rate;
    cfg.threshold = o.threshold;
    cfg.fluctuation_window = o.fluctuation_window;
    cfg.max_iterations = o.max_iterations;
    cfg.fc = o.fc;
    auto res = qsmfine::fine_tune(net, deref(hpfp, "hpfp").v, deref(magnitude, "magnitude").v,
                                  scan(o.b0, o.te), cfg);
    net = std::move(res.net);
    *prediction = new qf_volume{std::move(res.prediction)};
    if (report)
      *report = qf_finetune_report{res.state.iterations, res.initial_loss, res.state.best_loss,
                                   res.state.best_iteration, static_cast<int>(res.state.reason)};
  });
}

qf_status qf_cmd_phantom(const qf_run_options* opt) {
  return guarded([&] { qsmfine::harness::cmd_phantom(config(opt)); });
}
qf_status qf_cmd_train(const qf_run_options* opt) {
  return guarded([&] { qsmfine::harness::cmd_train(config(opt), run(opt)); });
}
qf_status qf_cmd_eval(const qf_run_options* opt) {
  return guarded([&] { qsmfine::harness::cmd_eval(config(opt), run(opt)); });
}
qf_status qf_cmd_sweep_fc(const qf_run_options* opt) {
  return guarded([&] { qsmfine::harness::cmd_sweep_fc(config(opt), run(opt)); });
}
qf_status qf_cmd_sweep_voxel(const qf_run_options* opt) {
  return guarded([&] { qsmfine::harness::cmd_sweep_voxel(config(opt), run(opt)); });
}
qf_status qf_cmd_metrics(const qf_run_options* opt) {
  return guarded([&] { qsmfine::harness::cmd_metrics(config(opt), run(opt)); });
}
qf_status qf_cmd_report(const qf_run_options* opt) {
  return guarded([&] { qsmfine::harness::cmd_report(config(opt)); });
}

}  // extern "C"
