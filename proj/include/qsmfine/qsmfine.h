/* C interface to the qsmfine library. */
#ifndef QSMFINE_H
#define QSMFINE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define QF_API __attribute__((visibility("default")))
#else
#define QF_API
#endif

typedef enum qf_status {
  QF_OK = 0,
  QF_ERR_VALIDATION = 1, /* bad input, config or file contents */
  QF_ERR_RUNTIME = 2,    /* I/O failure, numerical breakdown, missing artifacts */
  QF_ERR_INTERNAL = 3
} qf_status;

typedef struct qf_volume qf_volume;   /* real-valued 3D volume */
typedef struct qf_network qf_network; /* progressive network */

/* Message of the last failure on the calling thread; empty after success. */
QF_API const char* qf_last_error(void);
QF_API const char* qf_version(void);

/* Volumes. Samples are x-fastest, z-slowest. */
QF_API qf_status qf_volume_create(int nx, int ny, int nz, double dx, double dy, double dz,
                                  const double* data, qf_volume** out);
QF_API qf_status qf_volume_read(const char* path, qf_volume** out);
QF_API qf_status qf_volume_write(const qf_volume* v, const char* path);
QF_API void qf_volume_free(qf_volume* v);
QF_API qf_status qf_volume_dims(const qf_volume* v, int dims[3], double spacing[3]);
/* Copies out `count` samples; count must equal nx*ny*nz. */
QF_API qf_status qf_volume_copy(const qf_volume* v, double* out, size_t count);

/* Physics. */
QF_API qf_status qf_forward_hpfp(const qf_volume* chi, const qf_volume* magnitude, double fc,
                                 double b0, double te, qf_volume** out);
QF_API qf_status qf_loss_ft(const qf_volume* chi, const qf_volume* measured,
                            const qf_volume* magnitude, double fc, double b0, double te,
                            double* loss);

typedef struct qf_metrics {
  double rmse, psnr, ssim, hfen;
} qf_metrics;
QF_API qf_status qf_compute_metrics(const qf_volume* estimate, const qf_volume* reference,
                                    qf_metrics* out);

/* Networks. */
QF_API qf_status qf_network_load(const char* checkpoint, qf_network** out);
QF_API void qf_network_free(qf_network* n);
QF_API qf_status qf_network_stages(const qf_network* n, int* stages);
QF_API qf_status qf_network_predict(qf_network* n, const qf_volume* hpfp, qf_volume** out);

typedef struct qf_finetune_options {
  double learning_rate;
  double threshold;
  int fluctuation_window;
  int max_iterations;
  double fc;
  double b0, te;
} qf_finetune_options;
QF_API void qf_finetune_defaults(qf_finetune_options* opt);

typedef struct qf_finetune_report {
  int iterations;
  double initial_loss;
  double best_loss;
  int best_iteration;
  int stop_reason; /* 0 converged, 1 fluctuation, 2 max iterations, 3 non-finite */
} qf_finetune_report;
/* Adapts the last stage of `n` in place and returns the best prediction. */
QF_API qf_status qf_network_finetune(qf_network* n, const qf_volume* hpfp,
                                     const qf_volume* magnitude, const qf_finetune_options* opt,
                                     qf_volume** prediction, qf_finetune_report* report);

/* Experiment commands, driven by a config file. */
typedef struct qf_run_options {
  const char* config_path; /* required */
  const char* out_dir;     /* NULL keeps the config value */
  int has_seed;
  uint64_t seed;
  int jobs; /* <= 0 means 1 */
} qf_run_options;

QF_API qf_status qf_cmd_phantom(const qf_run_options* opt);
QF_API qf_status qf_cmd_train(const qf_run_options* opt);
QF_API qf_status qf_cmd_eval(const qf_run_options* opt);
QF_API qf_status qf_cmd_sweep_fc(const qf_run_options* opt);
QF_API qf_status qf_cmd_sweep_voxel(const qf_run_options* opt);
QF_API qf_status qf_cmd_metrics(const qf_run_options* opt);
QF_API qf_status qf_cmd_report(const qf_run_options* opt);

#ifdef __cplusplus
}
#endif

#endif
