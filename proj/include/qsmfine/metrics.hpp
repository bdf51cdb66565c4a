#pragma once

#include <map>
#include <optional>

#include "qsmfine/volume.hpp"

namespace qsmfine::metrics {

struct MetricsReport {
  double rmse = 0.0;  // percent
  double psnr = 0.0;  // dB
  double ssim = 0.0;
  double hfen = 0.0;
  std::map<int, double> roi_means;  // ppm, keyed by label id
};

inline constexpr double kPsnrCap = 300.0;

// 100 * ||x - ref|| / ||ref||.
double rmse(const RealVolume& x, const RealVolume& ref);

// 20 log10(range(ref) / rms error), capped at kPsnrCap.
double psnr(const RealVolume& x, const RealVolume& ref);

struct SsimOptions {
  int window = 7;
  double k1 = 0.01, k2 = 0.03;
};
// Mean local SSIM over every window that fits inside the volume.
double ssim3d(const RealVolume& x, const RealVolume& ref, const SsimOptions& opt = {});

struct HfenOptions {
  double sigma = 1.5;  // voxels
  int support = 15;
  // Evaluate only where the kernel fits without touching the boundary.
  bool interior_only = false;
};
// ||LoG(x) - LoG(ref)|| / ||LoG(ref)|| with a zero-mean Laplacian-of-Gaussian,
// replicate boundary.
double hfen(const RealVolume& x, const RealVolume& ref, const HfenOptions& opt = {});

// Normalised 3D LoG kernel of size support^3.
std::vector<double> log_kernel(double sigma, int support);

// Mean of x over each non-zero label.
std::map<int, double> roi_means(const RealVolume& x, const LabelVolume& labels);

MetricsReport evaluate(const RealVolume& x, const RealVolume& ref,
                       const LabelVolume* labels = nullptr, const HfenOptions& hfen_opt = {});

}  // namespace qsmfine::metrics
