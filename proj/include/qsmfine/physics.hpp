#pragma once

#include <vector>

#include "qsmfine/volume.hpp"

namespace qsmfine {

// Scan parameters setting the susceptibility (ppm) to phase (rad) scale.
class ScanParams {
 public:
  static constexpr double kDefaultB0 = 3.0;            // T
  static constexpr double kDefaultTe = 22.7e-3;        // s
  static constexpr double kDefaultGammaBar = 42.577e6; // Hz/T

  ScanParams() : ScanParams(kDefaultB0, kDefaultTe, kDefaultGammaBar) {}
  ScanParams(double b0, double te, double gamma_bar);

  double b0() const { return b0_; }
  double te() const { return te_; }
  double gamma_bar() const { return gamma_bar_; }
  // 2*pi*gamma_bar*b0*te*1e-6 rad/ppm.
  double phase_per_ppm() const { return phase_per_ppm_; }

 private:
  double b0_, te_, gamma_bar_, phase_per_ppm_;
};

// k-space dipole multiplier 1/3 - kz^2/|k|^2 with physical frequencies
// (cycles/mm); D(0) = 0.
struct DipoleKernel {
  VoxelGrid grid;
  std::vector<double> multiplier;  // grid.size() values, FFT bin order
};

// In-plane radial raised-cosine low-pass shared by all slices.
struct HannFilter {
  static constexpr double kDefaultBeta = 40.0;  // passband scale at N_max = 320

  double fc = 0.5;
  double cutoff_radius = 0.0;  // samples
  VoxelGrid grid;
  std::vector<double> transfer;  // grid.slice_size() values, FFT bin order
};

DipoleKernel make_dipole_kernel(const VoxelGrid& grid);

// Real part of ifft3(D * fft3(x)): local field shift in ppm.
RealVolume dipole_convolve(const RealVolume& x, const DipoleKernel& d);

// Passband radius rho_c = beta * (N_max/320) / fc in-plane frequency samples.
HannFilter make_hann_transfer(const VoxelGrid& grid, double fc,
                              double beta = HannFilter::kDefaultBeta);
// Transfer function that passes everything; mostly useful in tests.
HannFilter make_allpass_transfer(const VoxelGrid& grid);

ComplexVolume lowpass_inplane(const ComplexVolume& v, const HannFilter& h);

ComplexVolume synth_complex(const RealVolume& magnitude, const RealVolume& phase);

// angle(c * conj(H(c))): the high-pass filtered phase, in (-pi, pi].
RealVolume hpfp(const ComplexVolume& c, const HannFilter& h);

// Maps a phase difference into (-pi, pi].
double wrap_phase(double a);

// Everything the fidelity loss needs besides the susceptibility estimate.
struct ForwardModel {
  RealVolume magnitude;
  DipoleKernel dipole;
  HannFilter filter;
  ScanParams scan;

  ForwardModel(RealVolume m, const HannFilter& h, const ScanParams& s);
  ForwardModel(RealVolume m, DipoleKernel d, HannFilter h, const ScanParams& s);
  const VoxelGrid& grid() const { return magnitude.grid(); }
};

RealVolume forward_hpfp(const RealVolume& chi, const ForwardModel& model);

// Sum over voxels of wrap(forward_hpfp(chi) - measured)^2.
double loss_ft(const RealVolume& chi, const RealVolume& measured, const ForwardModel& model);

struct LossAndGradient {
  double loss = 0.0;
  RealVolume gradient;  // d loss / d chi, per ppm
};

LossAndGradient loss_ft_with_gradient(const RealVolume& chi, const RealVolume& measured,
                                      const ForwardModel& model);

inline RealVolume grad_loss_ft(const RealVolume& chi, const RealVolume& measured,
                               const ForwardModel& model) {
  return loss_ft_with_gradient(chi, measured, model).gradient;
}

}  // namespace qsmfine
