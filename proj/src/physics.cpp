#include "qsmfine/physics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace qsmfine {

ScanParams::ScanParams(double b0, double te, double gamma_bar)
    : b0_(b0), te_(te), gamma_bar_(gamma_bar) {
  require(b0 > 0 && te > 0 && gamma_bar > 0 && std::isfinite(b0) && std::isfinite(te) &&
              std::isfinite(gamma_bar),
          "scan parameters must be positive and finite");
  phase_per_ppm_ = 2.0 * std::numbers::pi * gamma_bar_ * b0_ * te_ * 1e-6;
}

DipoleKernel make_dipole_kernel(const VoxelGrid& grid) {
  grid.validate();
  DipoleKernel d{grid, std::vector<double>(grid.size())};
  const double fx = 1.0 / (grid.nx * grid.dx);
  const double fy = 1.0 / (grid.ny * grid.dy);
  const double fz = 1.0 / (grid.nz * grid.dz);
  for (int z = 0; z < grid.nz; ++z) {
    const double kz = signed_frequency(z, grid.nz) * fz;
    for (int y = 0; y < grid.ny; ++y) {
      const double ky = signed_frequency(y, grid.ny) * fy;
      for (int x = 0; x < grid.nx; ++x) {
        const double kx = signed_frequency(x, grid.nx) * fx;
        const double k2 = kx * kx + ky * ky + kz * kz;
        d.multiplier[grid.index(x, y, z)] = k2 == 0.0 ? 0.0 : 1.0 / 3.0 - kz * kz / k2;
      }
    }
  }
  return d;
}

RealVolume dipole_convolve(const RealVolume& x, const DipoleKernel& d) {
  require_same_grid(x.grid(), d.grid, "dipole_convolve");
  ComplexVolume spectrum = fft3(to_complex(x));
  for (std::size_t i = 0; i < spectrum.size(); ++i) spectrum[i] *= d.multiplier[i];
  return real_part(ifft3(spectrum));
}

HannFilter make_hann_transfer(const VoxelGrid& grid, double fc, double beta) {
  grid.validate();
  require(fc > 0.0 && fc <= 1.0, "Hann filter cutoff fc must lie in (0, 1]");
  require(beta > 0.0, "Hann filter beta must be positive");
  HannFilter h;
  h.fc = fc;
  h.grid = grid;
  const double n_max = std::max(grid.nx, grid.ny);
  h.cutoff_radius = beta * (n_max / 320.0) / fc;
  h.transfer.assign(grid.slice_size(), 0.0);
  for (int y = 0; y < grid.ny; ++y) {
    const double ky = signed_frequency(y, grid.ny);
    for (int x = 0; x < grid.nx; ++x) {
      const double kx = signed_frequency(x, grid.nx);
      const double rho = std::sqrt(kx * kx + ky * ky);
      if (rho <= h.cutoff_radius) {
        const double c = std::cos(std::numbers::pi * rho / (2.0 * h.cutoff_radius));
        h.transfer[static_cast<std::size_t>(y) * grid.nx + x] = c * c;
      }
    }
  }
  return h;
}

HannFilter make_allpass_transfer(const VoxelGrid& grid) {
  grid.validate();
  HannFilter h;
  h.fc = 1.0;
  h.cutoff_radius = std::numeric_limits<double>::infinity();
  h.grid = grid;
  h.transfer.assign(grid.slice_size(), 1.0);
  return h;
}

ComplexVolume lowpass_inplane(const ComplexVolume& v, const HannFilter& h) {
  require_same_grid(v.grid(), h.grid, "lowpass_inplane");
  ComplexVolume spectrum = fft2_slicewise(v);
  const std::size_t plane = v.grid().slice_size();
  for (std::size_t i = 0; i < spectrum.size(); ++i) spectrum[i] *= h.transfer[i % plane];
  return ifft2_slicewise(spectrum);
}

ComplexVolume synth_complex(const RealVolume& magnitude, const RealVolume& phase) {
  require_same_grid(magnitude.grid(), phase.grid(), "synth_complex");
  ComplexVolume out(magnitude.grid());
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(magnitude[i] >= 0.0, "synth_complex: negative magnitude");
    out[i] = std::polar(magnitude[i], phase[i]);
  }
  return out;
}

namespace {

double principal_angle(const Complex& z) {
  const double a = std::arg(z);
  return a <= -std::numbers::pi ? std::numbers::pi : a;
}

}  // namespace

RealVolume hpfp(const ComplexVolume& c, const HannFilter& h) {
  const ComplexVolume low = lowpass_inplane(c, h);
  RealVolume out(c.grid());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = principal_angle(c[i] * std::conj(low[i]));
  return out;
}

double wrap_phase(double a) {
  double r = std::remainder(a, 2.0 * std::numbers::pi);
  if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
  if (r > std::numbers::pi) r -= 2.0 * std::numbers::pi;
  return r;
}

ForwardModel::ForwardModel(RealVolume m, const HannFilter& h, const ScanParams& s)
    : ForwardModel(m, make_dipole_kernel(m.grid()), h, s) {}

ForwardModel::ForwardModel(RealVolume m, DipoleKernel d, HannFilter h, const ScanParams& s)
    : magnitude(std::move(m)), dipole(std::move(d)), filter(std::move(h)), scan(s) {
  require_same_grid(magnitude.grid(), dipole.grid, "forward model dipole kernel");
  require_same_grid(magnitude.grid(), filter.grid, "forward model Hann filter");
}

namespace {

struct ForwardState {
  ComplexVolume c;    // m * exp(i * phase)
  ComplexVolume low;  // H(c)
  RealVolume phase;   // filtered-phase prediction
};

ForwardState run_forward(const RealVolume& chi, const ForwardModel& model) {
  require_same_grid(chi.grid(), model.grid(), "forward_hpfp");
  RealVolume field = dipole_convolve(chi, model.dipole);
  for (double& f : field.storage()) f *= model.scan.phase_per_ppm();
  ForwardState s{synth_complex(model.magnitude, field), ComplexVolume(), RealVolume(chi.grid())};
  s.low = lowpass_inplane(s.c, model.filter);
  for (std::size_t i = 0; i < s.c.size(); ++i)
    s.phase[i] = principal_angle(s.c[i] * std::conj(s.low[i]));
  return s;
}

}  // namespace

RealVolume forward_hpfp(const RealVolume& chi, const ForwardModel& model) {
  return run_forward(chi, model).phase;
}

double loss_ft(const RealVolume& chi, const RealVolume& measured, const ForwardModel& model) {
  require_same_grid(chi.grid(), measured.grid(), "loss_ft");
  const RealVolume predicted = forward_hpfp(chi, model);
  double loss = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double r = wrap_phase(predicted[i] - measured[i]);
    loss += r * r;
  }
  return loss;
}

// With h = c * conj(Lc) and f = angle(h), a phase perturbation dp gives
//   df = dp - Re(w * L(c * dp)),   w = 1 / Lc,
// so the adjoint applied to g = dloss/df is
//   dloss/dp = g - Re(c * conj(L(conj(w) * g))).
// L and the dipole operator are both self-adjoint.
LossAndGradient loss_ft_with_gradient(const RealVolume& chi, const RealVolume& measured,
                                      const ForwardModel& model) {
  require_same_grid(chi.grid(), measured.grid(), "loss_ft");
  const ForwardState s = run_forward(chi, model);
  const VoxelGrid& g = chi.grid();

  LossAndGradient out{0.0, RealVolume(g)};
  RealVolume g_phase(g);
  ComplexVolume weighted(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double r = wrap_phase(s.phase[i] - measured[i]);
    out.loss += r * r;
    const Complex h = s.c[i] * std::conj(s.low[i]);
    if (h == Complex(0.0, 0.0)) continue;  // angle is pinned to 0 there
    g_phase[i] = 2.0 * r;
    weighted[i] = std::conj(1.0 / s.low[i]) * g_phase[i];
  }
  const ComplexVolume back = lowpass_inplane(weighted, model.filter);
  for (std::size_t i = 0; i < g.size(); ++i)
    g_phase[i] -= (s.c[i] * std::conj(back[i])).real();

  out.gradient = dipole_convolve(g_phase, model.dipole);
  for (double& v : out.gradient.storage()) v *= model.scan.phase_per_ppm();
  return out;
}

}  // namespace qsmfine
