#include "qsmfine/volume.hpp"

#include <fftw3.h>

#include <algorithm>
#include <mutex>
#include <sstream>

namespace qsmfine {

void VoxelGrid::validate() const {
  if (!valid()) {
    std::ostringstream os;
    os << "invalid voxel grid " << nx << "x" << ny << "x" << nz << " @ " << dx << "x" << dy
       << "x" << dz << " mm (need extents >= " << kMinExtent << ", spacing > 0)";
    throw ValidationError(os.str());
  }
}

bool all_finite(const RealVolume& v) {
  return std::all_of(v.data().begin(), v.data().end(), [](double a) { return std::isfinite(a); });
}

bool all_finite(const ComplexVolume& v) {
  return std::all_of(v.data().begin(), v.data().end(), [](const Complex& a) {
    return std::isfinite(a.real()) && std::isfinite(a.imag());
  });
}

ComplexVolume to_complex(const RealVolume& v) {
  ComplexVolume out(v.grid());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = Complex(v[i], 0.0);
  return out;
}

RealVolume real_part(const ComplexVolume& v) {
  RealVolume out(v.grid());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i].real();
  return out;
}

void require_same_grid(const VoxelGrid& a, const VoxelGrid& b, const char* what) {
  if (!(a == b)) {
    std::ostringstream os;
    os << what << ": grid mismatch (" << a.nx << "x" << a.ny << "x" << a.nz << " vs " << b.nx
       << "x" << b.ny << "x" << b.nz << ")";
    throw ValidationError(os.str());
  }
}

namespace {

// FFTW planning is not thread-safe; execution on distinct arrays is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct Plan {
  fftw_plan handle = nullptr;
  ~Plan() {
    if (handle) {
      std::lock_guard lock(planner_mutex());
      fftw_destroy_plan(handle);
    }
  }
};

fftw_complex* as_fftw(std::vector<Complex>& v) {
  return reinterpret_cast<fftw_complex*>(v.data());
}

void transform(std::vector<Complex>& data, int rank, const int* dims, int howmany, int dist,
               int sign) {
  Plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan.handle = fftw_plan_many_dft(rank, dims, howmany, as_fftw(data), nullptr, 1, dist,
                                     as_fftw(data), nullptr, 1, dist, sign, FFTW_ESTIMATE);
  }
  if (!plan.handle) throw RuntimeFailure("FFTW failed to create a plan");
  fftw_execute(plan.handle);
}

void scale(std::vector<Complex>& data, double s) {
  for (auto& c : data) c *= s;
}

}  // namespace

ComplexVolume fft3(const ComplexVolume& v) {
  std::vector<Complex> data = v.storage();
  const auto& g = v.grid();
  const int dims[3] = {g.nz, g.ny, g.nx};
  transform(data, 3, dims, 1, static_cast<int>(g.size()), FFTW_FORWARD);
  return ComplexVolume(g, std::move(data));
}

ComplexVolume ifft3(const ComplexVolume& v) {
  std::vector<Complex> data = v.storage();
  const auto& g = v.grid();
  const int dims[3] = {g.nz, g.ny, g.nx};
  transform(data, 3, dims, 1, static_cast<int>(g.size()), FFTW_BACKWARD);
  scale(data, 1.0 / static_cast<double>(g.size()));
  return ComplexVolume(g, std::move(data));
}

ComplexVolume fft2_slicewise(const ComplexVolume& v) {
  std::vector<Complex> data = v.storage();
  const auto& g = v.grid();
  const int dims[2] = {g.ny, g.nx};
  transform(data, 2, dims, g.nz, static_cast<int>(g.slice_size()), FFTW_FORWARD);
  return ComplexVolume(g, std::move(data));
}

ComplexVolume ifft2_slicewise(const ComplexVolume& v) {
  std::vector<Complex> data = v.storage();
  const auto& g = v.grid();
  const int dims[2] = {g.ny, g.nx};
  transform(data, 2, dims, g.nz, static_cast<int>(g.slice_size()), FFTW_BACKWARD);
  scale(data, 1.0 / static_cast<double>(g.slice_size()));
  return ComplexVolume(g, std::move(data));
}

ComplexVolume resample_kspace(const ComplexVolume& v, int new_nx, int new_ny) {
  require(new_nx >= VoxelGrid::kMinExtent && new_ny >= VoxelGrid::kMinExtent,
          "resample_kspace: target matrix must be at least 4x4");
  require(all_finite(v), "resample_kspace: input contains non-finite values");

  const VoxelGrid& src = v.grid();
  VoxelGrid dst = src;
  dst.nx = new_nx;
  dst.ny = new_ny;
  dst.dx = src.dx * src.nx / new_nx;
  dst.dy = src.dy * src.ny / new_ny;

  const ComplexVolume spectrum = fft2_slicewise(v);
  ComplexVolume resized(dst);

  // A frequency survives when its signed index lies inside both the source and
  // target ranges; this makes pad-then-truncate an exact identity.
  auto maps = [](int n_from, int n_to) {
    std::vector<int> target(n_from, -1);
    const int lo = -(n_to / 2), hi = (n_to + 1) / 2 - 1;
    for (int i = 0; i < n_from; ++i) {
      const int k = signed_frequency(i, n_from);
      if (k >= lo && k <= hi) target[i] = k < 0 ? k + n_to : k;
    }
    return target;
  };
  const auto xmap = maps(src.nx, new_nx);
  const auto ymap = maps(src.ny, new_ny);
  const double gain = static_cast<double>(dst.slice_size()) / static_cast<double>(src.slice_size());

  for (int z = 0; z < src.nz; ++z)
    for (int y = 0; y < src.ny; ++y) {
      if (ymap[y] < 0) continue;
      for (int x = 0; x < src.nx; ++x) {
        if (xmap[x] < 0) continue;
        resized.at(xmap[x], ymap[y], z) = gain * spectrum.at(x, y, z);
      }
    }
  return ifft2_slicewise(resized);
}

}  // namespace qsmfine
