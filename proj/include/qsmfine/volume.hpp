#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "qsmfine/error.hpp"

namespace qsmfine {

using Complex = std::complex<double>;

// Matrix size and voxel edge lengths (mm). Storage order is z-slowest,
// x-fastest everywhere in the library.
struct VoxelGrid {
  int nx = 0, ny = 0, nz = 0;
  double dx = 1.0, dy = 1.0, dz = 1.0;

  static constexpr int kMinExtent = 4;
  static constexpr double kSpacingTolerance = 1e-9;

  std::size_t size() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  std::size_t slice_size() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny);
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * ny + y) * nx + x;
  }

  bool valid() const {
    return nx >= kMinExtent && ny >= kMinExtent && nz >= kMinExtent && dx > 0 &&
           dy > 0 && dz > 0 && std::isfinite(dx) && std::isfinite(dy) &&
           std::isfinite(dz);
  }
  void validate() const;

  friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
    return a.nx == b.nx && a.ny == b.ny && a.nz == b.nz &&
           std::abs(a.dx - b.dx) <= kSpacingTolerance &&
           std::abs(a.dy - b.dy) <= kSpacingTolerance &&
           std::abs(a.dz - b.dz) <= kSpacingTolerance;
  }
};

template <typename T>
class Volume {
 public:
  using value_type = T;

  Volume() = default;
  explicit Volume(const VoxelGrid& grid, T fill = T{}) : grid_(grid) {
    grid_.validate();
    data_.assign(grid_.size(), fill);
  }
  Volume(const VoxelGrid& grid, std::vector<T> data) : grid_(grid), data_(std::move(data)) {
    grid_.validate();
    require(data_.size() == grid_.size(), "volume data length does not match grid");
  }

  const VoxelGrid& grid() const { return grid_; }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(int x, int y, int z) { return data_[grid_.index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return data_[grid_.index(x, y, z)]; }

 private:
  VoxelGrid grid_;
  std::vector<T> data_;
};

using RealVolume = Volume<double>;
using ComplexVolume = Volume<Complex>;
using LabelVolume = Volume<int>;

bool all_finite(const RealVolume& v);
bool all_finite(const ComplexVolume& v);

ComplexVolume to_complex(const RealVolume& v);
RealVolume real_part(const ComplexVolume& v);

void require_same_grid(const VoxelGrid& a, const VoxelGrid& b, const char* what);

// Signed DFT frequency index of bin i for an n-point transform, in
// [-floor(n/2), ceil(n/2) - 1].
inline int signed_frequency(int i, int n) { return i < (n + 1) / 2 ? i : i - n; }

// Unnormalised forward 3D DFT, DC at (0,0,0).
ComplexVolume fft3(const ComplexVolume& v);
// Inverse 3D DFT carrying the 1/N factor.
ComplexVolume ifft3(const ComplexVolume& v);
// Independent 2D DFT of every axial slice; the inverse carries 1/(nx*ny).
ComplexVolume fft2_slicewise(const ComplexVolume& v);
ComplexVolume ifft2_slicewise(const ComplexVolume& v);

// In-plane k-space zero-padding (upsampling) or truncation (downsampling) to
// new_nx x new_ny. Intensities are preserved: a constant image keeps its value.
ComplexVolume resample_kspace(const ComplexVolume& v, int new_nx, int new_ny);

}  // namespace qsmfine
