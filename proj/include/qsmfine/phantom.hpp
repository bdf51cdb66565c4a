#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qsmfine/physics.hpp"
#include "qsmfine/volume.hpp"

namespace qsmfine {

enum class ShapeKind { Sphere, CylinderZ, Cuboid };

const char* to_string(ShapeKind k);
ShapeKind shape_kind_from_string(const std::string& s);

// Position and extents in mm. Sphere uses size[0] as radius; a z-aligned
// cylinder uses size[0] as radius and size[2] as half-height; a cuboid uses
// all three as half-extents.
struct Shape {
  ShapeKind kind = ShapeKind::Sphere;
  std::array<double, 3> center{};
  std::array<double, 3> size{};
  double chi = 0.0;  // ppm

  static constexpr double kMaxAbsChi = 10.0;
  bool contains(double x, double y, double z) const;
};

enum class MagnitudeModel { Uniform, ShapeContrast };
const char* to_string(MagnitudeModel m);
MagnitudeModel magnitude_model_from_string(const std::string& s);

struct PhantomSpec {
  VoxelGrid grid;
  std::vector<Shape> shapes;  // later shapes paint over earlier ones
  double background_chi = 0.0;
  MagnitudeModel magnitude_model = MagnitudeModel::Uniform;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Physical position (mm) of the centre of voxel (x, y, z).
inline std::array<double, 3> voxel_center(const VoxelGrid& g, int x, int y, int z) {
  return {(x + 0.5) * g.dx, (y + 0.5) * g.dy, (z + 0.5) * g.dz};
}

RealVolume rasterize_phantom(const PhantomSpec& spec);
// Label of the last covering shape (1-based), 0 for background.
LabelVolume rasterize_labels(const PhantomSpec& spec);

// Exterior field (dchi/3)(a/r)^3(3cos^2(theta) - 1) of a uniform sphere, zero inside.
RealVolume analytic_sphere_field(const std::array<double, 3>& center, double radius_mm,
                                 double delta_chi_ppm, const VoxelGrid& grid);

RealVolume synth_magnitude(const PhantomSpec& spec);

// Random brain-like phantom: 5-15 shapes, chi in [-0.2, 0.8] ppm, radii 3-12 mm.
PhantomSpec random_phantom(const VoxelGrid& grid, std::uint64_t seed,
                           MagnitudeModel model = MagnitudeModel::ShapeContrast);

// Default desk grid: 64 x 64 x 16 at 0.75 x 0.75 x 3 mm.
VoxelGrid desk_grid();

struct DatasetOptions {
  int n_train = 6, n_val = 2, n_test = 4;
  VoxelGrid grid = desk_grid();
  std::uint64_t seed = 1234;
  double fc = 0.5;
  double beta = HannFilter::kDefaultBeta;
  ScanParams scan;
  MagnitudeModel magnitude_model = MagnitudeModel::ShapeContrast;
};

enum class Split { Train, Val, Test };
const char* to_string(Split s);

struct CaseEntry {
  std::string id;
  Split split = Split::Train;
  std::uint64_t seed = 0;
  PhantomSpec phantom;
  // Paths relative to the manifest directory.
  std::filesystem::path chi, magnitude, phase, hpfp;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory containing manifest.json
  DatasetOptions options;
  std::vector<CaseEntry> cases;

  std::vector<const CaseEntry*> split(Split s) const;
  std::filesystem::path resolve(const std::filesystem::path& rel) const { return root / rel; }
};

// In-memory volumes of a single case.
struct CaseVolumes {
  RealVolume chi;        // ppm
  RealVolume magnitude;
  RealVolume phase;      // tissue phase, rad
  RealVolume hpfp;       // filtered phase at the generating fc
};

CaseVolumes synthesize_case(const PhantomSpec& phantom, const DatasetOptions& opts);

// Generates every case, writes QVOL files under out_dir and out_dir/manifest.json.
DatasetManifest make_dataset(const DatasetOptions& opts, const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& manifest_path);
CaseVolumes load_case(const DatasetManifest& m, const CaseEntry& c);

}  // namespace qsmfine
