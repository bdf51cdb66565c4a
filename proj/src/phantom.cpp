#include "qsmfine/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "qsmfine/qvol.hpp"

namespace qsmfine {

using nlohmann::json;

const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::CylinderZ: return "cylinder-z";
    case ShapeKind::Cuboid: return "cuboid";
  }
  return "?";
}

ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "sphere") return ShapeKind::Sphere;
  if (s == "cylinder-z") return ShapeKind::CylinderZ;
  if (s == "cuboid") return ShapeKind::Cuboid;
  throw ValidationError("unknown shape kind '" + s + "'");
}

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

namespace {

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ValidationError("unknown split '" + s + "'");
}

}  // namespace

bool Shape::contains(double x, double y, double z) const {
  const double px = x - center[0], py = y - center[1], pz = z - center[2];
  switch (kind) {
    case ShapeKind::Sphere: return px * px + py * py + pz * pz <= size[0] * size[0];
    case ShapeKind::CylinderZ:
      return px * px + py * py <= size[0] * size[0] && std::abs(pz) <= size[2];
    case ShapeKind::Cuboid:
      return std::abs(px) <= size[0] && std::abs(py) <= size[1] && std::abs(pz) <= size[2];
  }
  return false;
}

void PhantomSpec::validate() const {
  grid.validate();
  const double ext[3] = {grid.nx * grid.dx, grid.ny * grid.dy, grid.nz * grid.dz};
  for (const Shape& s : shapes) {
    require(std::abs(s.chi) <= Shape::kMaxAbsChi, "shape chi exceeds 10 ppm sanity bound");
    bool ok = s.size[0] > 0.0;
    if (s.kind != ShapeKind::Sphere) ok = ok && s.size[2] > 0.0;
    if (s.kind == ShapeKind::Cuboid) ok = ok && s.size[1] > 0.0;
    require(ok, "shape size components must be positive");
    for (int a = 0; a < 3; ++a)
      require(s.center[a] >= 0.0 && s.center[a] <= ext[a], "shape centre lies outside the grid");
  }
}

RealVolume rasterize_phantom(const PhantomSpec& spec) {
  spec.validate();
  const VoxelGrid& g = spec.grid;
  RealVolume chi(g, spec.background_chi);
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x) {
        const auto p = voxel_center(g, x, y, z);
        for (auto it = spec.shapes.rbegin(); it != spec.shapes.rend(); ++it)
          if (it->contains(p[0], p[1], p[2])) {
            chi.at(x, y, z) = it->chi;
            break;
          }
      }
  return chi;
}

LabelVolume rasterize_labels(const PhantomSpec& spec) {
  spec.validate();
  const VoxelGrid& g = spec.grid;
  LabelVolume labels(g, 0);
  const int n = static_cast<int>(spec.shapes.size());
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x) {
        const auto p = voxel_center(g, x, y, z);
        for (int s = n - 1; s >= 0; --s)
          if (spec.shapes[s].contains(p[0], p[1], p[2])) {
            labels.at(x, y, z) = s + 1;
            break;
          }
      }
  return labels;
}

RealVolume analytic_sphere_field(const std::array<double, 3>& center, double radius_mm,
                                 double delta_chi_ppm, const VoxelGrid& grid) {
  RealVolume field(grid);
  const double a3 = radius_mm * radius_mm * radius_mm;
  for (int z = 0; z < grid.nz; ++z)
    for (int y = 0; y < grid.ny; ++y)
      for (int x = 0; x < grid.nx; ++x) {
        const auto p = voxel_center(grid, x, y, z);
        const double px = p[0] - center[0], py = p[1] - center[1], pz = p[2] - center[2];
        const double r2 = px * px + py * py + pz * pz;
        if (r2 <= radius_mm * radius_mm) continue;
        const double r = std::sqrt(r2);
        const double cos2 = pz * pz / r2;
        field.at(x, y, z) = delta_chi_ppm / 3.0 * a3 / (r2 * r) * (3.0 * cos2 - 1.0);
      }
  return field;
}

RealVolume synth_magnitude(const PhantomSpec& spec) {
  if (spec.magnitude_model == MagnitudeModel::Uniform) return RealVolume(spec.grid, 1.0);
  RealVolume chi = rasterize_phantom(spec);
  double peak = 0.0;
  for (double v : chi.data()) peak = std::max(peak, std::abs(v));
  RealVolume m(spec.grid, 1.0);
  if (peak == 0.0) return m;
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = std::clamp(1.0 + 0.2 * chi[i] / peak, 0.1, 2.0);
  return m;
}

VoxelGrid desk_grid() { return VoxelGrid{64, 64, 16, 0.75, 0.75, 3.0}; }

PhantomSpec random_phantom(const VoxelGrid& grid, std::uint64_t seed, MagnitudeModel model) {
  grid.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(5, 15);
  std::uniform_int_distribution<int> kind(0, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> chi(-0.2, 0.8);
  std::uniform_real_distribution<double> radius(3.0, 12.0);

  PhantomSpec spec;
  spec.grid = grid;
  spec.magnitude_model = model;
  spec.rng_seed = seed;
  const double ext[3] = {grid.nx * grid.dx, grid.ny * grid.dy, grid.nz * grid.dz};
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    Shape s;
    s.kind = static_cast<ShapeKind>(kind(rng));
    // Keep centres off the border so the periodic FFT model sees compact sources.
    for (int a = 0; a < 3; ++a) s.center[a] = ext[a] * (0.2 + 0.6 * unit(rng));
    s.size = {radius(rng), radius(rng), radius(rng)};
    if (s.kind == ShapeKind::CylinderZ) s.size[1] = s.size[0];
    s.chi = chi(rng);
    spec.shapes.push_back(s);
  }
  return spec;
}

namespace {

// Values are stored as float32 on disk; quantising inputs up front keeps
// the stored HPFP consistent with the stored label and magnitude.
void quantize(RealVolume& v) {
  for (double& a : v.storage()) a = static_cast<double>(static_cast<float>(a));
}

}  // namespace

CaseVolumes synthesize_case(const PhantomSpec& phantom, const DatasetOptions& opts) {
  CaseVolumes c{rasterize_phantom(phantom), synth_magnitude(phantom), RealVolume(), RealVolume()};
  quantize(c.chi);
  quantize(c.magnitude);
  c.phase = dipole_convolve(c.chi, make_dipole_kernel(phantom.grid));
  for (double& p : c.phase.storage()) p *= opts.scan.phase_per_ppm();
  const HannFilter h = make_hann_transfer(phantom.grid, opts.fc, opts.beta);
  c.hpfp = hpfp(synth_complex(c.magnitude, c.phase), h);
  return c;
}

namespace {

std::uint64_t case_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 of (base, index): distinct indices give distinct streams.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

json grid_to_json(const VoxelGrid& g) {
  return {{"nx", g.nx}, {"ny", g.ny}, {"nz", g.nz}, {"dx", g.dx}, {"dy", g.dy}, {"dz", g.dz}};
}

VoxelGrid grid_from_json(const json& j) {
  VoxelGrid g{j.at("nx").get<int>(), j.at("ny").get<int>(), j.at("nz").get<int>(),
              j.at("dx").get<double>(), j.at("dy").get<double>(), j.at("dz").get<double>()};
  g.validate();
  return g;
}

json shape_to_json(const Shape& s) {
  return {{"kind", to_string(s.kind)}, {"center", s.center}, {"size", s.size}, {"chi", s.chi}};
}

Shape shape_from_json(const json& j) {
  Shape s;
  s.kind = shape_kind_from_string(j.at("kind").get<std::string>());
  s.center = j.at("center").get<std::array<double, 3>>();
  s.size = j.at("size").get<std::array<double, 3>>();
  s.chi = j.at("chi").get<double>();
  return s;
}

}  // namespace

const char* to_string(MagnitudeModel m) {
  return m == MagnitudeModel::Uniform ? "uniform" : "shape-contrast";
}

MagnitudeModel magnitude_model_from_string(const std::string& s) {
  if (s == "uniform") return MagnitudeModel::Uniform;
  if (s == "shape-contrast") return MagnitudeModel::ShapeContrast;
  throw ValidationError("unknown magnitude model '" + s + "'");
}

std::vector<const CaseEntry*> DatasetManifest::split(Split s) const {
  std::vector<const CaseEntry*> out;
  for (const auto& c : cases)
    if (c.split == s) out.push_back(&c);
  return out;
}

DatasetManifest make_dataset(const DatasetOptions& opts, const std::filesystem::path& out_dir) {
  require(opts.n_train >= 1 && opts.n_val >= 1 && opts.n_test >= 1,
          "dataset split counts must be at least 1");
  opts.grid.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw RuntimeFailure("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.root = out_dir;
  m.options = opts;
  const std::pair<Split, int> splits[] = {
      {Split::Train, opts.n_train}, {Split::Val, opts.n_val}, {Split::Test, opts.n_test}};
  std::uint64_t index = 0;
  for (const auto& [split, n] : splits)
    for (int i = 0; i < n; ++i, ++index) {
      CaseEntry c;
      char id[32];
      std::snprintf(id, sizeof id, "%s_%03d", to_string(split), i);
      c.id = id;
      c.split = split;
      c.seed = case_seed(opts.seed, index);
      c.phantom = random_phantom(opts.grid, c.seed, opts.magnitude_model);
      c.chi = fs::path(c.id) / "chi.qvol";
      c.magnitude = fs::path(c.id) / "magnitude.qvol";
      c.phase = fs::path(c.id) / "phase.qvol";
      c.hpfp = fs::path(c.id) / "hpfp.qvol";

      const CaseVolumes v = synthesize_case(c.phantom, opts);
      fs::create_directories(out_dir / c.id, ec);
      if (ec) throw RuntimeFailure("cannot create case directory: " + ec.message());
      qvol::write(out_dir / c.chi, v.chi);
      qvol::write(out_dir / c.magnitude, v.magnitude);
      qvol::write(out_dir / c.phase, v.phase);
      qvol::write(out_dir / c.hpfp, v.hpfp);
      m.cases.push_back(std::move(c));
    }

  json j;
  j["format"] = "qsmfine-dataset-1";
  j["seed"] = opts.seed;
  j["fc"] = opts.fc;
  j["beta"] = opts.beta;
  j["grid"] = grid_to_json(opts.grid);
  j["scan"] = {{"b0", opts.scan.b0()}, {"te", opts.scan.te()}, {"gamma_bar", opts.scan.gamma_bar()}};
  j["magnitude_model"] = to_string(opts.magnitude_model);
  j["counts"] = {{"train", opts.n_train}, {"val", opts.n_val}, {"test", opts.n_test}};
  j["cases"] = json::array();
  for (const auto& c : m.cases) {
    json shapes = json::array();
    for (const auto& s : c.phantom.shapes) shapes.push_back(shape_to_json(s));
    j["cases"].push_back({{"id", c.id},
                          {"split", to_string(c.split)},
                          {"seed", c.seed},
                          {"fc", opts.fc},
                          {"voxel_size", {opts.grid.dx, opts.grid.dy, opts.grid.dz}},
                          {"background_chi", c.phantom.background_chi},
                          {"shapes", shapes},
                          {"files",
                           {{"chi", c.chi.generic_string()},
                            {"magnitude", c.magnitude.generic_string()},
                            {"phase", c.phase.generic_string()},
                            {"hpfp", c.hpfp.generic_string()}}}});
  }
  std::ofstream os(out_dir / "manifest.json");
  if (!os) throw RuntimeFailure("cannot write " + (out_dir / "manifest.json").string());
  os << j.dump(2) << '\n';
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw RuntimeFailure("dataset manifest not found: " + manifest_path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    DatasetManifest m;
    m.root = manifest_path.parent_path();
    auto& o = m.options;
    o.seed = j.at("seed").get<std::uint64_t>();
    o.fc = j.at("fc").get<double>();
    o.beta = j.at("beta").get<double>();
    o.grid = grid_from_json(j.at("grid"));
    const auto& s = j.at("scan");
    o.scan = ScanParams(s.at("b0").get<double>(), s.at("te").get<double>(),
                        s.at("gamma_bar").get<double>());
    o.magnitude_model = magnitude_model_from_string(j.at("magnitude_model").get<std::string>());
    o.n_train = j.at("counts").at("train").get<int>();
    o.n_val = j.at("counts").at("val").get<int>();
    o.n_test = j.at("counts").at("test").get<int>();
    for (const auto& jc : j.at("cases")) {
      CaseEntry c;
      c.id = jc.at("id").get<std::string>();
      c.split = split_from_string(jc.at("split").get<std::string>());
      c.seed = jc.at("seed").get<std::uint64_t>();
      c.phantom.grid = o.grid;
      c.phantom.rng_seed = c.seed;
      c.phantom.magnitude_model = o.magnitude_model;
      c.phantom.background_chi = jc.at("background_chi").get<double>();
      for (const auto& js : jc.at("shapes")) c.phantom.shapes.push_back(shape_from_json(js));
      const auto& f = jc.at("files");
      c.chi = f.at("chi").get<std::string>();
      c.magnitude = f.at("magnitude").get<std::string>();
      c.phase = f.at("phase").get<std::string>();
      c.hpfp = f.at("hpfp").get<std::string>();
      m.cases.push_back(std::move(c));
    }
    return m;
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

CaseVolumes load_case(const DatasetManifest& m, const CaseEntry& c) {
  return CaseVolumes{qvol::read_real(m.resolve(c.chi)), qvol::read_real(m.resolve(c.magnitude)),
                     qvol::read_real(m.resolve(c.phase)), qvol::read_real(m.resolve(c.hpfp))};
}

}  // namespace qsmfine
