#include "qsmfine/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace qsmfine::metrics {
namespace {

double norm2(const RealVolume& v) {
  double s = 0.0;
  for (double a : v.data()) s += a * a;
  return std::sqrt(s);
}

double diff_norm2(const RealVolume& a, const RealVolume& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::pair<double, double> min_max(const RealVolume& v) {
  const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
  return {*lo, *hi};
}

// Plain 3D array used for intermediate sums.
struct Grid3 {
  int nx, ny, nz;
  std::vector<double> v;
  Grid3(int x, int y, int z) : nx(x), ny(y), nz(z), v(static_cast<std::size_t>(x) * y * z) {}
  double& operator()(int x, int y, int z) { return v[(static_cast<std::size_t>(z) * ny + y) * nx + x]; }
  double operator()(int x, int y, int z) const {
    return v[(static_cast<std::size_t>(z) * ny + y) * nx + x];
  }
};

// Mean over every w^3 window fully inside the array.
Grid3 box_mean_valid(const Grid3& in, int w) {
  Grid3 a(in.nx - w + 1, in.ny, in.nz);
  for (int z = 0; z < in.nz; ++z)
    for (int y = 0; y < in.ny; ++y)
      for (int x = 0; x < a.nx; ++x) {
        double s = 0.0;
        for (int k = 0; k < w; ++k) s += in(x + k, y, z);
        a(x, y, z) = s;
      }
  Grid3 b(a.nx, in.ny - w + 1, in.nz);
  for (int z = 0; z < in.nz; ++z)
    for (int y = 0; y < b.ny; ++y)
      for (int x = 0; x < b.nx; ++x) {
        double s = 0.0;
        for (int k = 0; k < w; ++k) s += a(x, y + k, z);
        b(x, y, z) = s;
      }
  Grid3 c(b.nx, b.ny, in.nz - w + 1);
  const double inv = 1.0 / (static_cast<double>(w) * w * w);
  for (int z = 0; z < c.nz; ++z)
    for (int y = 0; y < c.ny; ++y)
      for (int x = 0; x < c.nx; ++x) {
        double s = 0.0;
        for (int k = 0; k < w; ++k) s += b(x, y, z + k);
        c(x, y, z) = s * inv;
      }
  return c;
}

}  // namespace

double rmse(const RealVolume& x, const RealVolume& ref) {
  require_same_grid(x.grid(), ref.grid(), "rmse");
  const double denom = norm2(ref);
  require(denom > 0.0, "rmse: reference has zero norm");
  return 100.0 * diff_norm2(x, ref) / denom;
}

double psnr(const RealVolume& x, const RealVolume& ref) {
  require_same_grid(x.grid(), ref.grid(), "psnr");
  const auto [lo, hi] = min_max(ref);
  require(hi > lo, "psnr: reference has zero range");
  const double rms = diff_norm2(x, ref) / std::sqrt(static_cast<double>(x.size()));
  if (rms == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 20.0 * std::log10((hi - lo) / rms));
}

double ssim3d(const RealVolume& x, const RealVolume& ref, const SsimOptions& opt) {
  require_same_grid(x.grid(), ref.grid(), "ssim3d");
  const auto& g = x.grid();
  require(g.nx >= opt.window && g.ny >= opt.window && g.nz >= opt.window,
          "ssim3d: volume smaller than the SSIM window");
  // Dynamic range and offset are taken jointly over both volumes so the
  // index stays symmetric; for estimates inside the reference range this is
  // the reference range.
  const auto [lo_r, hi_r] = min_max(ref);
  const auto [lo_x, hi_x] = min_max(x);
  const double lo = std::min(lo_r, lo_x), hi = std::max(hi_r, hi_x);
  require(hi > lo, "ssim3d: zero dynamic range");
  const double L = hi - lo;
  const double c1 = (opt.k1 * L) * (opt.k1 * L), c2 = (opt.k2 * L) * (opt.k2 * L);

  Grid3 a(g.nx, g.ny, g.nz), b(g.nx, g.ny, g.nz), aa(g.nx, g.ny, g.nz), bb(g.nx, g.ny, g.nz),
      ab(g.nx, g.ny, g.nz);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double p = x[i] - lo, q = ref[i] - lo;
    a.v[i] = p;
    b.v[i] = q;
    aa.v[i] = p * p;
    bb.v[i] = q * q;
    ab.v[i] = p * q;
  }
  const Grid3 ma = box_mean_valid(a, opt.window), mb = box_mean_valid(b, opt.window);
  const Grid3 maa = box_mean_valid(aa, opt.window), mbb = box_mean_valid(bb, opt.window);
  const Grid3 mab = box_mean_valid(ab, opt.window);
  double total = 0.0;
  for (std::size_t i = 0; i < ma.v.size(); ++i) {
    const double mx = ma.v[i], my = mb.v[i];
    const double vx = maa.v[i] - mx * mx, vy = mbb.v[i] - my * my, cxy = mab.v[i] - mx * my;
    total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return std::clamp(total / static_cast<double>(ma.v.size()), -1.0, 1.0);
}

std::vector<double> log_kernel(double sigma, int support) {
  require(sigma > 0.0 && support >= 3 && support % 2 == 1,
          "LoG kernel needs sigma > 0 and an odd support >= 3");
  const int h = support / 2;
  const std::size_t n = static_cast<std::size_t>(support) * support * support;
  std::vector<double> gauss(n), r2(n);
  double gsum = 0.0;
  std::size_t i = 0;
  for (int z = -h; z <= h; ++z)
    for (int y = -h; y <= h; ++y)
      for (int x = -h; x <= h; ++x, ++i) {
        r2[i] = x * x + y * y + z * z;
        gauss[i] = std::exp(-r2[i] / (2.0 * sigma * sigma));
        gsum += gauss[i];
      }
  std::vector<double> k(n);
  const double s2 = sigma * sigma;
  double ksum = 0.0;
  for (i = 0; i < n; ++i) {
    k[i] = gauss[i] / gsum * (r2[i] - 3.0 * s2) / (s2 * s2);
    ksum += k[i];
  }
  for (double& v : k) v -= ksum / static_cast<double>(n);
  return k;
}

namespace {

RealVolume apply_log(const RealVolume& v, const std::vector<double>& k, int support) {
  const auto& g = v.grid();
  const int h = support / 2;
  RealVolume out(g);
  auto clampi = [](int a, int n) { return a < 0 ? 0 : a >= n ? n - 1 : a; };
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x) {
        double s = 0.0;
        std::size_t i = 0;
        for (int dz = -h; dz <= h; ++dz) {
          const int zz = clampi(z + dz, g.nz);
          for (int dy = -h; dy <= h; ++dy) {
            const int yy = clampi(y + dy, g.ny);
            const double* row = &v.at(0, yy, zz);
            for (int dx = -h; dx <= h; ++dx, ++i) s += k[i] * row[clampi(x + dx, g.nx)];
          }
        }
        out.at(x, y, z) = s;
      }
  return out;
}

}  // namespace

double hfen(const RealVolume& x, const RealVolume& ref, const HfenOptions& opt) {
  require_same_grid(x.grid(), ref.grid(), "hfen");
  const auto k = log_kernel(opt.sigma, opt.support);
  const RealVolume lx = apply_log(x, k, opt.support);
  const RealVolume lr = apply_log(ref, k, opt.support);
  const auto& g = x.grid();
  const int h = opt.interior_only ? opt.support / 2 : 0;
  require(g.nx > 2 * h && g.ny > 2 * h && g.nz > 2 * h,
          "hfen: volume too small for interior evaluation");
  double num = 0.0, den = 0.0, energy = 0.0;
  for (double v : ref.data()) energy += v * v;
  for (int z = h; z < g.nz - h; ++z)
    for (int y = h; y < g.ny - h; ++y)
      for (int xx = h; xx < g.nx - h; ++xx) {
        const double d = lx.at(xx, y, z) - lr.at(xx, y, z);
        num += d * d;
        den += lr.at(xx, y, z) * lr.at(xx, y, z);
      }
  // Float round-off of the zero-mean kernel leaves a tiny residual on flat data.
  require(den > 1e-20 * energy, "hfen: reference has no high-frequency content");
  return std::sqrt(num / den);
}

std::map<int, double> roi_means(const RealVolume& x, const LabelVolume& labels) {
  require_same_grid(x.grid(), labels.grid(), "roi_means");
  std::map<int, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (labels[i] == 0) continue;
    auto& [s, n] = acc[labels[i]];
    s += x[i];
    ++n;
  }
  std::map<int, double> out;
  for (const auto& [id, sn] : acc) out[id] = sn.first / static_cast<double>(sn.second);
  return out;
}

MetricsReport evaluate(const RealVolume& x, const RealVolume& ref, const LabelVolume* labels,
                       const HfenOptions& hfen_opt) {
  MetricsReport r;
  r.rmse = rmse(x, ref);
  r.psnr = psnr(x, ref);
  r.ssim = ssim3d(x, ref);
  r.hfen = hfen(x, ref, hfen_opt);
  if (labels) r.roi_means = roi_means(x, *labels);
  return r;
}

}  // namespace qsmfine::metrics
