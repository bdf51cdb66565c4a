#include "qsmfine/harness.hpp"

#include <png.h>

#include <atomic>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <thread>

#include "qsmfine/qvol.hpp"

namespace qsmfine::harness {
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

double parse_double(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  // Fractions such as 3/8 are accepted.
  if (const auto slash = t.find('/'); slash != std::string::npos)
    return parse_double(key, t.substr(0, slash)) / parse_double(key, t.substr(slash + 1));
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == t.size() && !t.empty(), key + ": expected a number, got '" + text + "'");
  return v;
}

long long parse_int(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == t.size() && !t.empty(), key + ": expected an integer, got '" + text + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  require(!t.empty() && t.find_first_not_of("0123456789") == std::string::npos,
          key + ": expected a non-negative integer, got '" + text + "'");
  try {
    return std::stoull(t);
  } catch (const std::exception&) {
    throw ValidationError(key + ": integer out of range");
  }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  for (const auto& item : split(text, ',')) out.push_back(static_cast<int>(parse_int(key, item)));
  return out;
}

std::array<int, 3> parse_triple(const std::string& key, const std::string& text) {
  const auto v = parse_int_list(key, text);
  require(v.size() == 3, key + ": expected three comma-separated integers");
  return {v[0], v[1], v[2]};
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

const std::map<std::string, std::map<std::string, Setter>>& setters() {
  static const std::map<std::string, std::map<std::string, Setter>> table = {
      {"dataset",
       {
           {"nx", [](auto& c, auto& v) { c.dataset.grid.nx = static_cast<int>(parse_int("dataset.nx", v)); }},
           {"ny", [](auto& c, auto& v) { c.dataset.grid.ny = static_cast<int>(parse_int("dataset.ny", v)); }},
           {"nz", [](auto& c, auto& v) { c.dataset.grid.nz = static_cast<int>(parse_int("dataset.nz", v)); }},
           {"dx", [](auto& c, auto& v) { c.dataset.grid.dx = parse_double("dataset.dx", v); }},
           {"dy", [](auto& c, auto& v) { c.dataset.grid.dy = parse_double("dataset.dy", v); }},
           {"dz", [](auto& c, auto& v) { c.dataset.grid.dz = parse_double("dataset.dz", v); }},
           {"n_train", [](auto& c, auto& v) { c.dataset.n_train = static_cast<int>(parse_int("dataset.n_train", v)); }},
           {"n_val", [](auto& c, auto& v) { c.dataset.n_val = static_cast<int>(parse_int("dataset.n_val", v)); }},
           {"n_test", [](auto& c, auto& v) { c.dataset.n_test = static_cast<int>(parse_int("dataset.n_test", v)); }},
           {"seed", [](auto& c, auto& v) { c.dataset.seed = parse_u64("dataset.seed", v); }},
           {"fc", [](auto& c, auto& v) { c.dataset.fc = parse_double("dataset.fc", v); }},
           {"beta", [](auto& c, auto& v) { c.dataset.beta = parse_double("dataset.beta", v); }},
           {"magnitude_model",
            [](auto& c, auto& v) { c.dataset.magnitude_model = magnitude_model_from_string(trim(v)); }},
       }},
      {"physics",
       {
           {"b0", [](auto& c, auto& v) {
              c.dataset.scan = ScanParams(parse_double("physics.b0", v), c.dataset.scan.te(), c.dataset.scan.gamma_bar());
            }},
           {"te", [](auto& c, auto& v) {
              c.dataset.scan = ScanParams(c.dataset.scan.b0(), parse_double("physics.te", v), c.dataset.scan.gamma_bar());
            }},
           {"gamma_bar", [](auto& c, auto& v) {
              c.dataset.scan = ScanParams(c.dataset.scan.b0(), c.dataset.scan.te(), parse_double("physics.gamma_bar", v));
            }},
       }},
      {"network",
       {
           {"levels", [](auto& c, auto& v) { c.network.levels = static_cast<int>(parse_int("network.levels", v)); }},
           {"widths", [](auto& c, auto& v) { c.network.widths = parse_int_list("network.widths", v); }},
           {"stages", [](auto& c, auto& v) { c.stages = static_cast<int>(parse_int("network.stages", v)); }},
           {"seed", [](auto& c, auto& v) { c.network_seed = parse_u64("network.seed", v); }},
       }},
      {"training",
       {
           {"epochs", [](auto& c, auto& v) { c.training.epochs = static_cast<int>(parse_int("training.epochs", v)); }},
           {"learning_rate", [](auto& c, auto& v) { c.training.learning_rate = parse_double("training.learning_rate", v); }},
           {"patch", [](auto& c, auto& v) { c.training.patch = parse_triple("training.patch", v); }},
           {"stride", [](auto& c, auto& v) { c.training.stride = parse_triple("training.stride", v); }},
           {"batch_size", [](auto& c, auto& v) { c.training.batch_size = static_cast<int>(parse_int("training.batch_size", v)); }},
           {"seed", [](auto& c, auto& v) { c.training.seed = parse_u64("training.seed", v); }},
           {"checkpoint_every", [](auto& c, auto& v) { c.training.checkpoint_every = static_cast<int>(parse_int("training.checkpoint_every", v)); }},
       }},
      {"finetune",
       {
           {"learning_rate", [](auto& c, auto& v) { c.finetune.learning_rate = parse_double("finetune.learning_rate", v); }},
           {"threshold", [](auto& c, auto& v) { c.finetune.threshold = parse_double("finetune.threshold", v); }},
           {"fluctuation_window", [](auto& c, auto& v) { c.finetune.fluctuation_window = static_cast<int>(parse_int("finetune.fluctuation_window", v)); }},
           {"max_iterations", [](auto& c, auto& v) { c.finetune.max_iterations = static_cast<int>(parse_int("finetune.max_iterations", v)); }},
           {"fc", [](auto& c, auto& v) { c.finetune.fc = parse_double("finetune.fc", v); }},
           {"beta", [](auto& c, auto& v) { c.finetune.beta = parse_double("finetune.beta", v); }},
       }},
      {"sweep",
       {
           {"fc_list", [](auto& c, auto& v) {
              c.fc_list.clear();
              for (const auto& item : split(v, ',')) c.fc_list.push_back(parse_double("sweep.fc_list", item));
            }},
           {"matrices", [](auto& c, auto& v) {
              c.matrices.clear();
              for (const auto& item : split(v, ',')) {
                const auto xy = split(item, 'x');
                require(xy.size() == 2, "sweep.matrices: expected entries like 80x80");
                c.matrices.push_back({static_cast<int>(parse_int("sweep.matrices", xy[0])),
                                      static_cast<int>(parse_int("sweep.matrices", xy[1]))});
              }
            }},
       }},
      {"metrics",
       {
           {"hfen_sigma", [](auto& c, auto& v) { c.hfen.sigma = parse_double("metrics.hfen_sigma", v); }},
           {"hfen_support", [](auto& c, auto& v) { c.hfen.support = static_cast<int>(parse_int("metrics.hfen_support", v)); }},
       }},
      {"output",
       {
           {"dir", [](auto& c, auto& v) { c.out_dir = trim(v); }},
       }},
  };
  return table;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset.grid.validate();
  require(dataset.n_train >= 1 && dataset.n_val >= 1 && dataset.n_test >= 1,
          "dataset needs at least one train, validation and test case");
  require(dataset.fc > 0.0 && dataset.fc <= 1.0, "dataset.fc must lie in (0, 1]");
  require(dataset.beta > 0.0, "dataset.beta must be positive");
  network.validate();
  require(stages >= 1, "network.stages must be at least 1");
  training.validate(network.divisor());
  finetune.validate();
  require(!fc_list.empty(), "sweep.fc_list must not be empty");
  for (double fc : fc_list) require(fc > 0.0 && fc <= 1.0, "sweep.fc_list entries must lie in (0, 1]");
  for (const auto& m : matrices)
    require(m[0] >= VoxelGrid::kMinExtent && m[1] >= VoxelGrid::kMinExtent,
            "sweep.matrices entries must be at least 4x4");
  require(hfen.sigma > 0.0 && hfen.support >= 3 && hfen.support % 2 == 1,
          "metrics.hfen_support must be odd and >= 3, hfen_sigma positive");
  require(!out_dir.empty(), "output.dir must not be empty");
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  const auto& g = dataset.grid;
  os << "dataset.grid=" << g.nx << ',' << g.ny << ',' << g.nz << ',' << fmt(g.dx) << ','
     << fmt(g.dy) << ',' << fmt(g.dz) << '\n';
  os << "dataset.counts=" << dataset.n_train << ',' << dataset.n_val << ',' << dataset.n_test << '\n';
  os << "dataset.seed=" << dataset.seed << '\n';
  os << "dataset.fc=" << fmt(dataset.fc) << '\n';
  os << "dataset.beta=" << fmt(dataset.beta) << '\n';
  os << "dataset.magnitude_model=" << to_string(dataset.magnitude_model) << '\n';
  os << "physics=" << fmt(dataset.scan.b0()) << ',' << fmt(dataset.scan.te()) << ','
     << fmt(dataset.scan.gamma_bar()) << '\n';
  os << "network.levels=" << network.levels << '\n';
  os << "network.widths=";
  for (std::size_t i = 0; i < network.widths.size(); ++i) os << (i ? "," : "") << network.widths[i];
  os << '\n';
  os << "network.stages=" << stages << '\n';
  os << "network.seed=" << network_seed << '\n';
  os << "training=" << training.epochs << ',' << fmt(training.learning_rate) << ','
     << training.batch_size << ',' << training.seed << ',' << training.checkpoint_every << '\n';
  os << "training.patch=" << training.patch[0] << ',' << training.patch[1] << ',' << training.patch[2]
     << '\n';
  os << "training.stride=" << training.stride[0] << ',' << training.stride[1] << ','
     << training.stride[2] << '\n';
  os << "finetune=" << fmt(finetune.learning_rate) << ',' << fmt(finetune.threshold) << ','
     << finetune.fluctuation_window << ',' << finetune.max_iterations << ',' << fmt(finetune.fc)
     << ',' << fmt(finetune.beta) << '\n';
  os << "sweep.fc_list=";
  for (std::size_t i = 0; i < fc_list.size(); ++i) os << (i ? "," : "") << fmt(fc_list[i]);
  os << '\n';
  os << "sweep.matrices=";
  for (std::size_t i = 0; i < matrices.size(); ++i)
    os << (i ? "," : "") << matrices[i][0] << 'x' << matrices[i][1];
  os << '\n';
  os << "metrics.hfen=" << fmt(hfen.sigma) << ',' << hfen.support << '\n';
  return os.str();
}

std::string ExperimentConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  const auto& table = setters();
  for (const auto& [section, body] : tree) {
    const auto s = table.find(section);
    require(s != table.end(), "config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      const auto k = s->second.find(key);
      require(k != s->second.end(), "config: unknown key '" + key + "' in [" + section + "]");
      k->second(cfg, value.data());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::override_seed(std::uint64_t seed) {
  dataset.seed = seed;
  network_seed = mix_seed(seed, 1);
  training.seed = mix_seed(seed, 2);
}

// ---------------------------------------------------------------------------
// Helpers

const char* to_string(Method m) {
  switch (m) {
    case Method::Unet: return "unet";
    case Method::UnetFt: return "unet-ft";
    case Method::Prognet: return "prognet";
    case Method::PrognetFt: return "prognet-ft";
  }
  return "?";
}

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  const int workers = std::max(1, std::min(jobs, n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(n, 0)));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

std::mutex g_log_mutex;

void log_line(const std::string& s) {
  std::lock_guard lock(g_log_mutex);
  std::fprintf(stderr, "%s\n", s.c_str());
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw RuntimeFailure("cannot create directory " + p.string() + ": " + ec.message());
}

void quantize(RealVolume& v) {
  for (double& a : v.storage()) a = static_cast<double>(static_cast<float>(a));
}

std::string grid_label(const VoxelGrid& g) {
  return short_fmt(g.dx) + "x" + short_fmt(g.dy) + "x" + short_fmt(g.dz);
}

std::vector<const CaseEntry*> test_cases(const DatasetManifest& m) {
  const auto cases = m.split(Split::Test);
  require(!cases.empty(), "dataset has no test cases");
  return cases;
}

}  // namespace

void write_slice_png(const fs::path& path, const RealVolume& v, int z, double lo, double hi) {
  const auto& g = v.grid();
  require(z >= 0 && z < g.nz, "slice index out of range");
  require(hi > lo, "slice window must have hi > lo");
  std::vector<png_byte> pixels(static_cast<std::size_t>(g.nx) * g.ny);
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x) {
      const double t = std::clamp((v.at(x, y, z) - lo) / (hi - lo), 0.0, 1.0);
      pixels[static_cast<std::size_t>(y) * g.nx + x] = static_cast<png_byte>(std::lround(t * 255.0));
    }

  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw RuntimeFailure("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw RuntimeFailure("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, g.nx, g.ny, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < g.ny; ++y) png_write_row(png, &pixels[static_cast<std::size_t>(y) * g.nx]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// ---------------------------------------------------------------------------
// CSV

void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows,
                       const std::string& config_hash) {
  int max_roi = 0;
  for (const auto& r : rows)
    if (!r.report.roi_means.empty()) max_roi = std::max(max_roi, r.report.roi_means.rbegin()->first);

  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os << "case_id,method,fc,voxel_size,rmse,psnr,ssim,hfen";
  for (int k = 1; k <= max_roi; ++k) os << ",roi_" << k;
  os << ",loss_ft_initial,loss_ft_final,ft_iterations,stop_reason,config_hash\n";
  for (const auto& r : rows) {
    os << r.case_id << ',' << r.method << ',' << fmt(r.fc) << ',' << grid_label(r.grid) << ','
       << fmt(r.report.rmse) << ',' << fmt(r.report.psnr) << ',' << fmt(r.report.ssim) << ','
       << fmt(r.report.hfen);
    for (int k = 1; k <= max_roi; ++k) {
      os << ',';
      if (const auto it = r.report.roi_means.find(k); it != r.report.roi_means.end()) os << fmt(it->second);
    }
    os << ',' << (r.loss_initial ? fmt(*r.loss_initial) : "") << ','
       << (r.loss_final ? fmt(*r.loss_final) : "") << ',' << r.ft_iterations << ','
       << r.stop_reason << ',' << config_hash << '\n';
  }
}

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

CsvTable read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw RuntimeFailure("cannot read " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("empty CSV file " + path.string());
  t.header = split(line, ',');
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != t.header.size())
      throw ValidationError("malformed CSV row in " + path.string());
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const auto col = [&](const std::string& n) {
    const int c = t.column(n);
    if (c < 0) throw ValidationError(path.string() + " lacks column " + n);
    return c;
  };
  const int c_case = col("case_id"), c_method = col("method"), c_fc = col("fc"),
            c_vox = col("voxel_size"), c_rmse = col("rmse"), c_psnr = col("psnr"),
            c_ssim = col("ssim"), c_hfen = col("hfen"), c_li = col("loss_ft_initial"),
            c_lf = col("loss_ft_final"), c_it = col("ft_iterations"), c_stop = col("stop_reason");
  std::vector<MetricsRow> out;
  for (const auto& r : t.rows) {
    MetricsRow m;
    m.case_id = r[c_case];
    m.method = r[c_method];
    m.fc = parse_double("fc", r[c_fc]);
    const auto d = split(r[c_vox], 'x');
    if (d.size() == 3) {
      m.grid.dx = parse_double("voxel_size", d[0]);
      m.grid.dy = parse_double("voxel_size", d[1]);
      m.grid.dz = parse_double("voxel_size", d[2]);
    }
    m.report.rmse = parse_double("rmse", r[c_rmse]);
    m.report.psnr = parse_double("psnr", r[c_psnr]);
    m.report.ssim = parse_double("ssim", r[c_ssim]);
    m.report.hfen = parse_double("hfen", r[c_hfen]);
    for (std::size_t i = 0; i < t.header.size(); ++i)
      if (t.header[i].rfind("roi_", 0) == 0 && !r[i].empty())
        m.report.roi_means[std::stoi(t.header[i].substr(4))] = parse_double(t.header[i], r[i]);
    if (!r[c_li].empty()) m.loss_initial = parse_double("loss_ft_initial", r[c_li]);
    if (!r[c_lf].empty()) m.loss_final = parse_double("loss_ft_final", r[c_lf]);
    m.ft_iterations = static_cast<int>(parse_int("ft_iterations", r[c_it]));
    m.stop_reason = r[c_stop];
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& rows,
                                  const std::function<std::string(const MetricsRow&)>& group) {
  std::vector<std::string> order;
  std::map<std::pair<std::string, std::string>, std::vector<const MetricsRow*>> buckets;
  for (const auto& r : rows) {
    const std::string g = group(r);
    if (std::find(order.begin(), order.end(), g) == order.end()) order.push_back(g);
    buckets[{g, r.method}].push_back(&r);
  }
  auto stats = [](const std::vector<const MetricsRow*>& v, double metrics::MetricsReport::*f) {
    double mean = 0.0;
    for (const auto* r : v) mean += r->report.*f;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (const auto* r : v) var += (r->report.*f - mean) * (r->report.*f - mean);
    const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    return std::pair{mean, sd};
  };
  std::vector<SummaryRow> out;
  for (const auto& g : order)
    for (Method m : kMethods) {
      const auto it = buckets.find({g, to_string(m)});
      if (it == buckets.end()) continue;
      SummaryRow s;
      s.group = g;
      s.method = to_string(m);
      s.n = static_cast<int>(it->second.size());
      std::tie(s.rmse_mean, s.rmse_std) = stats(it->second, &metrics::MetricsReport::rmse);
      std::tie(s.psnr_mean, s.psnr_std) = stats(it->second, &metrics::MetricsReport::psnr);
      std::tie(s.ssim_mean, s.ssim_std) = stats(it->second, &metrics::MetricsReport::ssim);
      std::tie(s.hfen_mean, s.hfen_std) = stats(it->second, &metrics::MetricsReport::hfen);
      out.push_back(std::move(s));
    }
  return out;
}

namespace {

const char* kSummaryHeader =
    "group,method,n,rmse_mean,rmse_std,psnr_mean,psnr_std,ssim_mean,ssim_std,hfen_mean,hfen_std,"
    "note,config_hash";

void write_summary_row(std::ostream& os, const SummaryRow& s) {
  os << s.group << ',' << s.method << ',' << s.n << ',' << fmt(s.rmse_mean) << ','
     << fmt(s.rmse_std) << ',' << fmt(s.psnr_mean) << ',' << fmt(s.psnr_std) << ','
     << fmt(s.ssim_mean) << ',' << fmt(s.ssim_std) << ',' << fmt(s.hfen_mean) << ','
     << fmt(s.hfen_std) << ',' << s.note;
}

}  // namespace

void write_summary_csv(const fs::path& path, const std::vector<SummaryRow>& rows,
                       const std::string& config_hash) {
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os << kSummaryHeader << '\n';
  for (const auto& s : rows) {
    write_summary_row(os, s);
    os << ',' << config_hash << '\n';
  }
}

// ---------------------------------------------------------------------------
// Test cases

EvalCase load_eval_case(const DatasetManifest& m, const CaseEntry& e) {
  EvalCase c;
  c.id = e.id;
  c.hpfp = qvol::read_real(m.resolve(e.hpfp));
  c.magnitude = qvol::read_real(m.resolve(e.magnitude));
  c.chi = qvol::read_real(m.resolve(e.chi));
  c.labels = rasterize_labels(e.phantom);
  c.scan = m.options.scan;
  return c;
}

EvalCase regenerate_fc(const DatasetManifest& m, const CaseEntry& e, double fc) {
  DatasetOptions opts = m.options;
  opts.fc = fc;
  CaseVolumes v = synthesize_case(e.phantom, opts);
  quantize(v.hpfp);
  EvalCase c;
  c.id = e.id;
  c.hpfp = std::move(v.hpfp);
  c.magnitude = std::move(v.magnitude);
  c.chi = std::move(v.chi);
  c.labels = rasterize_labels(e.phantom);
  c.scan = m.options.scan;
  return c;
}

EvalCase resample_case(const DatasetManifest& m, const CaseEntry& e, int nx, int ny) {
  const VoxelGrid& src = e.phantom.grid;
  if (nx == src.nx && ny == src.ny) return load_eval_case(m, e);

  const RealVolume chi = qvol::read_real(m.resolve(e.chi));
  const RealVolume mag = qvol::read_real(m.resolve(e.magnitude));
  const RealVolume phase = qvol::read_real(m.resolve(e.phase));
  const ComplexVolume data = resample_kspace(synth_complex(mag, phase), nx, ny);
  const VoxelGrid& g = data.grid();

  EvalCase c;
  c.id = e.id;
  c.scan = m.options.scan;
  c.magnitude = RealVolume(g);
  for (std::size_t i = 0; i < data.size(); ++i) c.magnitude[i] = std::abs(data[i]);
  c.hpfp = hpfp(data, make_hann_transfer(g, m.options.fc, m.options.beta));
  quantize(c.hpfp);
  c.chi = real_part(resample_kspace(to_complex(chi), nx, ny));
  PhantomSpec spec = e.phantom;
  spec.grid = g;
  c.labels = rasterize_labels(spec);
  return c;
}

CaseOutputs evaluate_case(const TrainedModels& models, const EvalCase& c, double fc,
                          const FinetuneConfig& ft, const metrics::HfenOptions& hfen) {
  CaseOutputs out;
  auto row = [&](Method m, RealVolume pred) {
    quantize(pred);  // score exactly what gets stored
    MetricsRow r;
    r.case_id = c.id;
    r.method = to_string(m);
    r.fc = fc;
    r.grid = c.chi.grid();
    r.report = metrics::evaluate(pred, c.chi, &c.labels, hfen);
    out.predictions.push_back(std::move(pred));
    return r;
  };
  for (const nn::ProgNet* net : {&models.unet, &models.prognet}) {
    const bool is_unet = net == &models.unet;
    nn::ProgNet copy = *net;
    out.rows.push_back(row(is_unet ? Method::Unet : Method::Prognet, predict(copy, c.hpfp)));
    FinetuneResult res = fine_tune(*net, c.hpfp, c.magnitude, c.scan, ft);
    MetricsRow r = row(is_unet ? Method::UnetFt : Method::PrognetFt, res.prediction);
    r.loss_initial = res.initial_loss;
    r.loss_final = res.state.best_loss;
    r.ft_iterations = res.state.iterations;
    r.stop_reason = to_string(res.state.reason);
    out.rows.push_back(std::move(r));
    out.traces.push_back(std::move(res.state));
  }
  return out;
}

TrainedModels load_models(const ExperimentConfig& cfg) {
  const Layout layout{cfg.out_dir};
  TrainedModels m;
  for (const auto& [name, net] : {std::pair{"prognet", &m.prognet}, std::pair{"unet", &m.unet}}) {
    const fs::path p = layout.checkpoint(name);
    if (!fs::exists(p)) throw RuntimeFailure("checkpoint not found: " + p.string());
    *net = nn::load_checkpoint(p);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Commands

DatasetManifest cmd_phantom(const ExperimentConfig& cfg) {
  cfg.validate();
  const Layout layout{cfg.out_dir};
  ensure_dir(layout.dataset());
  return make_dataset(cfg.dataset, layout.dataset());
}

TrainOutputs cmd_train(const ExperimentConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  const Layout layout{cfg.out_dir};
  const DatasetManifest manifest = load_manifest(layout.manifest());
  const TrainData data = load_train_data(manifest);
  ensure_dir(layout.train());
  const std::string hash = cfg.hash();

  TrainOutputs out;
  struct Job {
    std::string name;
    int stages;
    TrainResult* result;
  };
  const std::vector<Job> jobs{{"prognet", cfg.stages, &out.prognet}, {"unet", 1, &out.unet}};
  parallel_for(static_cast<int>(jobs.size()), opt.jobs, [&](int i) {
    const Job& j = jobs[i];
    auto on_epoch = [&](const EpochLog& log, const nn::ProgNet* improved) {
      char msg[160];
      std::snprintf(msg, sizeof msg, "%s epoch %d: train %.5f val %.5f%s", j.name.c_str(),
                    log.epoch, log.train_total(), log.val_total(), improved ? " *" : "");
      log_line(msg);
      if (improved) nn::save_checkpoint(layout.checkpoint(j.name), *improved);
      if (cfg.training.checkpoint_every > 0 && log.epoch % cfg.training.checkpoint_every == 0 &&
          improved) {
        char suffix[32];
        std::snprintf(suffix, sizeof suffix, "_epoch%03d", log.epoch);
        nn::save_checkpoint(layout.checkpoint(j.name + suffix), *improved);
      }
    };
    *j.result = pretrain(nn::ProgNet::create(cfg.network, j.stages, cfg.network_seed), data,
                         cfg.training, on_epoch);
    write_loss_csv(layout.train() / (j.name + "_loss.csv"), j.result->log, hash);
  });
  return out;
}

std::vector<MetricsRow> cmd_eval(const ExperimentConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  const Layout layout{cfg.out_dir};
  const DatasetManifest manifest = load_manifest(layout.manifest());
  const TrainedModels models = load_models(cfg);
  const auto cases = test_cases(manifest);
  const std::string hash = cfg.hash();
  ensure_dir(layout.eval());

  std::vector<CaseOutputs> results(cases.size());
  parallel_for(static_cast<int>(cases.size()), opt.jobs, [&](int i) {
    const EvalCase c = load_eval_case(manifest, *cases[i]);
    results[i] = evaluate_case(models, c, manifest.options.fc, cfg.finetune, cfg.hfen);
    log_line("  " + c.id + ": prognet " + short_fmt(results[i].rows[2].report.rmse) + " -> " +
             short_fmt(results[i].rows[3].report.rmse) + ", unet " +
             short_fmt(results[i].rows[0].report.rmse) + " -> " +
             short_fmt(results[i].rows[1].report.rmse));
    const fs::path dir = layout.eval() / c.id;
    ensure_dir(dir);
    const int mid = c.chi.grid().nz / 2;
    write_slice_png(dir / "label.png", c.chi, mid);
    for (std::size_t k = 0; k < kMethods.size(); ++k) {
      const std::string name = to_string(kMethods[k]);
      qvol::write(dir / (name + ".qvol"), results[i].predictions[k]);
      write_slice_png(dir / (name + ".png"), results[i].predictions[k], mid);
    }
    write_trace_csv(dir / "unet-ft_trace.csv", results[i].traces[0], hash);
    write_trace_csv(dir / "prognet-ft_trace.csv", results[i].traces[1], hash);
  });

  std::vector<MetricsRow> rows;
  for (auto& r : results) std::move(r.rows.begin(), r.rows.end(), std::back_inserter(rows));
  write_metrics_csv(layout.eval() / "metrics.csv", rows, hash);
  return rows;
}

namespace {

template <typename MakeCase>
std::vector<MetricsRow> run_sweep(const ExperimentConfig& cfg, const RunOptions& opt,
                                  int n_points, const DatasetManifest& manifest,
                                  const MakeCase& make_case, std::vector<double> fcs) {
  const TrainedModels models = load_models(cfg);
  const auto cases = test_cases(manifest);
  const int n_cases = static_cast<int>(cases.size());
  std::vector<std::vector<MetricsRow>> results(static_cast<std::size_t>(n_points) * n_cases);
  parallel_for(n_points * n_cases, opt.jobs, [&](int i) {
    const int point = i / n_cases, k = i % n_cases;
    const EvalCase c = make_case(point, *cases[k]);
    results[i] = evaluate_case(models, c, fcs[point], cfg.finetune, cfg.hfen).rows;
    log_line("  " + c.id + " at " + grid_label(c.chi.grid()) + " fc " + short_fmt(fcs[point]) +
             ": prognet " + short_fmt(results[i][2].report.rmse) + " -> " +
             short_fmt(results[i][3].report.rmse) + ", unet " + short_fmt(results[i][0].report.rmse) +
             " -> " + short_fmt(results[i][1].report.rmse));
  });
  std::vector<MetricsRow> rows;
  for (auto& r : results) std::move(r.begin(), r.end(), std::back_inserter(rows));
  return rows;
}

std::string fc_group(double fc) { return "fc=" + short_fmt(fc); }

}  // namespace

std::vector<SummaryRow> cmd_sweep_fc(const ExperimentConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  const Layout layout{cfg.out_dir};
  const DatasetManifest manifest = load_manifest(layout.manifest());
  ensure_dir(layout.sweep_fc());
  const auto rows = run_sweep(
      cfg, opt, static_cast<int>(cfg.fc_list.size()), manifest,
      [&](int p, const CaseEntry& e) { return regenerate_fc(manifest, e, cfg.fc_list[p]); },
      cfg.fc_list);
  auto summary = summarize(rows, [](const MetricsRow& r) { return fc_group(r.fc); });
  for (auto& s : summary)
    if (s.group == fc_group(0.25) && (s.method == "unet-ft" || s.method == "prognet-ft"))
      s.note = "no improvement expected at this cutoff";
  const std::string hash = cfg.hash();
  write_metrics_csv(layout.sweep_fc() / "metrics.csv", rows, hash);
  write_summary_csv(layout.sweep_fc() / "summary.csv", summary, hash);
  return summary;
}

std::vector<SummaryRow> cmd_sweep_voxel(const ExperimentConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  const Layout layout{cfg.out_dir};
  const DatasetManifest manifest = load_manifest(layout.manifest());
  ensure_dir(layout.sweep_voxel());
  const auto rows = run_sweep(
      cfg, opt, static_cast<int>(cfg.matrices.size()), manifest,
      [&](int p, const CaseEntry& e) {
        return resample_case(manifest, e, cfg.matrices[p][0], cfg.matrices[p][1]);
      },
      std::vector<double>(cfg.matrices.size(), manifest.options.fc));
  auto summary = summarize(rows, [](const MetricsRow& r) { return "voxel=" + grid_label(r.grid); });

  nlohmann::json grids = nlohmann::json::array();
  const VoxelGrid& g0 = manifest.options.grid;
  for (const auto& m : cfg.matrices) {
    VoxelGrid g = g0;
    g.nx = m[0];
    g.ny = m[1];
    g.dx = g0.dx * g0.nx / m[0];
    g.dy = g0.dy * g0.ny / m[1];
    grids.push_back({{"nx", g.nx}, {"ny", g.ny}, {"nz", g.nz}, {"dx", g.dx}, {"dy", g.dy},
                     {"dz", g.dz}});
  }
  std::ofstream(layout.sweep_voxel() / "grids.json") << grids.dump(2) << '\n';
  const std::string hash = cfg.hash();
  write_metrics_csv(layout.sweep_voxel() / "metrics.csv", rows, hash);
  write_summary_csv(layout.sweep_voxel() / "summary.csv", summary, hash);
  return summary;
}

std::vector<MetricsRow> cmd_metrics(const ExperimentConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  const Layout layout{cfg.out_dir};
  const DatasetManifest manifest = load_manifest(layout.manifest());
  const auto cases = test_cases(manifest);
  std::vector<std::vector<MetricsRow>> results(cases.size());
  parallel_for(static_cast<int>(cases.size()), opt.jobs, [&](int i) {
    const EvalCase c = load_eval_case(manifest, *cases[i]);
    for (Method m : kMethods) {
      const fs::path p = layout.eval() / c.id / (std::string(to_string(m)) + ".qvol");
      if (!fs::exists(p)) throw RuntimeFailure("prediction not found: " + p.string());
      MetricsRow r;
      r.case_id = c.id;
      r.method = to_string(m);
      r.fc = manifest.options.fc;
      r.grid = c.chi.grid();
      r.report = metrics::evaluate(qvol::read_real(p), c.chi, &c.labels, cfg.hfen);
      results[i].push_back(std::move(r));
    }
  });
  std::vector<MetricsRow> rows;
  for (auto& r : results) std::move(r.begin(), r.end(), std::back_inserter(rows));
  write_metrics_csv(layout.eval() / "metrics_recomputed.csv", rows, cfg.hash());
  return rows;
}

fs::path cmd_report(const ExperimentConfig& cfg) {
  cfg.validate();
  const Layout layout{cfg.out_dir};
  const std::string hash = cfg.hash();
  std::vector<std::pair<std::string, std::vector<SummaryRow>>> sections;

  if (const fs::path p = layout.eval() / "metrics.csv"; fs::exists(p))
    sections.emplace_back("eval", summarize(read_metrics_csv(p), [](const MetricsRow&) {
                            return std::string("train-condition");
                          }));
  for (const auto& [name, dir] : {std::pair{"sweep-fc", layout.sweep_fc()},
                                  std::pair{"sweep-voxel", layout.sweep_voxel()}}) {
    const fs::path p = dir / "summary.csv";
    if (!fs::exists(p)) continue;
    const CsvTable t = read_csv(p);
    std::vector<SummaryRow> rows;
    for (const auto& r : t.rows) {
      SummaryRow s;
      s.group = r[0];
      s.method = r[1];
      s.n = static_cast<int>(parse_int("n", r[2]));
      double* fields[] = {&s.rmse_mean, &s.rmse_std, &s.psnr_mean, &s.psnr_std,
                          &s.ssim_mean, &s.ssim_std, &s.hfen_mean, &s.hfen_std};
      for (int k = 0; k < 8; ++k) *fields[k] = parse_double(t.header[3 + k], r[3 + k]);
      s.note = r[11];
      rows.push_back(std::move(s));
    }
    sections.emplace_back(name, std::move(rows));
  }
  if (sections.empty())
    throw RuntimeFailure("nothing to report under " + cfg.out_dir.string() +
                         "; run eval or a sweep first");

  ensure_dir(cfg.out_dir);
  const fs::path out = cfg.out_dir / "report.csv";
  std::ofstream os(out);
  if (!os) throw RuntimeFailure("cannot write " + out.string());
  os << "source," << kSummaryHeader << '\n';
  for (const auto& [name, rows] : sections)
    for (const auto& s : rows) {
      os << name << ',';
      write_summary_row(os, s);
      os << ',' << hash << '\n';
    }
  return out;
}

}  // namespace qsmfine::harness
