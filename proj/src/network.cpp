#include "qsmfine/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace qsmfine::nn {

void UnetConfig::validate() const {
  require(levels >= 1, "Unet needs at least one level");
  require(static_cast<int>(widths.size()) == levels, "Unet widths must list one width per level");
  for (int w : widths) require(w >= 1, "Unet widths must be positive");
  require(in_channels >= 1, "Unet needs at least one input channel");
}

Unet::ConvLayer Unet::add_conv(const std::string& name, int cin, int cout) {
  ConvLayer l{};
  l.w = params_.size();
  params_.emplace_back(name + ".weight", std::vector<int>{cout, cin, 3, 3, 3});
  l.b = params_.size();
  params_.emplace_back(name + ".bias", std::vector<int>{cout});
  l.gamma = params_.size();
  params_.emplace_back(name + ".bn.scale", std::vector<int>{cout});
  l.beta = params_.size();
  params_.emplace_back(name + ".bn.shift", std::vector<int>{cout});
  l.mean = params_.size();
  params_.emplace_back(name + ".bn.running_mean", std::vector<int>{cout}, false);
  l.var = params_.size();
  params_.emplace_back(name + ".bn.running_var", std::vector<int>{cout}, false);
  return l;
}

Unet Unet::create(const UnetConfig& cfg, std::uint64_t seed, const std::string& prefix) {
  cfg.validate();
  Unet u;
  u.cfg_ = cfg;
  const int L = cfg.levels;
  const auto& w = cfg.widths;
  int cin = cfg.in_channels;
  for (int l = 0; l < L; ++l) {
    const std::string p = prefix + "enc" + std::to_string(l);
    u.encoder_.push_back(u.add_conv(p + ".conv0", cin, w[l]));
    u.encoder_.push_back(u.add_conv(p + ".conv1", w[l], w[l]));
    cin = w[l];
  }
  for (int l = L - 2; l >= 0; --l) {
    const std::string p = prefix + "dec" + std::to_string(l);
    u.up_.push_back(u.add_conv(p + ".up", w[l + 1], w[l]));
    u.decoder_.push_back(u.add_conv(p + ".conv0", 2 * w[l], w[l]));
    u.decoder_.push_back(u.add_conv(p + ".conv1", w[l], w[l]));
  }
  u.head_w_ = u.params_.size();
  u.params_.emplace_back(prefix + "head.weight", std::vector<int>{1, w[0]});
  u.head_b_ = u.params_.size();
  u.params_.emplace_back(prefix + "head.bias", std::vector<int>{1});

  std::mt19937_64 rng(seed);
  for (auto& p : u.params_) {
    const bool is_weight = p.name.ends_with(".weight");
    if (is_weight) {
      const int fan_in = p.shape.size() == 5 ? p.shape[1] * 27 : p.shape[1];
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : p.value) v = dist(rng);
    } else if (p.name.ends_with(".bn.scale") || p.name.ends_with(".bn.running_var")) {
      std::fill(p.value.begin(), p.value.end(), 1.0);
    }
  }
  return u;
}

Tape::Id Unet::conv_bn_relu(Tape& t, Tape::Id x, const ConvLayer& l, BnMode mode) {
  auto& p = params_;
  const Tape::Id c = t.conv3(x, p[l.w], p[l.b]);
  const Tape::Id n = t.batchnorm(c, {&p[l.gamma], &p[l.beta], &p[l.mean], &p[l.var]}, mode);
  return t.relu(n);
}

Tape::Id Unet::forward(Tape& t, Tape::Id input, BnMode mode) {
  const FeatureMap& in = t.value(input);
  require(in.channels == cfg_.in_channels, "Unet input channel count mismatch");
  const int d = cfg_.divisor();
  if (in.nx % d || in.ny % d || in.nz % d) {
    std::ostringstream os;
    os << "Unet input " << in.nx << "x" << in.ny << "x" << in.nz
       << " is not divisible by " << d;
    throw ValidationError(os.str());
  }
  const int L = cfg_.levels;
  std::vector<Tape::Id> skips;
  Tape::Id x = input;
  for (int l = 0; l < L; ++l) {
    if (l > 0) x = t.maxpool2(x);
    x = conv_bn_relu(t, x, encoder_[2 * l], mode);
    x = conv_bn_relu(t, x, encoder_[2 * l + 1], mode);
    skips.push_back(x);
  }
  for (int i = 0, l = L - 2; l >= 0; --l, ++i) {
    x = conv_bn_relu(t, t.upsample2(x), up_[i], mode);
    x = t.concat(skips[l], x);
    x = conv_bn_relu(t, x, decoder_[2 * i], mode);
    x = conv_bn_relu(t, x, decoder_[2 * i + 1], mode);
  }
  return t.conv1(x, params_[head_w_], params_[head_b_]);
}

std::size_t Unet::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.size();
  return n;
}

void Unet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::size_t unet_parameter_count(const UnetConfig& cfg) {
  cfg.validate();
  // conv3 weights + bias + BN scale/shift
  auto layer = [](std::size_t cin, std::size_t cout) { return cout * cin * 27 + 3 * cout; };
  std::size_t n = 0;
  std::size_t cin = cfg.in_channels;
  for (int l = 0; l < cfg.levels; ++l) {
    const std::size_t w = cfg.widths[l];
    n += layer(cin, w) + layer(w, w);
    cin = w;
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const std::size_t w = cfg.widths[l], below = cfg.widths[l + 1];
    n += layer(below, w) + layer(2 * w, w) + layer(w, w);
  }
  return n + cfg.widths[0] + 1;
}

ProgNet ProgNet::create(const UnetConfig& cfg, int stages, std::uint64_t seed) {
  require(stages >= 1, "progressive network needs at least one stage");
  require(cfg.in_channels == 2, "progressive stages take (previous estimate, HPFP) inputs");
  ProgNet net;
  net.seed_ = seed;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::vector<std::uint64_t> stage_seeds(stages);
  std::mt19937_64 rng(seq);
  for (auto& s : stage_seeds) s = rng();
  for (int k = 0; k < stages; ++k)
    net.stages_.push_back(
        Unet::create(cfg, stage_seeds[k], "stage" + std::to_string(k + 1) + "."));
  return net;
}

std::vector<Tape::Id> ProgNet::forward(Tape& tape, const FeatureMap& hpfp, BnMode mode) {
  require(hpfp.channels == 1, "progressive network expects a single-channel HPFP");
  std::vector<Tape::Id> outs;
  const Tape::Id f = tape.constant(hpfp);
  Tape::Id prev = tape.constant(FeatureMap(1, hpfp.nx, hpfp.ny, hpfp.nz));
  for (auto& s : stages_) {
    const Tape::Id in = tape.concat(prev, f);
    prev = s.forward(tape, in, mode);
    outs.push_back(prev);
  }
  return outs;
}

void ProgNet::zero_grad() {
  for (auto& s : stages_) s.zero_grad();
}

std::size_t ProgNet::trainable_count() const {
  std::size_t n = 0;
  for (const auto& s : stages_) n += s.trainable_count();
  return n;
}

std::vector<Parameter*> ProgNet::all_parameters() {
  std::vector<Parameter*> out;
  for (auto& s : stages_)
    for (auto& p : s.parameters()) out.push_back(&p);
  return out;
}

FeatureMap to_feature_map(const RealVolume& v) {
  const auto& g = v.grid();
  FeatureMap f(1, g.nx, g.ny, g.nz);
  std::copy(v.data().begin(), v.data().end(), f.data.begin());
  return f;
}

RealVolume to_volume(const FeatureMap& f, const VoxelGrid& grid, int channel) {
  require(f.nx == grid.nx && f.ny == grid.ny && f.nz == grid.nz,
          "feature map does not match volume grid");
  const double* c = f.channel(channel);
  return RealVolume(grid, std::vector<double>(c, c + f.voxels()));
}

FeatureMap stack_channels(const FeatureMap& a, const FeatureMap& b) {
  require(a.same_spatial(b), "stack_channels: spatial dimensions differ");
  FeatureMap out(a.channels + b.channels, a.nx, a.ny, a.nz);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

std::vector<RealVolume> prognet_forward(ProgNet& net, const RealVolume& hpfp, BnMode mode) {
  Tape tape;
  const auto outs = net.forward(tape, to_feature_map(hpfp), mode);
  std::vector<RealVolume> result;
  for (auto id : outs) result.push_back(to_volume(tape.value(id), hpfp.grid()));
  return result;
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg) : cfg_(cfg) {
  for (Parameter* p : params)
    if (p->trainable) params_.push_back(p);
  for (Parameter* p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void Adam::step() {
  for (const Parameter* p : params_)
    for (double g : p->grad)
      if (!std::isfinite(g)) throw RuntimeFailure("Adam: non-finite gradient in " + p->name);
  ++step_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      p.value[i] -= cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kCheckpointMagic[4] = {'Q', 'N', 'T', '1'};

struct Writer {
  std::vector<unsigned char> bytes;
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) { uint(v, 2); }
  void u32(std::uint32_t v) { uint(v, 4); }
  void u64(std::uint64_t v) { uint(v, 8); }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void uint(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
};

struct Reader {
  std::span<const unsigned char> bytes;
  std::size_t pos = 0;
  std::uint64_t uint(int n) {
    if (pos + n > bytes.size()) throw ValidationError("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += n;
    return v;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
};

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const ProgNet& net) {
  Writer w;
  w.bytes.assign(kCheckpointMagic, kCheckpointMagic + 4);
  const auto& cfg = net.config();
  w.u32(static_cast<std::uint32_t>(cfg.levels));
  for (int width : cfg.widths) w.u32(static_cast<std::uint32_t>(width));
  w.u32(static_cast<std::uint32_t>(net.stages()));
  w.u64(net.seed());

  std::vector<const Parameter*> all;
  for (int k = 0; k < net.stages(); ++k)
    for (const auto& p : net.stage(k).parameters()) all.push_back(&p);
  w.u32(static_cast<std::uint32_t>(all.size()));
  std::uint64_t offset = 0;
  for (const Parameter* p : all) {
    w.u16(static_cast<std::uint16_t>(p->name.size()));
    w.bytes.insert(w.bytes.end(), p->name.begin(), p->name.end());
    w.u8(static_cast<std::uint8_t>(p->shape.size()));
    for (int d : p->shape) w.u32(static_cast<std::uint32_t>(d));
    w.u64(offset);
    w.u64(p->size());
    offset += p->size();
  }
  for (const Parameter* p : all)
    for (double v : p->value) w.f32(v);
  return std::move(w.bytes);
}

ProgNet deserialize_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw ValidationError("checkpoint: bad magic");
  Reader r{bytes, 4};
  UnetConfig cfg;
  cfg.levels = static_cast<int>(r.u32());
  require(cfg.levels >= 1 && cfg.levels <= 16, "checkpoint: implausible level count");
  cfg.widths.resize(cfg.levels);
  for (int& width : cfg.widths) width = static_cast<int>(r.u32());
  const int stages = static_cast<int>(r.u32());
  require(stages >= 1 && stages <= 64, "checkpoint: implausible stage count");
  const std::uint64_t seed = r.u64();

  ProgNet net = ProgNet::create(cfg, stages, seed);
  std::vector<Parameter*> all = net.all_parameters();
  const std::uint32_t n = r.u32();
  require(n == all.size(), "checkpoint: parameter count does not match its config");

  struct Entry {
    std::uint64_t offset, count;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint16_t len = r.u16();
    if (r.pos + len > bytes.size()) throw ValidationError("checkpoint truncated");
    std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), len);
    r.pos += len;
    const int rank = r.u8();
    std::vector<int> shape(rank);
    for (int& d : shape) d = static_cast<int>(r.u32());
    const Entry e{r.u64(), r.u64()};
    require(name == all[i]->name && shape == all[i]->shape && e.count == all[i]->size(),
            "checkpoint: entry '" + name + "' does not match the network layout");
    entries.push_back(e);
  }
  const std::size_t payload = r.pos;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t start = payload + 4 * entries[i].offset;
    if (start + 4 * entries[i].count > bytes.size()) throw ValidationError("checkpoint truncated");
    Reader pr{bytes, start};
    for (double& v : all[i]->value) v = static_cast<double>(std::bit_cast<float>(pr.u32()));
  }
  return net;
}

void save_checkpoint(const std::filesystem::path& path, const ProgNet& net) {
  const auto bytes = serialize_checkpoint(net);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeFailure("cannot write checkpoint " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw RuntimeFailure("write failed for checkpoint " + path.string());
}

ProgNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("checkpoint not found: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace qsmfine::nn
