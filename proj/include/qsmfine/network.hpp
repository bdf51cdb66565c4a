#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "qsmfine/autodiff.hpp"
#include "qsmfine/volume.hpp"

namespace qsmfine::nn {

struct UnetConfig {
  int levels = 3;
  std::vector<int> widths{8, 16, 32};
  int in_channels = 2;

  void validate() const;
  // Spatial dimensions must be divisible by this.
  int divisor() const { return 1 << (levels - 1); }
};

// One encoder/decoder Unet: per level two conv-BN-ReLU layers, 2x max-pool
// down, nearest 2x upsample + conv-BN-ReLU up, skip concatenation, and a
// final 1x1x1 conv to one channel with no activation.
class Unet {
 public:
  Unet() = default;
  // He-uniform conv weights, zero biases, BN scale 1 / shift 0.
  static Unet create(const UnetConfig& cfg, std::uint64_t seed, const std::string& prefix = "");

  const UnetConfig& config() const { return cfg_; }
  Tape::Id forward(Tape& tape, Tape::Id input, BnMode mode);

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t trainable_count() const;
  void zero_grad();

 private:
  struct ConvLayer {
    std::size_t w, b;
    std::size_t gamma, beta, mean, var;
  };
  Tape::Id conv_bn_relu(Tape& t, Tape::Id x, const ConvLayer& l, BnMode mode);
  ConvLayer add_conv(const std::string& name, int cin, int cout);

  UnetConfig cfg_;
  std::vector<Parameter> params_;
  std::vector<ConvLayer> encoder_;  // 2 per level
  std::vector<ConvLayer> up_;       // 1 per decoder level
  std::vector<ConvLayer> decoder_;  // 2 per decoder level
  std::size_t head_w_ = 0, head_b_ = 0;
};

// Closed-form trainable parameter count of one Unet.
std::size_t unet_parameter_count(const UnetConfig& cfg);

// K stacked Unets; stage n sees (QSM_{n-1}, HPFP) with QSM_0 = 0.
class ProgNet {
 public:
  ProgNet() = default;
  static ProgNet create(const UnetConfig& cfg, int stages, std::uint64_t seed);

  int stages() const { return static_cast<int>(stages_.size()); }
  const UnetConfig& config() const { return stages_.front().config(); }
  std::uint64_t seed() const { return seed_; }
  Unet& stage(int k) { return stages_[k]; }
  const Unet& stage(int k) const { return stages_[k]; }
  Unet& last() { return stages_.back(); }

  // Pushes every stage onto the tape; returns the K stage outputs.
  std::vector<Tape::Id> forward(Tape& tape, const FeatureMap& hpfp, BnMode mode);

  void zero_grad();
  std::size_t trainable_count() const;
  std::vector<Parameter*> all_parameters();

 private:
  std::vector<Unet> stages_;
  std::uint64_t seed_ = 0;
};

std::vector<RealVolume> prognet_forward(ProgNet& net, const RealVolume& hpfp,
                                        BnMode mode = BnMode::Eval);

// Single-channel feature map view of a volume and back.
FeatureMap to_feature_map(const RealVolume& v);
RealVolume to_volume(const FeatureMap& f, const VoxelGrid& grid, int channel = 0);
FeatureMap stack_channels(const FeatureMap& a, const FeatureMap& b);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed list of parameters.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg);

  // Throws RuntimeFailure if any gradient is non-finite; parameters are left
  // untouched in that case.
  void step();
  long steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  std::span<const std::vector<double>> first_moment() const { return m_; }
  std::span<const std::vector<double>> second_moment() const { return v_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Checkpoint layout (little-endian): "QNT1"; u32 levels; u32 widths[levels];
// u32 stages; u64 seed; u32 entry count; per entry: u16 name length, name,
// u8 rank, u32 dims[rank], u64 offset, u64 count (offsets in f32 elements);
// then the f32 payload.
void save_checkpoint(const std::filesystem::path& path, const ProgNet& net);
ProgNet load_checkpoint(const std::filesystem::path& path);
std::vector<unsigned char> serialize_checkpoint(const ProgNet& net);
ProgNet deserialize_checkpoint(std::span<const unsigned char> bytes);

}  // namespace qsmfine::nn
