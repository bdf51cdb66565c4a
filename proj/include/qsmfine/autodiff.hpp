#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qsmfine/error.hpp"

namespace qsmfine::nn {

// Multi-channel activation, layout [channel][z][y][x].
struct FeatureMap {
  int channels = 0, nx = 0, ny = 0, nz = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int c, int x, int y, int z, double fill = 0.0)
      : channels(c), nx(x), ny(y), nz(z),
        data(static_cast<std::size_t>(c) * x * y * z, fill) {
    require(c > 0 && x > 0 && y > 0 && z > 0, "feature map dimensions must be positive");
  }

  std::size_t voxels() const { return static_cast<std::size_t>(nx) * ny * nz; }
  double* channel(int c) { return data.data() + c * voxels(); }
  const double* channel(int c) const { return data.data() + c * voxels(); }
  bool same_shape(const FeatureMap& o) const {
    return channels == o.channels && nx == o.nx && ny == o.ny && nz == o.nz;
  }
  bool same_spatial(const FeatureMap& o) const { return nx == o.nx && ny == o.ny && nz == o.nz; }
};

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;  // false for batch-norm running statistics

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, bool train = true);
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

enum class BnMode { Train, Eval };

struct BatchNormConfig {
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;
};

// Parameters of one batch-norm layer, held elsewhere (see Unet).
struct BatchNormRefs {
  Parameter* gamma;
  Parameter* beta;
  Parameter* running_mean;
  Parameter* running_var;
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward()
// walks them in reverse, accumulating into node and parameter gradients.
class Tape {
 public:
  using Id = std::size_t;

  Id constant(FeatureMap v) { return push(std::move(v), false); }
  Id variable(FeatureMap v) { return push(std::move(v), true); }

  // 3x3x3 cross-correlation, stride 1, zero padding 1. w: [out][in][3][3][3].
  Id conv3(Id x, Parameter& w, Parameter& b);
  // Pointwise channel mixing. w: [out][in].
  Id conv1(Id x, Parameter& w, Parameter& b);
  Id batchnorm(Id x, const BatchNormRefs& bn, BnMode mode);
  // Running-statistics update weight for train-mode batch norm on this tape.
  void set_bn_momentum(double m) { bn_momentum_ = m; }
  Id relu(Id x);
  Id maxpool2(Id x);
  Id upsample2(Id x);
  Id concat(Id a, Id b);

  const FeatureMap& value(Id id) const { return nodes_[id].value; }
  // Gradient of the seeded output with respect to a node; zero if unreached.
  const FeatureMap& grad(Id id);

  // Adds `seed` to d(out); several outputs may be seeded before propagate().
  void seed(Id out, const FeatureMap& seed);
  // Runs every recorded backward rule in reverse order.
  void propagate();
  void backward(Id out, const FeatureMap& s) {
    seed(out, s);
    propagate();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    FeatureMap value;
    FeatureMap grad;
    bool needs_grad = false;
    std::function<void(Tape&, Id)> backward;
  };

  Id push(FeatureMap v, bool needs_grad);
  FeatureMap& ensure_grad(Id id);
  bool needs(Id id) const { return nodes_[id].needs_grad; }

  std::vector<Node> nodes_;
  double bn_momentum_ = BatchNormConfig::kMomentum;
};

// Kernels shared by the tape and by tests.
namespace kernels {

void conv3_forward(const FeatureMap& x, std::span<const double> w, std::span<const double> b,
                   FeatureMap& out);
void conv3_backward_input(const FeatureMap& grad_out, std::span<const double> w,
                          FeatureMap& grad_in);
void conv3_backward_weights(const FeatureMap& x, const FeatureMap& grad_out,
                            std::span<double> grad_w, std::span<double> grad_b);

}  // namespace kernels

}  // namespace qsmfine::nn
