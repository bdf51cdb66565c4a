#include "qsmfine/autodiff.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>

namespace qsmfine::nn {

Parameter::Parameter(std::string n, std::vector<int> s, bool train)
    : name(std::move(n)), shape(std::move(s)), trainable(train) {
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  value.assign(count, 0.0);
  grad.assign(count, 0.0);
}

namespace kernels {
namespace {

// out[x] += w0*in[x-1] + w1*in[x] + w2*in[x+1] with zero padding at both ends.
inline void tap_row(double* __restrict out, const double* __restrict in, int n, double w0,
                    double w1, double w2) {
  if (n == 1) {
    out[0] += w1 * in[0];
    return;
  }
  out[0] += w1 * in[0] + w2 * in[1];
  for (int x = 1; x < n - 1; ++x) out[x] += w0 * in[x - 1] + w1 * in[x] + w2 * in[x + 1];
  out[n - 1] += w0 * in[n - 2] + w1 * in[n - 1];
}

// Adjoint of tap_row with respect to `in`.
inline void tap_row_adjoint(double* __restrict gin, const double* __restrict gout, int n,
                            double w0, double w1, double w2) {
  tap_row(gin, gout, n, w2, w1, w0);
}

inline void tap_row_weights(const double* __restrict gout, const double* __restrict in, int n,
                            double& s0, double& s1, double& s2) {
  double a0 = 0, a1 = 0, a2 = 0;
#pragma omp simd reduction(+ : a1)
  for (int x = 0; x < n; ++x) a1 += gout[x] * in[x];
#pragma omp simd reduction(+ : a0)
  for (int x = 1; x < n; ++x) a0 += gout[x] * in[x - 1];
#pragma omp simd reduction(+ : a2)
  for (int x = 0; x < n - 1; ++x) a2 += gout[x] * in[x + 1];
  s0 += a0;
  s1 += a1;
  s2 += a2;
}

}  // namespace

void conv3_forward(const FeatureMap& x, std::span<const double> w, std::span<const double> b,
                   FeatureMap& out) {
  const int cin = x.channels, cout = out.channels;
  const int X = x.nx, Y = x.ny, Z = x.nz;
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < cout; ++oc) {
    double* o = out.channel(oc);
    for (int z = 0; z < Z; ++z)
      for (int y = 0; y < Y; ++y) {
        double* orow = o + (static_cast<std::size_t>(z) * Y + y) * X;
        std::fill(orow, orow + X, b[oc]);
        for (int ic = 0; ic < cin; ++ic) {
          const double* in = x.channel(ic);
          const double* wk = &w[(static_cast<std::size_t>(oc) * cin + ic) * 27];
          for (int kz = 0; kz < 3; ++kz) {
            const int zz = z + kz - 1;
            if (zz < 0 || zz >= Z) continue;
            for (int ky = 0; ky < 3; ++ky) {
              const int yy = y + ky - 1;
              if (yy < 0 || yy >= Y) continue;
              const double* t = wk + kz * 9 + ky * 3;
              tap_row(orow, in + (static_cast<std::size_t>(zz) * Y + yy) * X, X, t[0], t[1], t[2]);
            }
          }
        }
      }
  }
}

void conv3_backward_input(const FeatureMap& grad_out, std::span<const double> w,
                          FeatureMap& grad_in) {
  const int cin = grad_in.channels, cout = grad_out.channels;
  const int X = grad_out.nx, Y = grad_out.ny, Z = grad_out.nz;
#pragma omp parallel for schedule(static)
  for (int ic = 0; ic < cin; ++ic) {
    double* gi = grad_in.channel(ic);
    for (int z = 0; z < Z; ++z)
      for (int y = 0; y < Y; ++y) {
        double* girow = gi + (static_cast<std::size_t>(z) * Y + y) * X;
        for (int oc = 0; oc < cout; ++oc) {
          const double* go = grad_out.channel(oc);
          const double* wk = &w[(static_cast<std::size_t>(oc) * cin + ic) * 27];
          for (int kz = 0; kz < 3; ++kz) {
            const int zo = z - (kz - 1);
            if (zo < 0 || zo >= Z) continue;
            for (int ky = 0; ky < 3; ++ky) {
              const int yo = y - (ky - 1);
              if (yo < 0 || yo >= Y) continue;
              const double* t = wk + kz * 9 + ky * 3;
              tap_row_adjoint(girow, go + (static_cast<std::size_t>(zo) * Y + yo) * X, X, t[0],
                              t[1], t[2]);
            }
          }
        }
      }
  }
}

void conv3_backward_weights(const FeatureMap& x, const FeatureMap& grad_out,
                            std::span<double> grad_w, std::span<double> grad_b) {
  const int cin = x.channels, cout = grad_out.channels;
  const int X = x.nx, Y = x.ny, Z = x.nz;
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < cout; ++oc) {
    const double* go = grad_out.channel(oc);
    double bias = 0.0;
    for (std::size_t i = 0; i < grad_out.voxels(); ++i) bias += go[i];
    grad_b[oc] += bias;
    for (int ic = 0; ic < cin; ++ic) {
      const double* in = x.channel(ic);
      double acc[27] = {};
      for (int z = 0; z < Z; ++z)
        for (int y = 0; y < Y; ++y) {
          const double* gorow = go + (static_cast<std::size_t>(z) * Y + y) * X;
          for (int kz = 0; kz < 3; ++kz) {
            const int zz = z + kz - 1;
            if (zz < 0 || zz >= Z) continue;
            for (int ky = 0; ky < 3; ++ky) {
              const int yy = y + ky - 1;
              if (yy < 0 || yy >= Y) continue;
              double* a = acc + kz * 9 + ky * 3;
              tap_row_weights(gorow, in + (static_cast<std::size_t>(zz) * Y + yy) * X, X, a[0],
                              a[1], a[2]);
            }
          }
        }
      double* gw = &grad_w[(static_cast<std::size_t>(oc) * cin + ic) * 27];
      for (int k = 0; k < 27; ++k) gw[k] += acc[k];
    }
  }
}

}  // namespace kernels

Tape::Id Tape::push(FeatureMap v, bool needs_grad) {
  nodes_.push_back(Node{std::move(v), FeatureMap(), needs_grad, nullptr});
  return nodes_.size() - 1;
}

FeatureMap& Tape::ensure_grad(Id id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) {
    n.grad = n.value;
    std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
  }
  return n.grad;
}

const FeatureMap& Tape::grad(Id id) { return ensure_grad(id); }

void Tape::seed(Id out, const FeatureMap& seed) {
  require(seed.same_shape(nodes_[out].value), "backward seed shape mismatch");
  FeatureMap& g = ensure_grad(out);
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += seed.data[i];
}

void Tape::propagate() {
  for (Id id = nodes_.size(); id-- > 0;) {
    Node& n = nodes_[id];
    if (n.backward && !n.grad.data.empty()) n.backward(*this, id);
  }
}

Tape::Id Tape::conv3(Id xid, Parameter& w, Parameter& b) {
  const FeatureMap& x = value(xid);
  require(w.shape.size() == 5 && w.shape[1] == x.channels && w.shape[2] == 3 &&
              w.shape[3] == 3 && w.shape[4] == 3,
          "conv3: weight shape does not match input channels (" + w.name + ")");
  require(b.size() == static_cast<std::size_t>(w.shape[0]), "conv3: bias size mismatch");
  FeatureMap out(w.shape[0], x.nx, x.ny, x.nz);
  kernels::conv3_forward(x, w.value, b.value, out);
  const Id id = push(std::move(out), true);
  nodes_[id].backward = [xid, &w, &b](Tape& t, Id self) {
    const FeatureMap& go = t.nodes_[self].grad;
    if (w.trainable) kernels::conv3_backward_weights(t.value(xid), go, w.grad, b.grad);
    if (t.needs(xid)) kernels::conv3_backward_input(go, w.value, t.ensure_grad(xid));
  };
  return id;
}

Tape::Id Tape::conv1(Id xid, Parameter& w, Parameter& b) {
  const FeatureMap& x = value(xid);
  require(w.shape.size() == 2 && w.shape[1] == x.channels,
          "conv1: weight shape does not match input channels (" + w.name + ")");
  const int cout = w.shape[0], cin = x.channels;
  const std::size_t V = x.voxels();
  FeatureMap out(cout, x.nx, x.ny, x.nz);
  for (int oc = 0; oc < cout; ++oc) {
    double* o = out.channel(oc);
    std::fill(o, o + V, b.value[oc]);
    for (int ic = 0; ic < cin; ++ic) {
      const double wv = w.value[static_cast<std::size_t>(oc) * cin + ic];
      const double* in = x.channel(ic);
      for (std::size_t i = 0; i < V; ++i) o[i] += wv * in[i];
    }
  }
  const Id id = push(std::move(out), true);
  nodes_[id].backward = [xid, &w, &b, cin, cout, V](Tape& t, Id self) {
    const FeatureMap& go = t.nodes_[self].grad;
    const FeatureMap& xv = t.value(xid);
    for (int oc = 0; oc < cout; ++oc) {
      const double* g = go.channel(oc);
      b.grad[oc] += std::accumulate(g, g + V, 0.0);
      for (int ic = 0; ic < cin; ++ic) {
        const double* in = xv.channel(ic);
        double s = 0.0;
        for (std::size_t i = 0; i < V; ++i) s += g[i] * in[i];
        w.grad[static_cast<std::size_t>(oc) * cin + ic] += s;
      }
    }
    if (!t.needs(xid)) return;
    FeatureMap& gi = t.ensure_grad(xid);
    for (int ic = 0; ic < cin; ++ic) {
      double* d = gi.channel(ic);
      for (int oc = 0; oc < cout; ++oc) {
        const double wv = w.value[static_cast<std::size_t>(oc) * cin + ic];
        const double* g = go.channel(oc);
        for (std::size_t i = 0; i < V; ++i) d[i] += wv * g[i];
      }
    }
  };
  return id;
}

Tape::Id Tape::batchnorm(Id xid, const BatchNormRefs& bn, BnMode mode) {
  const FeatureMap& x = value(xid);
  const int C = x.channels;
  const std::size_t V = x.voxels();
  require(bn.gamma->size() == static_cast<std::size_t>(C), "batchnorm: channel count mismatch");
  if (mode == BnMode::Train)
    require(V >= 2, "batchnorm: train mode needs at least 2 elements per channel");

  std::vector<double> mean(C), inv_std(C);
  std::vector<char> clamped(C, 0);
  for (int c = 0; c < C; ++c) {
    if (mode == BnMode::Train) {
      const double* in = x.channel(c);
      const double mu = std::accumulate(in, in + V, 0.0) / static_cast<double>(V);
      double ss = 0.0;
      for (std::size_t i = 0; i < V; ++i) ss += (in[i] - mu) * (in[i] - mu);
      const double var = ss / static_cast<double>(V);
      clamped[c] = var < BatchNormConfig::kEpsilon;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(std::max(var, BatchNormConfig::kEpsilon));
      const double m = bn_momentum_;
      bn.running_mean->value[c] = (1.0 - m) * bn.running_mean->value[c] + m * mu;
      bn.running_var->value[c] =
          (1.0 - m) * bn.running_var->value[c] + m * ss / static_cast<double>(V - 1);
    } else {
      mean[c] = bn.running_mean->value[c];
      inv_std[c] = 1.0 / std::sqrt(std::max(bn.running_var->value[c], BatchNormConfig::kEpsilon));
    }
  }

  FeatureMap out(C, x.nx, x.ny, x.nz);
  for (int c = 0; c < C; ++c) {
    const double* in = x.channel(c);
    double* o = out.channel(c);
    const double g = bn.gamma->value[c], b = bn.beta->value[c];
    for (std::size_t i = 0; i < V; ++i) o[i] = g * (in[i] - mean[c]) * inv_std[c] + b;
  }
  const Id id = push(std::move(out), true);
  nodes_[id].backward = [xid, bn, mode, mean = std::move(mean), inv_std = std::move(inv_std),
                         clamped = std::move(clamped), C, V](Tape& t, Id self) {
    const FeatureMap& go = t.nodes_[self].grad;
    const FeatureMap& xv = t.value(xid);
    const bool want_input = t.needs(xid);
    FeatureMap* gi = want_input ? &t.ensure_grad(xid) : nullptr;
    const double n = static_cast<double>(V);
    for (int c = 0; c < C; ++c) {
      const double* g = go.channel(c);
      const double* in = xv.channel(c);
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t i = 0; i < V; ++i) {
        sum_g += g[i];
        sum_gx += g[i] * (in[i] - mean[c]) * inv_std[c];
      }
      if (bn.gamma->trainable) {
        bn.gamma->grad[c] += sum_gx;
        bn.beta->grad[c] += sum_g;
      }
      if (!want_input) continue;
      double* d = gi->channel(c);
      const double scale = bn.gamma->value[c] * inv_std[c];
      if (mode == BnMode::Eval) {
        for (std::size_t i = 0; i < V; ++i) d[i] += scale * g[i];
      } else {
        const double mg = sum_g / n;
        const double mgx = clamped[c] ? 0.0 : sum_gx / n;
        for (std::size_t i = 0; i < V; ++i) {
          const double xhat = (in[i] - mean[c]) * inv_std[c];
          d[i] += scale * (g[i] - mg - xhat * mgx);
        }
      }
    }
  };
  return id;
}

Tape::Id Tape::relu(Id xid) {
  FeatureMap out = value(xid);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  const Id id = push(std::move(out), true);
  nodes_[id].backward = [xid](Tape& t, Id self) {
    if (!t.needs(xid)) return;
    const FeatureMap& go = t.nodes_[self].grad;
    const FeatureMap& y = t.nodes_[self].value;
    FeatureMap& gi = t.ensure_grad(xid);
    for (std::size_t i = 0; i < go.data.size(); ++i)
      if (y.data[i] > 0.0) gi.data[i] += go.data[i];
  };
  return id;
}

Tape::Id Tape::maxpool2(Id xid) {
  const FeatureMap& x = value(xid);
  require(x.nx % 2 == 0 && x.ny % 2 == 0 && x.nz % 2 == 0,
          "maxpool2: spatial dimensions must be even");
  FeatureMap out(x.channels, x.nx / 2, x.ny / 2, x.nz / 2);
  std::vector<std::uint32_t> argmax(out.data.size());
  std::size_t k = 0;
  for (int c = 0; c < x.channels; ++c) {
    const double* in = x.channel(c);
    for (int z = 0; z < out.nz; ++z)
      for (int y = 0; y < out.ny; ++y)
        for (int xo = 0; xo < out.nx; ++xo, ++k) {
          double best = -std::numeric_limits<double>::infinity();
          std::uint32_t at = 0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const auto i = static_cast<std::uint32_t>(
                    (static_cast<std::size_t>(2 * z + dz) * x.ny + 2 * y + dy) * x.nx + 2 * xo + dx);
                if (in[i] > best) {
                  best = in[i];
                  at = i;
                }
              }
          out.data[k] = best;
          argmax[k] = at;
        }
  }
  const Id id = push(std::move(out), true);
  nodes_[id].backward = [xid, argmax = std::move(argmax)](Tape& t, Id self) {
    if (!t.needs(xid)) return;
    const FeatureMap& go = t.nodes_[self].grad;
    FeatureMap& gi = t.ensure_grad(xid);
    const std::size_t per_out = go.voxels();
    for (int c = 0; c < go.channels; ++c) {
      double* d = gi.channel(c);
      for (std::size_t i = 0; i < per_out; ++i) {
        const std::size_t k = c * per_out + i;
        d[argmax[k]] += go.data[k];
      }
    }
  };
  return id;
}

Tape::Id Tape::upsample2(Id xid) {
  const FeatureMap& x = value(xid);
  FeatureMap out(x.channels, 2 * x.nx, 2 * x.ny, 2 * x.nz);
  for (int c = 0; c < x.channels; ++c) {
    const double* in = x.channel(c);
    double* o = out.channel(c);
    for (int z = 0; z < out.nz; ++z)
      for (int y = 0; y < out.ny; ++y) {
        const double* irow = in + (static_cast<std::size_t>(z / 2) * x.ny + y / 2) * x.nx;
        double* orow = o + (static_cast<std::size_t>(z) * out.ny + y) * out.nx;
        for (int xo = 0; xo < out.nx; ++xo) orow[xo] = irow[xo / 2];
      }
  }
  const Id id = push(std::move(out), true);
  nodes_[id].backward = [xid](Tape& t, Id self) {
    if (!t.needs(xid)) return;
    const FeatureMap& go = t.nodes_[self].grad;
    FeatureMap& gi = t.ensure_grad(xid);
    for (int c = 0; c < go.channels; ++c) {
      const double* g = go.channel(c);
      double* d = gi.channel(c);
      for (int z = 0; z < go.nz; ++z)
        for (int y = 0; y < go.ny; ++y) {
          const double* grow = g + (static_cast<std::size_t>(z) * go.ny + y) * go.nx;
          double* drow = d + (static_cast<std::size_t>(z / 2) * gi.ny + y / 2) * gi.nx;
          for (int xo = 0; xo < go.nx; ++xo) drow[xo / 2] += grow[xo];
        }
    }
  };
  return id;
}

Tape::Id Tape::concat(Id aid, Id bid) {
  const FeatureMap& a = value(aid);
  const FeatureMap& b = value(bid);
  require(a.same_spatial(b), "concat: spatial dimensions differ");
  FeatureMap out(a.channels + b.channels, a.nx, a.ny, a.nz);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  const Id id = push(std::move(out), true);
  nodes_[id].backward = [aid, bid](Tape& t, Id self) {
    const FeatureMap& go = t.nodes_[self].grad;
    const std::size_t na = t.value(aid).data.size();
    if (t.needs(aid)) {
      FeatureMap& ga = t.ensure_grad(aid);
      for (std::size_t i = 0; i < na; ++i) ga.data[i] += go.data[i];
    }
    if (t.needs(bid)) {
      FeatureMap& gb = t.ensure_grad(bid);
      for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += go.data[na + i];
    }
  };
  return id;
}

}  // namespace qsmfine::nn
