#include "prosona/nn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace prosona::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

void require(bool cond, const char* msg) {
  if (!cond) throw ValidationError(msg);
}

// col has (C*k*k) rows and H*W columns.
void im2col(const Tensor& x, int k, std::vector<double>& col) {
  const int c = x.channels, h = x.height, w = x.width;
  const std::size_t hw = x.plane();
  col.assign(static_cast<std::size_t>(c) * k * k * hw, 0.0);
  const int pad = k / 2;
  for (int ci = 0; ci < c; ++ci) {
    const double* src = x.data.data() + ci * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int yy = 0; yy < h; ++yy) {
          const int sy = yy + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const double* srow = src + static_cast<std::size_t>(sy) * w;
          double* drow = dst + static_cast<std::size_t>(yy) * w;
          for (int xx = x0; xx < x1; ++xx) drow[xx] = srow[xx + dx];
        }
      }
    }
  }
}

void col2im_add(const std::vector<double>& col, int k, Tensor& dx) {
  const int c = dx.channels, h = dx.height, w = dx.width;
  const std::size_t hw = dx.plane();
  const int pad = k / 2;
  for (int ci = 0; ci < c; ++ci) {
    double* dst = dx.data.data() + ci * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        const int ddx = kx - pad;
        const int x0 = std::max(0, -ddx), x1 = std::min(w, w - ddx);
        for (int yy = 0; yy < h; ++yy) {
          const int sy = yy + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const double* srow = src + static_cast<std::size_t>(yy) * w;
          double* drow = dst + static_cast<std::size_t>(sy) * w;
          for (int xx = x0; xx < x1; ++xx) drow[xx + ddx] += srow[xx];
        }
      }
    }
  }
}

thread_local std::vector<double> t_col;
thread_local std::vector<double> t_dcol;
thread_local std::vector<double> t_pad;
thread_local std::vector<double> t_outp;
thread_local std::vector<double> t_dxp;

// 3×3 convs with enough input channels run as nine shifted GEMMs over a zero-padded
// copy of the input, laid out with row stride W+2. Output position (y, x) of tap (ky, kx)
// reads padded index (y+ky)·(W+2) + x+kx, so every tap is one contiguous slice of length
// H·(W+2); the two extra columns per row are discarded.
constexpr int kShiftMinChannels = 4;

// Eigen reductions and matrix-vector kernels over unaligned maps peel a head whose length
// depends on the buffer address, so their rounding would vary with heap layout. Sums and
// 1×1 convs use fixed-order loops instead.
double ordered_sum(const double* p, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += p[i];
  return acc;
}

void pointwise_forward(const double* w, int out_channels, const Tensor& x, Tensor& y) {
  const std::size_t hw = x.plane();
  for (int o = 0; o < out_channels; ++o) {
    double* dst = y.data.data() + o * hw;
    for (int c = 0; c < x.channels; ++c) {
      const double wc = w[static_cast<std::size_t>(o) * x.channels + c];
      const double* src = x.data.data() + c * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += wc * src[i];
    }
  }
}

void pointwise_backward(const double* w, double* dw, int out_channels, const Tensor& x, const Tensor& dy, Tensor* dx) {
  const std::size_t hw = x.plane();
  for (int o = 0; o < out_channels; ++o) {
    const double* g = dy.data.data() + o * hw;
    for (int c = 0; c < x.channels; ++c) {
      const std::size_t wi = static_cast<std::size_t>(o) * x.channels + c;
      const double* src = x.data.data() + c * hw;
      if (dw != nullptr) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += g[i] * src[i];
        dw[wi] += acc;
      }
      if (dx != nullptr) {
        double* dst = dx->data.data() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] += w[wi] * g[i];
      }
    }
  }
}

using StridedMap = Eigen::Map<RowMat, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
using CSliceMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using SliceMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

struct PadGeometry {
  int h, w, wp;
  std::size_t plane;  // (h+2)(w+2)
  Eigen::Index len;   // h·(w+2)
  explicit PadGeometry(const Tensor& x)
      : h(x.height), w(x.width), wp(x.width + 2), plane(static_cast<std::size_t>(x.height + 2) * (x.width + 2)),
        len(static_cast<Eigen::Index>(x.height) * (x.width + 2)) {}
  [[nodiscard]] Eigen::Index offset(int tap) const { return (tap / 3) * wp + tap % 3; }
};

void pad_input(const Tensor& x, const PadGeometry& g, std::vector<double>& out) {
  out.assign(static_cast<std::size_t>(x.channels) * g.plane + 2, 0.0);
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < g.h; ++y)
      std::copy_n(x.data.data() + (static_cast<std::size_t>(c) * g.h + y) * g.w, g.w,
                  out.data() + c * g.plane + static_cast<std::size_t>(y + 1) * g.wp + 1);
}

CStridedMap tap_weights(const double* w, int out, int in, int tap) {
  return CStridedMap(w + tap, out, in, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(static_cast<Eigen::Index>(in) * 9, 9));
}

void shift_conv_forward(const double* w, int out_channels, const Tensor& x, Tensor& y) {
  const PadGeometry g(x);
  pad_input(x, g, t_pad);
  t_outp.assign(static_cast<std::size_t>(out_channels) * g.len, 0.0);
  MapRM outp(t_outp.data(), out_channels, g.len);
  for (int t = 0; t < 9; ++t) {
    CSliceMap xs(t_pad.data() + g.offset(t), x.channels, g.len, Eigen::OuterStride<>(static_cast<Eigen::Index>(g.plane)));
    outp.noalias() += tap_weights(w, out_channels, x.channels, t) * xs;
  }
  for (int o = 0; o < out_channels; ++o)
    for (int r = 0; r < g.h; ++r)
      std::copy_n(t_outp.data() + o * g.len + static_cast<Eigen::Index>(r) * g.wp, g.w,
                  y.data.data() + (static_cast<std::size_t>(o) * g.h + r) * g.w);
}

/// dW += dY ⋆ X and/or dX += Wᵀ ⋆ dY for the shifted layout.
void shift_conv_backward(const double* w, double* dw, int out_channels, const Tensor& x, const Tensor& dy, Tensor* dx) {
  const PadGeometry g(x);
  t_outp.assign(static_cast<std::size_t>(out_channels) * g.len, 0.0);
  for (int o = 0; o < out_channels; ++o)
    for (int r = 0; r < g.h; ++r)
      std::copy_n(dy.data.data() + (static_cast<std::size_t>(o) * g.h + r) * g.w, g.w,
                  t_outp.data() + o * g.len + static_cast<Eigen::Index>(r) * g.wp);
  CMapRM doutp(t_outp.data(), out_channels, g.len);
  const int ci = x.channels;
  if (dw != nullptr) {
    pad_input(x, g, t_pad);
    for (int t = 0; t < 9; ++t) {
      CSliceMap xs(t_pad.data() + g.offset(t), ci, g.len, Eigen::OuterStride<>(static_cast<Eigen::Index>(g.plane)));
      StridedMap dwt(dw + t, out_channels, ci, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(static_cast<Eigen::Index>(ci) * 9, 9));
      dwt.noalias() += doutp * xs.transpose();
    }
  }
  if (dx != nullptr) {
    t_dxp.assign(static_cast<std::size_t>(ci) * g.plane + 2, 0.0);
    for (int t = 0; t < 9; ++t) {
      SliceMap dxs(t_dxp.data() + g.offset(t), ci, g.len, Eigen::OuterStride<>(static_cast<Eigen::Index>(g.plane)));
      dxs.noalias() += tap_weights(w, out_channels, ci, t).transpose() * doutp;
    }
    for (int c = 0; c < ci; ++c)
      for (int r = 0; r < g.h; ++r) {
        const double* src = t_dxp.data() + c * g.plane + static_cast<std::size_t>(r + 1) * g.wp + 1;
        double* dst = dx->data.data() + (static_cast<std::size_t>(c) * g.h + r) * g.w;
        for (int q = 0; q < g.w; ++q) dst[q] += src[q];
      }
  }
}

}  // namespace

Tensor Tensor::vector(std::span<const double> v) {
  Tensor t(static_cast<int>(v.size()), 1, 1);
  std::copy(v.begin(), v.end(), t.data.begin());
  return t;
}

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::prior_head: return "prior_head";
    case ParamGroup::posterior: return "posterior";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::projector: return "projector";
  }
  return "?";
}

std::size_t ParameterSet::add(std::string name, ParamGroup group, std::size_t size) {
  const std::size_t offset = values_.size();
  blocks_.push_back({std::move(name), group, offset, size});
  values_.resize(offset + size, 0.0);
  return offset;
}

bool ParameterSet::in_group(std::size_t index, ParamGroup g) const {
  for (const auto& b : blocks_) {
    if (index >= b.offset && index < b.offset + b.size) return b.group == g;
  }
  return false;
}

std::vector<std::uint8_t> ParameterSet::group_index() const {
  std::vector<std::uint8_t> out(values_.size());
  for (const auto& b : blocks_) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size, static_cast<std::uint8_t>(b.group));
  return out;
}

Conv2d Conv2d::create(ParameterSet& ps, const std::string& name, ParamGroup group, int in, int out, int kernel) {
  if (kernel != 1 && kernel != 3) throw ValidationError("Conv2d: kernel must be 1 or 3");
  Conv2d c;
  c.in_channels = in;
  c.out_channels = out;
  c.kernel = kernel;
  c.group = group;
  c.weight = ps.add(name + ".weight", group, c.weight_count());
  c.bias = ps.add(name + ".bias", group, static_cast<std::size_t>(out));
  return c;
}

Linear Linear::create(ParameterSet& ps, const std::string& name, ParamGroup group, int in, int out) {
  Linear l;
  l.in_features = in;
  l.out_features = out;
  l.group = group;
  l.weight = ps.add(name + ".weight", group, static_cast<std::size_t>(in) * out);
  l.bias = ps.add(name + ".bias", group, static_cast<std::size_t>(out));
  return l;
}

void init_conv(std::span<double> params, const Conv2d& c, std::mt19937_64& rng, Init init) {
  const double std = std::sqrt(2.0 / (c.in_channels * c.kernel * c.kernel));
  std::normal_distribution<double> g(0.0, std);
  for (std::size_t i = 0; i < c.weight_count(); ++i) params[c.weight + i] = init == Init::he ? g(rng) : 0.0;
  for (int i = 0; i < c.out_channels; ++i) params[c.bias + i] = 0.0;
}

void init_linear(std::span<double> params, const Linear& l, std::mt19937_64& rng, Init init) {
  std::normal_distribution<double> g(0.0, std::sqrt(2.0 / l.in_features));
  const std::size_t n = static_cast<std::size_t>(l.in_features) * l.out_features;
  for (std::size_t i = 0; i < n; ++i) params[l.weight + i] = init == Init::he ? g(rng) : 0.0;
  for (int i = 0; i < l.out_features; ++i) params[l.bias + i] = 0.0;
}

namespace kernels {

void conv_forward(std::span<const double> params, const Conv2d& c, const Tensor& x, Tensor& y) {
  require(x.channels == c.in_channels, "conv: input channel mismatch");
  const int hw = static_cast<int>(x.plane());
  y = Tensor(c.out_channels, x.height, x.width);
  CMapRM w(params.data() + c.weight, c.out_channels, static_cast<Eigen::Index>(c.in_channels) * c.kernel * c.kernel);
  MapRM out(y.data.data(), c.out_channels, hw);
  if (c.kernel == 1) {
    pointwise_forward(params.data() + c.weight, c.out_channels, x, y);
  } else if (c.in_channels >= kShiftMinChannels) {
    shift_conv_forward(params.data() + c.weight, c.out_channels, x, y);
  } else {
    im2col(x, c.kernel, t_col);
    CMapRM col(t_col.data(), w.cols(), hw);
    out.noalias() = w * col;
  }
  for (int o = 0; o < c.out_channels; ++o) out.row(o).array() += params[c.bias + o];
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> y(x.size());
  if (x.empty()) return y;
  const double m = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - m);
    sum += y[i];
  }
  for (auto& v : y) v /= sum;
  return y;
}

}  // namespace kernels

Graph::Graph(std::span<const double> params, std::span<double> grads, GroupMask trainable)
    : params_(params), grads_(grads), trainable_(trainable) {
  if (!grads_.empty() && grads_.size() != params_.size()) throw ValidationError("Graph: gradient buffer size mismatch");
}

Var Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&, Var)> back) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, requires_grad ? std::move(back) : nullptr});
  return nodes_.size() - 1;
}

Var Graph::constant(Tensor t) { return push(std::move(t), false, nullptr); }

Var Graph::leaf(Tensor t) { return push(std::move(t), true, nullptr); }

Tensor& Graph::grad_buffer(Var v) {
  auto& n = nodes_[v];
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.channels, n.value.height, n.value.width);
  return n.grad;
}

const Tensor& Graph::grad(Var v) {
  return grad_buffer(v);
}

void Graph::accumulate_grad(Var v, const Tensor& g) { accumulate_grad(v, std::span<const double>(g.data)); }

void Graph::accumulate_grad(Var v, std::span<const double> g) {
  if (!nodes_[v].requires_grad) return;
  auto& buf = grad_buffer(v);
  require(buf.size() == g.size(), "accumulate_grad: size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g[i];
}

void Graph::backward() {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || !n.back || n.grad.size() == 0) continue;
    n.back(*this, i);
  }
}

Var Graph::conv(Var x, const Conv2d& layer) {
  Tensor y;
  kernels::conv_forward(params_, layer, value(x), y);
  const bool rg = requires_grad(x) || trains(layer.group);
  return push(std::move(y), rg, [x, layer](Graph& g, Var self) {
    const Tensor& in = g.value(x);
    const Tensor& dy = g.nodes_[self].grad;
    const int hw = static_cast<int>(in.plane());
    const Eigen::Index cols = static_cast<Eigen::Index>(layer.in_channels) * layer.kernel * layer.kernel;
    CMapRM d_out(dy.data.data(), layer.out_channels, hw);
    const bool need_dx = g.requires_grad(x);
    const bool need_dw = g.trains(layer.group);
    if (layer.kernel == 1) {
      if (need_dw) {
        for (int o = 0; o < layer.out_channels; ++o) g.grads_[layer.bias + o] += ordered_sum(dy.data.data() + static_cast<std::size_t>(o) * hw, hw);
      }
      pointwise_backward(g.params_.data() + layer.weight, need_dw ? g.grads_.data() + layer.weight : nullptr, layer.out_channels,
                         in, dy, need_dx ? &g.grad_buffer(x) : nullptr);
      return;
    }
    if (layer.kernel == 3 && layer.in_channels >= kShiftMinChannels) {
      if (need_dw) {
        for (int o = 0; o < layer.out_channels; ++o) g.grads_[layer.bias + o] += ordered_sum(dy.data.data() + static_cast<std::size_t>(o) * hw, hw);
      }
      shift_conv_backward(g.params_.data() + layer.weight, need_dw ? g.grads_.data() + layer.weight : nullptr,
                          layer.out_channels, in, dy, need_dx ? &g.grad_buffer(x) : nullptr);
      return;
    }
    const double* in_ptr = in.data.data();
    if (layer.kernel == 3 && need_dw) {
      im2col(in, 3, t_col);
      in_ptr = t_col.data();
    }
    if (need_dw) {
      CMapRM col(in_ptr, cols, hw);
      MapRM dw(g.grads_.data() + layer.weight, layer.out_channels, cols);
      dw.noalias() += d_out * col.transpose();
      for (int o = 0; o < layer.out_channels; ++o) g.grads_[layer.bias + o] += ordered_sum(dy.data.data() + static_cast<std::size_t>(o) * hw, hw);
    }
    if (need_dx) {
      CMapRM w(g.params_.data() + layer.weight, layer.out_channels, cols);
      Tensor& dx = g.grad_buffer(x);
      if (layer.kernel == 1) {
        MapRM dxm(dx.data.data(), layer.in_channels, hw);
        dxm.noalias() += w.transpose() * d_out;
      } else {
        t_dcol.resize(static_cast<std::size_t>(cols) * hw);
        MapRM dcol(t_dcol.data(), cols, hw);
        dcol.noalias() = w.transpose() * d_out;
        col2im_add(t_dcol, 3, dx);
      }
    }
  });
}

Var Graph::linear(Var x, const Linear& layer) {
  const Tensor& in = value(x);
  require(static_cast<int>(in.size()) == layer.in_features, "linear: input size mismatch");
  Tensor y(layer.out_features, 1, 1);
  for (int o = 0; o < layer.out_features; ++o) {
    double acc = params_[layer.bias + o];
    const double* w = params_.data() + layer.weight + static_cast<std::size_t>(o) * layer.in_features;
    for (int i = 0; i < layer.in_features; ++i) acc += w[i] * in.data[i];
    y.data[o] = acc;
  }
  const bool rg = requires_grad(x) || trains(layer.group);
  return push(std::move(y), rg, [x, layer](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    const Tensor& in = g.value(x);
    if (g.trains(layer.group)) {
      for (int o = 0; o < layer.out_features; ++o) {
        double* dw = g.grads_.data() + layer.weight + static_cast<std::size_t>(o) * layer.in_features;
        for (int i = 0; i < layer.in_features; ++i) dw[i] += dy.data[o] * in.data[i];
        g.grads_[layer.bias + o] += dy.data[o];
      }
    }
    if (g.requires_grad(x)) {
      Tensor& dx = g.grad_buffer(x);
      for (int o = 0; o < layer.out_features; ++o) {
        const double* w = g.params_.data() + layer.weight + static_cast<std::size_t>(o) * layer.in_features;
        for (int i = 0; i < layer.in_features; ++i) dx.data[i] += dy.data[o] * w[i];
      }
    }
  });
}

Var Graph::relu(Var x) {
  Tensor y = value(x);
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(y), requires_grad(x), [x](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    const Tensor& y = g.value(self);
    Tensor& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (y.data[i] > 0.0) dx.data[i] += dy.data[i];
    }
  });
}

Var Graph::sigmoid(Var x) {
  Tensor y = value(x);
  for (auto& v : y.data) v = kernels::sigmoid(v);
  return push(std::move(y), requires_grad(x), [x](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    const Tensor& y = g.value(self);
    Tensor& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

Var Graph::softplus_floor(Var x, double floor) {
  Tensor y = value(x);
  for (auto& v : y.data) v = std::max(kernels::softplus(v), floor);
  return push(std::move(y), requires_grad(x), [x, floor](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    const Tensor& in = g.value(x);
    Tensor& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (kernels::softplus(in.data[i]) > floor) dx.data[i] += dy.data[i] * kernels::sigmoid(in.data[i]);
    }
  });
}

Var Graph::avg_pool2(Var x) {
  const Tensor& in = value(x);
  require(in.height % 2 == 0 && in.width % 2 == 0, "avg_pool2: spatial dims must be even");
  Tensor y(in.channels, in.height / 2, in.width / 2);
  for (int c = 0; c < in.channels; ++c)
    for (int yy = 0; yy < y.height; ++yy)
      for (int xx = 0; xx < y.width; ++xx)
        y.at(c, yy, xx) = 0.25 * (in.at(c, 2 * yy, 2 * xx) + in.at(c, 2 * yy, 2 * xx + 1) + in.at(c, 2 * yy + 1, 2 * xx) +
                                  in.at(c, 2 * yy + 1, 2 * xx + 1));
  return push(std::move(y), requires_grad(x), [x](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    Tensor& dx = g.grad_buffer(x);
    for (int c = 0; c < dy.channels; ++c)
      for (int yy = 0; yy < dy.height; ++yy)
        for (int xx = 0; xx < dy.width; ++xx) {
          const double v = 0.25 * dy.at(c, yy, xx);
          dx.at(c, 2 * yy, 2 * xx) += v;
          dx.at(c, 2 * yy, 2 * xx + 1) += v;
          dx.at(c, 2 * yy + 1, 2 * xx) += v;
          dx.at(c, 2 * yy + 1, 2 * xx + 1) += v;
        }
  });
}

Var Graph::upsample2(Var x) {
  const Tensor& in = value(x);
  Tensor y(in.channels, in.height * 2, in.width * 2);
  for (int c = 0; c < y.channels; ++c)
    for (int yy = 0; yy < y.height; ++yy)
      for (int xx = 0; xx < y.width; ++xx) y.at(c, yy, xx) = in.at(c, yy / 2, xx / 2);
  return push(std::move(y), requires_grad(x), [x](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    Tensor& dx = g.grad_buffer(x);
    for (int c = 0; c < dy.channels; ++c)
      for (int yy = 0; yy < dy.height; ++yy)
        for (int xx = 0; xx < dy.width; ++xx) dx.at(c, yy / 2, xx / 2) += dy.at(c, yy, xx);
  });
}

Var Graph::concat(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.height == tb.height && ta.width == tb.width, "concat: spatial mismatch");
  Tensor y(ta.channels + tb.channels, ta.height, ta.width);
  std::copy(ta.data.begin(), ta.data.end(), y.data.begin());
  std::copy(tb.data.begin(), tb.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(ta.size()));
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(y), rg, [a, b](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    const std::size_t na = g.value(a).size();
    if (g.requires_grad(a)) {
      Tensor& da = g.grad_buffer(a);
      for (std::size_t i = 0; i < na; ++i) da.data[i] += dy.data[i];
    }
    if (g.requires_grad(b)) {
      Tensor& db = g.grad_buffer(b);
      for (std::size_t i = 0; i < db.size(); ++i) db.data[i] += dy.data[na + i];
    }
  });
}

Var Graph::broadcast(Var z, int height, int width) {
  const Tensor& in = value(z);
  require(in.height == 1 && in.width == 1, "broadcast: expected a C×1×1 tensor");
  Tensor y(in.channels, height, width);
  for (int c = 0; c < in.channels; ++c) {
    std::fill_n(y.data.begin() + static_cast<std::ptrdiff_t>(c * y.plane()), y.plane(), in.data[c]);
  }
  return push(std::move(y), requires_grad(z), [z](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    Tensor& dz = g.grad_buffer(z);
    const std::size_t p = dy.plane();
    for (int c = 0; c < dy.channels; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < p; ++i) s += dy.data[c * p + i];
      dz.data[c] += s;
    }
  });
}

Var Graph::global_avg_pool(Var x) {
  const Tensor& in = value(x);
  Tensor y(in.channels, 1, 1);
  const std::size_t p = in.plane();
  for (int c = 0; c < in.channels; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < p; ++i) s += in.data[c * p + i];
    y.data[c] = s / static_cast<double>(p);
  }
  return push(std::move(y), requires_grad(x), [x](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    Tensor& dx = g.grad_buffer(x);
    const std::size_t p = dx.plane();
    for (int c = 0; c < dx.channels; ++c) {
      const double v = dy.data[c] / static_cast<double>(p);
      for (std::size_t i = 0; i < p; ++i) dx.data[c * p + i] += v;
    }
  });
}

Var Graph::slice_channels(Var x, int begin, int count) {
  const Tensor& in = value(x);
  require(begin >= 0 && count >= 0 && begin + count <= in.channels, "slice_channels: out of range");
  Tensor y(count, in.height, in.width);
  const std::size_t p = in.plane();
  std::copy_n(in.data.begin() + static_cast<std::ptrdiff_t>(begin * p), count * p, y.data.begin());
  return push(std::move(y), requires_grad(x), [x, begin](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    Tensor& dx = g.grad_buffer(x);
    const std::size_t off = begin * dx.plane();
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[off + i] += dy.data[i];
  });
}

Var Graph::reparameterize(Var mu, Var sigma, std::span<const double> noise) {
  const Tensor& m = value(mu);
  const Tensor& s = value(sigma);
  require(m.same_shape(s) && noise.size() == m.size(), "reparameterize: dimension mismatch");
  Tensor z = m;
  for (std::size_t i = 0; i < z.size(); ++i) z.data[i] = m.data[i] + s.data[i] * noise[i];
  std::vector<double> eps(noise.begin(), noise.end());
  const bool rg = requires_grad(mu) || requires_grad(sigma);
  return push(std::move(z), rg, [mu, sigma, eps = std::move(eps)](Graph& g, Var self) {
    const Tensor& dz = g.nodes_[self].grad;
    if (g.requires_grad(mu)) {
      Tensor& d = g.grad_buffer(mu);
      for (std::size_t i = 0; i < dz.size(); ++i) d.data[i] += dz.data[i];
    }
    if (g.requires_grad(sigma)) {
      Tensor& d = g.grad_buffer(sigma);
      for (std::size_t i = 0; i < dz.size(); ++i) d.data[i] += dz.data[i] * eps[i];
    }
  });
}

Var Graph::dot_scores(Var query, const std::vector<Tensor>& keys, double scale) {
  const Tensor& q = value(query);
  Tensor s(static_cast<int>(keys.size()), 1, 1);
  for (std::size_t k = 0; k < keys.size(); ++k) {
    require(keys[k].size() == q.size(), "dot_scores: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) acc += q.data[i] * keys[k].data[i];
    s.data[k] = acc * scale;
  }
  return push(std::move(s), requires_grad(query), [query, keys, scale](Graph& g, Var self) {
    const Tensor& ds = g.nodes_[self].grad;
    Tensor& dq = g.grad_buffer(query);
    for (std::size_t k = 0; k < keys.size(); ++k) {
      for (std::size_t i = 0; i < dq.size(); ++i) dq.data[i] += ds.data[k] * scale * keys[k].data[i];
    }
  });
}

Var Graph::softmax(Var x) {
  Tensor y = value(x);
  y.data = kernels::softmax(value(x).data);
  return push(std::move(y), requires_grad(x), [x](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    const Tensor& y = g.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += dy.data[i] * y.data[i];
    Tensor& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < y.size(); ++i) dx.data[i] += y.data[i] * (dy.data[i] - dot);
  });
}

Var Graph::weighted_sum(Var weights, const std::vector<Tensor>& items) {
  const Tensor& w = value(weights);
  require(w.size() == items.size() && !items.empty(), "weighted_sum: weight count mismatch");
  Tensor z(items[0].channels, items[0].height, items[0].width);
  for (std::size_t k = 0; k < items.size(); ++k) {
    require(items[k].same_shape(z), "weighted_sum: item shape mismatch");
    for (std::size_t i = 0; i < z.size(); ++i) z.data[i] += w.data[k] * items[k].data[i];
  }
  return push(std::move(z), requires_grad(weights), [weights, items](Graph& g, Var self) {
    const Tensor& dz = g.nodes_[self].grad;
    Tensor& dw = g.grad_buffer(weights);
    for (std::size_t k = 0; k < items.size(); ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < dz.size(); ++i) acc += dz.data[i] * items[k].data[i];
      dw.data[k] += acc;
    }
  });
}

Var Graph::lerp(Var a, Var b, double t) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "lerp: shape mismatch");
  Tensor y = ta;
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = (1.0 - t) * ta.data[i] + t * tb.data[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(y), rg, [a, b, t](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    if (g.requires_grad(a)) {
      Tensor& d = g.grad_buffer(a);
      for (std::size_t i = 0; i < dy.size(); ++i) d.data[i] += (1.0 - t) * dy.data[i];
    }
    if (g.requires_grad(b)) {
      Tensor& d = g.grad_buffer(b);
      for (std::size_t i = 0; i < dy.size(); ++i) d.data[i] += t * dy.data[i];
    }
  });
}

Var Graph::l2_normalize(Var x) {
  constexpr double kEps = 1e-12;
  const Tensor& in = value(x);
  double sq = 0.0;
  for (double v : in.data) sq += v * v;
  const double norm = std::sqrt(sq + kEps * kEps);
  Tensor y = in;
  for (auto& v : y.data) v /= norm;
  return push(std::move(y), requires_grad(x), [x, norm](Graph& g, Var self) {
    const Tensor& dy = g.nodes_[self].grad;
    const Tensor& y = g.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += dy.data[i] * y.data[i];
    Tensor& dx = g.grad_buffer(x);
    for (std::size_t i = 0; i < y.size(); ++i) dx.data[i] += (dy.data[i] - y.data[i] * dot) / norm;
  });
}

}  // namespace prosona::nn
