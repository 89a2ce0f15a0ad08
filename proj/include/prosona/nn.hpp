#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "prosona/common.hpp"

namespace prosona::nn {

/// Dense CHW tensor of doubles. Latent vectors are D×1×1.
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  [[nodiscard]] static Tensor vector(std::span<const double> v);
  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  [[nodiscard]] double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  [[nodiscard]] bool same_shape(const Tensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

enum class ParamGroup : std::uint8_t { encoder = 0, prior_head, posterior, decoder, projector };
inline constexpr int kParamGroupCount = 5;
[[nodiscard]] const char* to_string(ParamGroup g);

/// Bit set over ParamGroup.
class GroupMask {
 public:
  constexpr GroupMask() = default;
  constexpr GroupMask(std::initializer_list<ParamGroup> groups) {
    for (auto g : groups) bits_ |= bit(g);
  }
  [[nodiscard]] static constexpr GroupMask all() {
    GroupMask m;
    m.bits_ = (1u << kParamGroupCount) - 1;
    return m;
  }
  [[nodiscard]] constexpr bool contains(ParamGroup g) const { return (bits_ & bit(g)) != 0; }
  [[nodiscard]] constexpr bool empty() const { return bits_ == 0; }

 private:
  static constexpr unsigned bit(ParamGroup g) { return 1u << static_cast<unsigned>(g); }
  unsigned bits_ = 0;
};

struct ParamBlock {
  std::string name;
  ParamGroup group;
  std::size_t offset;
  std::size_t size;
};

/// All model parameters in one flat vector, addressed by named blocks.
class ParameterSet {
 public:
  std::size_t add(std::string name, ParamGroup group, std::size_t size);

  [[nodiscard]] std::span<double> values() { return values_; }
  [[nodiscard]] std::span<const double> values() const { return values_; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] const std::vector<ParamBlock>& blocks() const { return blocks_; }
  [[nodiscard]] bool in_group(std::size_t index, ParamGroup g) const;
  [[nodiscard]] std::vector<std::uint8_t> group_index() const;

 private:
  std::vector<ParamBlock> blocks_;
  std::vector<double> values_;
};

/// Same-padding conv (kernel 1 or 3), stride 1. Weight layout [out][in][k][k].
struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  std::size_t weight = 0;
  std::size_t bias = 0;
  ParamGroup group = ParamGroup::encoder;

  static Conv2d create(ParameterSet& ps, const std::string& name, ParamGroup group, int in, int out, int kernel);
  [[nodiscard]] std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
};

/// y = W x + b on D×1×1 tensors. Weight layout [out][in].
struct Linear {
  int in_features = 0;
  int out_features = 0;
  std::size_t weight = 0;
  std::size_t bias = 0;
  ParamGroup group = ParamGroup::encoder;

  static Linear create(ParameterSet& ps, const std::string& name, ParamGroup group, int in, int out);
};

enum class Init { he, zero };
void init_conv(std::span<double> params, const Conv2d& c, std::mt19937_64& rng, Init init = Init::he);
void init_linear(std::span<double> params, const Linear& l, std::mt19937_64& rng, Init init = Init::he);

using Var = std::size_t;

/// Reverse-mode tape over Tensor-valued ops. One Graph per forward pass; parameter
/// gradients accumulate into `grads` for groups in `trainable`. Not thread-safe; use one
/// Graph per worker with its own gradient buffer.
class Graph {
 public:
  Graph(std::span<const double> params, std::span<double> grads = {}, GroupMask trainable = {});

  Var constant(Tensor t);
  /// A leaf whose gradient is kept (e.g. a latent code probed in tests).
  Var leaf(Tensor t);

  [[nodiscard]] const Tensor& value(Var v) const { return nodes_[v].value; }
  [[nodiscard]] const Tensor& grad(Var v);
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v].requires_grad; }
  /// Adds g to the upstream gradient of v (seeding the backward pass).
  void accumulate_grad(Var v, const Tensor& g);
  void accumulate_grad(Var v, std::span<const double> g);
  void backward();

  Var conv(Var x, const Conv2d& layer);
  Var linear(Var x, const Linear& layer);
  Var relu(Var x);
  Var sigmoid(Var x);
  /// max(softplus(x), floor); gradient is zero where the floor is active.
  Var softplus_floor(Var x, double floor);
  Var avg_pool2(Var x);
  Var upsample2(Var x);
  Var concat(Var a, Var b);
  Var broadcast(Var z, int height, int width);
  Var global_avg_pool(Var x);
  Var slice_channels(Var x, int begin, int count);
  /// mu + sigma ⊙ noise
  Var reparameterize(Var mu, Var sigma, std::span<const double> noise);
  Var dot_scores(Var query, const std::vector<Tensor>& keys, double scale);
  Var softmax(Var x);
  Var weighted_sum(Var weights, const std::vector<Tensor>& items);
  Var lerp(Var a, Var b, double t);
  Var l2_normalize(Var x);

  [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Graph&, Var)> back;
  };

  Var push(Tensor value, bool requires_grad, std::function<void(Graph&, Var)> back);
  Tensor& grad_buffer(Var v);
  [[nodiscard]] bool trains(ParamGroup g) const { return !grads_.empty() && trainable_.contains(g); }

  std::span<const double> params_;
  std::span<double> grads_;
  GroupMask trainable_;
  std::vector<Node> nodes_;
};

/// Kernels shared by Graph ops and by plain inference code.
namespace kernels {
void conv_forward(std::span<const double> params, const Conv2d& c, const Tensor& x, Tensor& y);
[[nodiscard]] double softplus(double x);
[[nodiscard]] double sigmoid(double x);
[[nodiscard]] std::vector<double> softmax(std::span<const double> x);
}  // namespace kernels

}  // namespace prosona::nn
