#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prosona/common.hpp"
#include "prosona/nn.hpp"

namespace prosona::model {

struct Architecture {
  int height = 128;
  int width = 128;
  int in_channels = 1;
  int base_width = 16;
  int depth = 3;  // number of 2× downsamplings
  int latent_dim = 6;
  int text_dim = 64;
  int mlp_hidden = 128;
  double sigma_floor = 1e-5;
  std::string text_encoder = "fallback";

  /// Channels at pyramid level l: base · min(2^l, 2).
  [[nodiscard]] int level_channels(int level) const;
  [[nodiscard]] int feature_channels() const { return level_channels(depth); }
  [[nodiscard]] int injection_height() const { return height >> depth; }
  [[nodiscard]] int injection_width() const { return width >> depth; }
  void validate() const;
  bool operator==(const Architecture&) const = default;
};

struct LatentGaussian {
  std::vector<double> mu;
  std::vector<double> sigma;

  [[nodiscard]] int dim() const { return static_cast<int>(mu.size()); }
};

enum class LatentOrigin { prior_sample, posterior_sample, projected, fused, interpolated };

struct LatentCode {
  std::vector<double> z;
  LatentOrigin origin = LatentOrigin::prior_sample;

  [[nodiscard]] int dim() const { return static_cast<int>(z.size()); }
};

/// Deterministic encoder output: lowest-resolution features plus the skip pyramid.
struct EncoderOutput {
  nn::Tensor features;
  std::vector<nn::Tensor> pyramid;  // levels 0 .. depth-1
};

/// Probabilistic U-Net with a prior head on the shared encoder, a separate posterior
/// encoder over (image, mask), latent injection at the lowest decoder resolution, and the
/// two-layer prompt projection MLP. All parameters live in one ParameterSet.
class Model {
 public:
  struct InitOptions {
    bool zero_init_heads = true;       // prior/posterior heads start at mu = 0, sigma = softplus(0)
    bool zero_init_projection = false;  // projection output layer
  };

  Model(Architecture arch, std::uint64_t init_seed, InitOptions init);
  Model(Architecture arch, std::uint64_t init_seed) : Model(std::move(arch), init_seed, InitOptions{}) {}

  [[nodiscard]] const Architecture& arch() const { return arch_; }
  [[nodiscard]] nn::ParameterSet& params() { return params_; }
  [[nodiscard]] const nn::ParameterSet& params() const { return params_; }

  /// 0 = untrained, 1 = latent space trained, 2 = prompt projection trained.
  [[nodiscard]] int stage() const { return stage_; }
  void set_stage(int s) { stage_ = s; }

  // Graph-level building blocks (used by training and inference alike).
  struct EncodedVars {
    nn::Var features;
    std::vector<nn::Var> pyramid;
  };
  struct GaussianVars {
    nn::Var mu;
    nn::Var sigma;
  };
  EncodedVars encode(nn::Graph& g, nn::Var image) const;
  GaussianVars prior_head(nn::Graph& g, nn::Var features) const;
  GaussianVars posterior_head(nn::Graph& g, nn::Var image, nn::Var mask) const;
  nn::Var decode_logits(nn::Graph& g, const EncodedVars& enc, nn::Var z) const;
  nn::Var decode(nn::Graph& g, const EncodedVars& enc, nn::Var z) const;
  nn::Var project(nn::Graph& g, nn::Var embedding) const;

  [[nodiscard]] nn::Tensor image_tensor(const Image& image) const;
  [[nodiscard]] nn::Tensor mask_tensor(const Mask& mask) const;

 private:
  struct Block {
    nn::Conv2d first;
    nn::Conv2d second;
  };

  Architecture arch_;
  nn::ParameterSet params_;
  int stage_ = 0;
  std::vector<Block> encoder_;
  nn::Linear prior_;
  std::vector<nn::Conv2d> posterior_convs_;
  nn::Linear posterior_;
  nn::Conv2d inject_;
  std::vector<Block> decoder_;  // decoder_[l] produces level l
  nn::Conv2d output_;
  nn::Linear proj_hidden_;
  nn::Linear proj_out_;
};

// Plain (graph-free) forms of the backbone operations.

[[nodiscard]] EncoderOutput encode(const Model& m, const Image& image);
[[nodiscard]] LatentGaussian prior_head(const Model& m, const nn::Tensor& features);
[[nodiscard]] LatentGaussian posterior_head(const Model& m, const Image& image, const Mask& mask);
/// z = mu + sigma ⊙ noise.
[[nodiscard]] LatentCode sample(const LatentGaussian& g, std::span<const double> noise, LatentOrigin origin);
[[nodiscard]] ProbabilityMap decode(const Model& m, const EncoderOutput& enc, const LatentCode& z);

/// K×D standard normals from a seeded generator, row k = sample k.
[[nodiscard]] std::vector<std::vector<double>> standard_normal_rows(std::uint64_t seed, int rows, int dim);

[[nodiscard]] ProbabilityMap to_probability_map(const nn::Tensor& t);

}  // namespace prosona::model
