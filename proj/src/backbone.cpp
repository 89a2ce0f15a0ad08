#include "prosona/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace prosona::model {

using nn::Graph;
using nn::ParamGroup;
using nn::Tensor;
using nn::Var;

int Architecture::level_channels(int level) const { return base_width * std::min(1 << level, 2); }

void Architecture::validate() const {
  if (depth < 1) throw ConfigError("architecture: depth must be >= 1");
  if (base_width < 1 || latent_dim < 1 || text_dim < 1 || mlp_hidden < 1 || in_channels < 1)
    throw ConfigError("architecture: widths and dimensions must be positive");
  const int factor = 1 << depth;
  if (height % factor != 0 || width % factor != 0)
    throw ConfigError("architecture: H and W must be divisible by 2^depth = " + std::to_string(factor));
  if (!(sigma_floor > 0.0)) throw ConfigError("architecture: sigma_floor must be positive");
}

Model::Model(Architecture arch, std::uint64_t init_seed, InitOptions init) : arch_(std::move(arch)) {
  arch_.validate();
  const int d = arch_.latent_dim;
  for (int l = 0; l <= arch_.depth; ++l) {
    const int in = l == 0 ? arch_.in_channels : arch_.level_channels(l - 1);
    const int out = arch_.level_channels(l);
    const std::string name = "encoder.level" + std::to_string(l);
    encoder_.push_back({nn::Conv2d::create(params_, name + ".conv1", ParamGroup::encoder, in, out, 3),
                        nn::Conv2d::create(params_, name + ".conv2", ParamGroup::encoder, out, out, 3)});
  }
  prior_ = nn::Linear::create(params_, "prior.head", ParamGroup::prior_head, arch_.feature_channels(), 2 * d);
  for (int l = 0; l <= arch_.depth; ++l) {
    const int in = l == 0 ? arch_.in_channels + 1 : arch_.level_channels(l - 1);
    posterior_convs_.push_back(nn::Conv2d::create(params_, "posterior.level" + std::to_string(l), ParamGroup::posterior, in,
                                                  arch_.level_channels(l), 3));
  }
  posterior_ = nn::Linear::create(params_, "posterior.head", ParamGroup::posterior, arch_.feature_channels(), 2 * d);
  inject_ = nn::Conv2d::create(params_, "decoder.inject", ParamGroup::decoder, arch_.feature_channels() + d,
                               arch_.feature_channels(), 3);
  decoder_.resize(static_cast<std::size_t>(arch_.depth));
  for (int l = arch_.depth - 1; l >= 0; --l) {
    const int up = arch_.level_channels(l + 1);
    const int skip = arch_.level_channels(l);
    const std::string name = "decoder.level" + std::to_string(l);
    decoder_[l] = {nn::Conv2d::create(params_, name + ".conv1", ParamGroup::decoder, up + skip, skip, 3),
                   nn::Conv2d::create(params_, name + ".conv2", ParamGroup::decoder, skip, skip, 3)};
  }
  output_ = nn::Conv2d::create(params_, "decoder.output", ParamGroup::decoder, arch_.level_channels(0), 1, 1);
  proj_hidden_ = nn::Linear::create(params_, "projector.hidden", ParamGroup::projector, arch_.text_dim, arch_.mlp_hidden);
  proj_out_ = nn::Linear::create(params_, "projector.out", ParamGroup::projector, arch_.mlp_hidden, d);

  std::mt19937_64 rng(init_seed);
  auto p = params_.values();
  for (const auto& b : encoder_) {
    nn::init_conv(p, b.first, rng);
    nn::init_conv(p, b.second, rng);
  }
  const auto head_init = init.zero_init_heads ? nn::Init::zero : nn::Init::he;
  nn::init_linear(p, prior_, rng, head_init);
  for (const auto& c : posterior_convs_) nn::init_conv(p, c, rng);
  nn::init_linear(p, posterior_, rng, head_init);
  nn::init_conv(p, inject_, rng);
  for (const auto& b : decoder_) {
    nn::init_conv(p, b.first, rng);
    nn::init_conv(p, b.second, rng);
  }
  nn::init_conv(p, output_, rng);
  nn::init_linear(p, proj_hidden_, rng);
  nn::init_linear(p, proj_out_, rng, init.zero_init_projection ? nn::Init::zero : nn::Init::he);
}

Model::EncodedVars Model::encode(Graph& g, Var image) const {
  const Tensor& x = g.value(image);
  if (x.channels != arch_.in_channels || x.height != arch_.height || x.width != arch_.width)
    throw ValidationError("encode: image shape does not match the configured architecture");
  EncodedVars out;
  Var h = image;
  for (int l = 0; l <= arch_.depth; ++l) {
    if (l > 0) h = g.avg_pool2(h);
    h = g.relu(g.conv(h, encoder_[l].first));
    h = g.relu(g.conv(h, encoder_[l].second));
    if (l < arch_.depth) out.pyramid.push_back(h);
  }
  out.features = h;
  return out;
}

Model::GaussianVars Model::prior_head(Graph& g, Var features) const {
  const Var params = g.linear(g.global_avg_pool(features), prior_);
  const int d = arch_.latent_dim;
  return {g.slice_channels(params, 0, d), g.softplus_floor(g.slice_channels(params, d, d), arch_.sigma_floor)};
}

Model::GaussianVars Model::posterior_head(Graph& g, Var image, Var mask) const {
  Var h = g.concat(image, mask);
  for (int l = 0; l <= arch_.depth; ++l) {
    if (l > 0) h = g.avg_pool2(h);
    h = g.relu(g.conv(h, posterior_convs_[l]));
  }
  const Var params = g.linear(g.global_avg_pool(h), posterior_);
  const int d = arch_.latent_dim;
  return {g.slice_channels(params, 0, d), g.softplus_floor(g.slice_channels(params, d, d), arch_.sigma_floor)};
}

Var Model::decode_logits(Graph& g, const EncodedVars& enc, Var z) const {
  if (static_cast<int>(g.value(z).size()) != arch_.latent_dim)
    throw ValidationError("decode: latent dimension " + std::to_string(g.value(z).size()) + " != " +
                          std::to_string(arch_.latent_dim));
  const Tensor& f = g.value(enc.features);
  Var h = g.concat(enc.features, g.broadcast(z, f.height, f.width));
  h = g.relu(g.conv(h, inject_));
  for (int l = arch_.depth - 1; l >= 0; --l) {
    h = g.concat(g.upsample2(h), enc.pyramid[l]);
    h = g.relu(g.conv(h, decoder_[l].first));
    h = g.relu(g.conv(h, decoder_[l].second));
  }
  return g.conv(h, output_);
}

Var Model::decode(Graph& g, const EncodedVars& enc, Var z) const { return g.sigmoid(decode_logits(g, enc, z)); }

Var Model::project(Graph& g, Var embedding) const {
  if (static_cast<int>(g.value(embedding).size()) != arch_.text_dim)
    throw ValidationError("project: embedding dimension " + std::to_string(g.value(embedding).size()) + " != " +
                          std::to_string(arch_.text_dim));
  return g.linear(g.relu(g.linear(embedding, proj_hidden_)), proj_out_);
}

Tensor Model::image_tensor(const Image& image) const {
  if (arch_.in_channels != 1 || image.height != arch_.height || image.width != arch_.width)
    throw ValidationError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          ", model expects " + std::to_string(arch_.height) + "x" + std::to_string(arch_.width));
  Tensor t(1, image.height, image.width);
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (!std::isfinite(image.values[i])) throw ValidationError("image contains non-finite values");
    t.data[i] = image.values[i];
  }
  return t;
}

Tensor Model::mask_tensor(const Mask& mask) const {
  if (mask.height != arch_.height || mask.width != arch_.width) throw ValidationError("mask shape does not match the model");
  require_binary(mask, "posterior_head");
  Tensor t(1, mask.height, mask.width);
  for (std::size_t i = 0; i < mask.size(); ++i) t.data[i] = mask.values[i];
  return t;
}

namespace {

Model::EncodedVars constants(Graph& g, const EncoderOutput& enc) {
  Model::EncodedVars v;
  v.features = g.constant(enc.features);
  for (const auto& p : enc.pyramid) v.pyramid.push_back(g.constant(p));
  return v;
}

LatentGaussian gaussian_from(const Graph& g, const Model::GaussianVars& v) {
  return {g.value(v.mu).data, g.value(v.sigma).data};
}

}  // namespace

EncoderOutput encode(const Model& m, const Image& image) {
  Graph g(m.params().values());
  const auto enc = m.encode(g, g.constant(m.image_tensor(image)));
  EncoderOutput out;
  out.features = g.value(enc.features);
  for (auto v : enc.pyramid) out.pyramid.push_back(g.value(v));
  return out;
}

LatentGaussian prior_head(const Model& m, const Tensor& features) {
  for (double v : features.data) {
    if (!std::isfinite(v)) throw ValidationError("prior_head: non-finite features");
  }
  Graph g(m.params().values());
  return gaussian_from(g, m.prior_head(g, g.constant(features)));
}

LatentGaussian posterior_head(const Model& m, const Image& image, const Mask& mask) {
  Graph g(m.params().values());
  return gaussian_from(g, m.posterior_head(g, g.constant(m.image_tensor(image)), g.constant(m.mask_tensor(mask))));
}

LatentCode sample(const LatentGaussian& g, std::span<const double> noise, LatentOrigin origin) {
  if (noise.size() != g.mu.size() || g.sigma.size() != g.mu.size()) throw ValidationError("sample: dimension mismatch");
  LatentCode z{std::vector<double>(g.mu.size()), origin};
  for (std::size_t i = 0; i < z.z.size(); ++i) z.z[i] = g.mu[i] + g.sigma[i] * noise[i];
  return z;
}

ProbabilityMap decode(const Model& m, const EncoderOutput& enc, const LatentCode& z) {
  Graph g(m.params().values());
  const auto vars = constants(g, enc);
  return to_probability_map(g.value(m.decode(g, vars, g.constant(Tensor::vector(z.z)))));
}

std::vector<std::vector<double>> standard_normal_rows(std::uint64_t seed, int rows, int dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(rows), std::vector<double>(static_cast<std::size_t>(dim)));
  for (auto& r : out)
    for (auto& v : r) v = n(rng);
  return out;
}

ProbabilityMap to_probability_map(const Tensor& t) {
  ProbabilityMap p(t.height, t.width);
  std::copy_n(t.data.begin(), p.size(), p.values.begin());
  return p;
}

}  // namespace prosona::model
