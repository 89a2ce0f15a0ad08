#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prosona/backbone.hpp"
#include "prosona/nn.hpp"

namespace prosona::prompt {

using model::LatentCode;
using model::Model;

struct PromptEmbedding {
  std::vector<double> e;
  std::string source_text;
  std::string encoder_id;
};

/// Frozen text encoder. Implementations must be deterministic per (text, id()).
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  [[nodiscard]] virtual PromptEmbedding encode(std::string_view text) const = 0;
  [[nodiscard]] virtual int dim() const = 0;
  [[nodiscard]] virtual std::string id() const = 0;
};

/// Lowercase, drop punctuation, split on whitespace, hash each token (FNV-1a 64) to a
/// signed bucket, accumulate, L2-normalise.
class HashedBagOfWordsEncoder final : public TextEncoder {
 public:
  explicit HashedBagOfWordsEncoder(int dim = 64);
  [[nodiscard]] PromptEmbedding encode(std::string_view text) const override;
  [[nodiscard]] int dim() const override { return dim_; }
  [[nodiscard]] std::string id() const override;

  [[nodiscard]] static std::vector<std::string> tokenize(std::string_view text);

 private:
  int dim_;
};

/// Precomputed embeddings (e.g. exported from a CLIP text tower) loaded from JSON:
/// {"encoder_id": str, "dim": int, "embeddings": {text: [floats]}}.
class EmbeddingTableEncoder final : public TextEncoder {
 public:
  static EmbeddingTableEncoder from_file(const std::filesystem::path& path);
  EmbeddingTableEncoder(std::string id, int dim, std::map<std::string, std::vector<double>> table);

  [[nodiscard]] PromptEmbedding encode(std::string_view text) const override;
  [[nodiscard]] int dim() const override { return dim_; }
  [[nodiscard]] std::string id() const override { return id_; }

 private:
  std::string id_;
  int dim_;
  std::map<std::string, std::vector<double>> table_;
};

/// "fallback" | "fallback:<dim>" | "external:<path>"
[[nodiscard]] std::unique_ptr<TextEncoder> make_text_encoder(const std::string& spec);

[[nodiscard]] PromptEmbedding encode_text(std::string_view text, const TextEncoder& encoder);

struct SimilarityProfile {
  std::vector<double> scores;   // s_k = z_projᵀ z_k / √D
  std::vector<double> weights;  // softmax(scores)
  std::vector<int> sample_ids;
};

[[nodiscard]] LatentCode project(const PromptEmbedding& e, const Model& m);
[[nodiscard]] SimilarityProfile similarity_profile(const LatentCode& z_proj, std::span<const LatentCode> samples);
[[nodiscard]] LatentCode fuse(const SimilarityProfile& profile, std::span<const LatentCode> samples);

/// Everything one request shares across prompts: encoder output, prior and K prior samples.
struct PriorBank {
  model::EncoderOutput encoded;
  model::LatentGaussian prior;
  std::vector<LatentCode> samples;
};

[[nodiscard]] PriorBank draw_prior_bank(const Model& m, const Image& image, int k, std::uint64_t seed);
/// Noise seed used for the K prior samples of a request with the given seed.
[[nodiscard]] std::uint64_t prior_noise_seed(std::uint64_t request_seed);

struct Personalization {
  ProbabilityMap map;
  SimilarityProfile profile;
  LatentCode z_query;   // z_proj, or the interpolated query
  LatentCode z_prompt;  // fused code that was decoded
};

[[nodiscard]] Personalization personalize(const PriorBank& bank, const PromptEmbedding& e, const Model& m);
[[nodiscard]] Personalization personalize(const Image& image, std::string_view prompt, const Model& m, const TextEncoder& encoder,
                                          int k, std::uint64_t seed);

/// Query z(t) = (1−t)·z_proj(a) + t·z_proj(b), then the same score/fuse/decode path.
[[nodiscard]] Personalization interpolate(const PriorBank& bank, const PromptEmbedding& a, const PromptEmbedding& b, double t,
                                          const Model& m);
[[nodiscard]] Personalization interpolate(const Image& image, std::string_view prompt_a, std::string_view prompt_b, double t,
                                          const Model& m, const TextEncoder& encoder, int k, std::uint64_t seed);

/// Graph form of score → softmax → fuse → decode for a query code (used in training).
struct PromptVars {
  nn::Var scores;
  nn::Var weights;
  nn::Var z_prompt;
  nn::Var prob;
};
PromptVars fuse_and_decode(nn::Graph& g, const Model& m, const Model::EncodedVars& enc, const std::vector<nn::Tensor>& samples,
                           nn::Var z_query);

}  // namespace prosona::prompt
