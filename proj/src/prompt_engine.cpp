#include "prosona/prompt_engine.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <json.hpp>

#include "prosona/image_io.hpp"

namespace prosona::prompt {

using nn::Graph;
using nn::Tensor;
using nn::Var;

namespace {

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void l2_normalize(std::vector<double>& v, const std::string& what) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (!(sq > 0.0) || !std::isfinite(sq)) throw ValidationError(what + ": embedding has zero or non-finite norm");
  const double n = std::sqrt(sq);
  for (double& x : v) x /= n;
}

std::vector<Tensor> as_tensors(std::span<const LatentCode> samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(Tensor::vector(s.z));
  return out;
}

void require_prompt_model(const Model& m) {
  if (m.stage() < 2) throw StateError("model has no trained prompt projection (stage-2 checkpoint required)");
}

Model::EncodedVars bank_constants(Graph& g, const PriorBank& bank) {
  Model::EncodedVars v;
  v.features = g.constant(bank.encoded.features);
  for (const auto& p : bank.encoded.pyramid) v.pyramid.push_back(g.constant(p));
  return v;
}

Personalization run_query(Graph& g, const PriorBank& bank, const Model& m, Var query, model::LatentOrigin query_origin) {
  const auto enc = bank_constants(g, bank);
  const auto vars = fuse_and_decode(g, m, enc, as_tensors(bank.samples), query);
  Personalization p;
  p.map = model::to_probability_map(g.value(vars.prob));
  p.profile.scores = g.value(vars.scores).data;
  p.profile.weights = g.value(vars.weights).data;
  p.profile.sample_ids.resize(bank.samples.size());
  for (std::size_t k = 0; k < bank.samples.size(); ++k) p.profile.sample_ids[k] = static_cast<int>(k);
  p.z_query = {g.value(query).data, query_origin};
  p.z_prompt = {g.value(vars.z_prompt).data, model::LatentOrigin::fused};
  return p;
}

}  // namespace

HashedBagOfWordsEncoder::HashedBagOfWordsEncoder(int dim) : dim_(dim) {
  if (dim < 1) throw ValidationError("HashedBagOfWordsEncoder: dim must be >= 1");
}

std::string HashedBagOfWordsEncoder::id() const { return "hashed-bow-fnv1a-d" + std::to_string(dim_); }

std::vector<std::string> HashedBagOfWordsEncoder::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

PromptEmbedding HashedBagOfWordsEncoder::encode(std::string_view text) const {
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw ValidationError("encode_text: prompt has no tokens");
  std::vector<double> e(static_cast<std::size_t>(dim_), 0.0);
  for (const auto& t : tokens) {
    const std::uint64_t h = fnv1a64(t);
    const double sign = ((h >> 32) & 1u) != 0 ? -1.0 : 1.0;
    e[h % static_cast<std::uint64_t>(dim_)] += sign;
  }
  l2_normalize(e, "encode_text(\"" + std::string(text) + "\")");
  return {std::move(e), std::string(text), id()};
}

EmbeddingTableEncoder::EmbeddingTableEncoder(std::string id, int dim, std::map<std::string, std::vector<double>> table)
    : id_(std::move(id)), dim_(dim), table_(std::move(table)) {
  for (const auto& [text, v] : table_) {
    if (static_cast<int>(v.size()) != dim_) throw FormatError("embedding table: \"" + text + "\" has the wrong dimension");
  }
}

EmbeddingTableEncoder EmbeddingTableEncoder::from_file(const std::filesystem::path& path) {
  try {
    const auto j = nlohmann::json::parse(io::read_text(path));
    return EmbeddingTableEncoder(j.at("encoder_id").get<std::string>(), j.at("dim").get<int>(),
                                 j.at("embeddings").get<std::map<std::string, std::vector<double>>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

PromptEmbedding EmbeddingTableEncoder::encode(std::string_view text) const {
  if (text.empty()) throw ValidationError("encode_text: empty prompt");
  const auto it = table_.find(std::string(text));
  if (it == table_.end()) throw LookupError("embedding table " + id_ + " has no entry for \"" + std::string(text) + "\"");
  std::vector<double> e = it->second;
  l2_normalize(e, "embedding table entry");
  return {std::move(e), std::string(text), id_};
}

std::unique_ptr<TextEncoder> make_text_encoder(const std::string& spec) {
  if (spec == "fallback") return std::make_unique<HashedBagOfWordsEncoder>(64);
  if (spec.rfind("fallback:", 0) == 0) return std::make_unique<HashedBagOfWordsEncoder>(std::stoi(spec.substr(9)));
  if (spec.rfind("external:", 0) == 0)
    return std::make_unique<EmbeddingTableEncoder>(EmbeddingTableEncoder::from_file(spec.substr(9)));
  throw ConfigError("unknown text_encoder: " + spec + " (expected fallback or external:<path>)");
}

PromptEmbedding encode_text(std::string_view text, const TextEncoder& encoder) {
  if (text.empty()) throw ValidationError("encode_text: empty prompt");
  return encoder.encode(text);
}

LatentCode project(const PromptEmbedding& e, const Model& m) {
  Graph g(m.params().values());
  const Var z = m.project(g, g.constant(Tensor::vector(e.e)));
  return {g.value(z).data, model::LatentOrigin::projected};
}

SimilarityProfile similarity_profile(const LatentCode& z_proj, std::span<const LatentCode> samples) {
  if (samples.empty()) throw ValidationError("similarity_profile: K must be >= 1");
  const double scale = 1.0 / std::sqrt(static_cast<double>(z_proj.dim()));
  SimilarityProfile p;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    if (samples[k].dim() != z_proj.dim()) throw ValidationError("similarity_profile: dimension mismatch");
    double acc = 0.0;
    for (int i = 0; i < z_proj.dim(); ++i) acc += z_proj.z[i] * samples[k].z[i];
    p.scores.push_back(acc * scale);
    p.sample_ids.push_back(static_cast<int>(k));
  }
  p.weights = nn::kernels::softmax(p.scores);
  return p;
}

LatentCode fuse(const SimilarityProfile& profile, std::span<const LatentCode> samples) {
  if (samples.empty() || profile.weights.size() != samples.size()) throw ValidationError("fuse: profile does not match samples");
  LatentCode out{std::vector<double>(samples.front().z.size(), 0.0), model::LatentOrigin::fused};
  for (std::size_t k = 0; k < samples.size(); ++k) {
    for (std::size_t i = 0; i < out.z.size(); ++i) out.z[i] += profile.weights[k] * samples[k].z[i];
  }
  return out;
}

std::uint64_t prior_noise_seed(std::uint64_t request_seed) { return mix_seed(request_seed, 0x9a1); }

PriorBank draw_prior_bank(const Model& m, const Image& image, int k, std::uint64_t seed) {
  if (k < 1) throw ValidationError("K must be >= 1");
  PriorBank bank;
  bank.encoded = model::encode(m, image);
  bank.prior = model::prior_head(m, bank.encoded.features);
  for (const auto& noise : model::standard_normal_rows(prior_noise_seed(seed), k, m.arch().latent_dim)) {
    bank.samples.push_back(model::sample(bank.prior, noise, model::LatentOrigin::prior_sample));
  }
  return bank;
}

PromptVars fuse_and_decode(Graph& g, const Model& m, const Model::EncodedVars& enc, const std::vector<Tensor>& samples, Var z_query) {
  if (samples.empty()) throw ValidationError("similarity_profile: K must be >= 1");
  PromptVars v;
  v.scores = g.dot_scores(z_query, samples, 1.0 / std::sqrt(static_cast<double>(m.arch().latent_dim)));
  v.weights = g.softmax(v.scores);
  v.z_prompt = g.weighted_sum(v.weights, samples);
  v.prob = m.decode(g, enc, v.z_prompt);
  return v;
}

Personalization personalize(const PriorBank& bank, const PromptEmbedding& e, const Model& m) {
  require_prompt_model(m);
  Graph g(m.params().values());
  const Var query = m.project(g, g.constant(Tensor::vector(e.e)));
  return run_query(g, bank, m, query, model::LatentOrigin::projected);
}

Personalization personalize(const Image& image, std::string_view prompt, const Model& m, const TextEncoder& encoder, int k,
                            std::uint64_t seed) {
  require_prompt_model(m);
  const auto e = encode_text(prompt, encoder);
  return personalize(draw_prior_bank(m, image, k, seed), e, m);
}

Personalization interpolate(const PriorBank& bank, const PromptEmbedding& a, const PromptEmbedding& b, double t, const Model& m) {
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("interpolate: t must lie in [0, 1]");
  require_prompt_model(m);
  Graph g(m.params().values());
  const Var za = m.project(g, g.constant(Tensor::vector(a.e)));
  const Var zb = m.project(g, g.constant(Tensor::vector(b.e)));
  return run_query(g, bank, m, g.lerp(za, zb, t), model::LatentOrigin::interpolated);
}

Personalization interpolate(const Image& image, std::string_view prompt_a, std::string_view prompt_b, double t, const Model& m,
                            const TextEncoder& encoder, int k, std::uint64_t seed) {
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("interpolate: t must lie in [0, 1]");
  require_prompt_model(m);
  const auto ea = encode_text(prompt_a, encoder);
  const auto eb = encode_text(prompt_b, encoder);
  return interpolate(draw_prior_bank(m, image, k, seed), ea, eb, t, m);
}

}  // namespace prosona::prompt
