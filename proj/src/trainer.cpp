#include "prosona/trainer.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "prosona/image_io.hpp"
#include "prosona/metrics.hpp"

namespace prosona::train {

using nlohmann::json;
using nlohmann::ordered_json;
using nn::GroupMask;
using nn::Graph;
using nn::ParamGroup;
using nn::Tensor;
using nn::Var;

std::string to_string(TrainableSet t) { return t == TrainableSet::stage2_full ? "stage2_full" : "stage2_mlp_only"; }

TrainableSet trainable_from_string(const std::string& s) {
  if (s == "stage2_mlp_only") return TrainableSet::stage2_mlp_only;
  if (s == "stage2_full") return TrainableSet::stage2_full;
  throw ConfigError("trainable_set must be stage2_mlp_only or stage2_full, got " + s);
}

// ---- TrainConfig --------------------------------------------------------------

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (k < 1 || val_k < 1) throw ConfigError("K must be >= 1");
  if (stage == 1 && k < 2) throw ConfigError("stage 1 needs K >= 2 for the boundary loss");
  if (latent_dim < 1) throw ConfigError("D must be >= 1");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("alpha and beta must be >= 0");
  if (!(dice_smooth > 0.0)) throw ConfigError("dice_smooth must be > 0");
  if (seg_weight < 0.0 || kl_weight < 0.0 || bound_weight < 0.0) throw ConfigError("stage-1 weights must be >= 0");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (data_dir.empty()) throw ConfigError("data_dir is required");
  if (out_dir.empty()) throw ConfigError("out_dir is required");
  if (stage == 2 && stage1_checkpoint.empty()) throw ConfigError("stage 2 requires stage1_checkpoint");
}

losses::LossConfig TrainConfig::loss_config() const {
  losses::LossConfig c;
  c.alpha = alpha;
  c.beta = beta;
  c.tau = tau;
  c.dice_smooth = dice_smooth;
  c.stage1 = {seg_weight, kl_weight, bound_weight};
  return c;
}

ordered_json TrainConfig::to_json() const {
  return {{"stage", stage},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"K", k},
          {"D", latent_dim},
          {"alpha", alpha},
          {"beta", beta},
          {"tau", tau},
          {"dice_smooth", dice_smooth},
          {"seg_weight", seg_weight},
          {"kl_weight", kl_weight},
          {"bound_weight", bound_weight},
          {"seed", seed},
          {"data_dir", data_dir.string()},
          {"out_dir", out_dir.string()},
          {"stage1_checkpoint", stage1_checkpoint.string()},
          {"trainable_set", to_string(trainable)},
          {"base_width", base_width},
          {"depth", depth},
          {"mlp_hidden", mlp_hidden},
          {"text_encoder", text_encoder},
          {"zero_init_projection", zero_init_projection},
          {"val_K", val_k},
          {"val_max_cases", val_max_cases},
          {"threads", threads}};
}

void TrainConfig::merge_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "stage") stage = v.get<int>();
      else if (key == "epochs") epochs = v.get<int>();
      else if (key == "learning_rate") learning_rate = v.get<double>();
      else if (key == "batch_size") batch_size = v.get<int>();
      else if (key == "K") k = v.get<int>();
      else if (key == "D") latent_dim = v.get<int>();
      else if (key == "alpha") alpha = v.get<double>();
      else if (key == "beta") beta = v.get<double>();
      else if (key == "tau") tau = v.get<double>();
      else if (key == "dice_smooth") dice_smooth = v.get<double>();
      else if (key == "seg_weight") seg_weight = v.get<double>();
      else if (key == "kl_weight") kl_weight = v.get<double>();
      else if (key == "bound_weight") bound_weight = v.get<double>();
      else if (key == "seed") seed = v.get<std::uint64_t>();
      else if (key == "data_dir") data_dir = v.get<std::string>();
      else if (key == "out_dir") out_dir = v.get<std::string>();
      else if (key == "stage1_checkpoint") stage1_checkpoint = v.get<std::string>();
      else if (key == "trainable_set") trainable = trainable_from_string(v.get<std::string>());
      else if (key == "base_width") base_width = v.get<int>();
      else if (key == "depth") depth = v.get<int>();
      else if (key == "mlp_hidden") mlp_hidden = v.get<int>();
      else if (key == "text_encoder") text_encoder = v.get<std::string>();
      else if (key == "zero_init_projection") zero_init_projection = v.get<bool>();
      else if (key == "val_K") val_k = v.get<int>();
      else if (key == "val_max_cases") val_max_cases = v.get<int>();
      else if (key == "threads") threads = v.get<int>();
      else throw ConfigError("unknown config key: " + key);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::optional<std::uint64_t> seed_from_env() {
  const char* s = std::getenv("PROSONA_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw ConfigError("PROSONA_SEED is not an integer");
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("PROSONA_SEED is not an integer");
  }
}

TrainConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  TrainConfig c;
  if (!j.contains("seed")) {
    if (auto s = seed_from_env()) c.seed = *s;
  }
  c.merge_json(j);
  return c;
}

// ---- Groups and optimiser -------------------------------------------------------

GroupMask stage1_groups() { return {ParamGroup::encoder, ParamGroup::prior_head, ParamGroup::posterior, ParamGroup::decoder}; }

GroupMask stage2_groups(TrainableSet t) {
  if (t == TrainableSet::stage2_mlp_only) return {ParamGroup::projector};
  return {ParamGroup::encoder, ParamGroup::prior_head, ParamGroup::decoder, ParamGroup::projector};
}

Adam::Adam(const nn::ParameterSet& params, GroupMask groups, double lr)
    : active_(params.size(), 0), m_(params.size(), 0.0), v_(params.size(), 0.0), lr_(lr) {
  for (const auto& b : params.blocks()) {
    if (groups.contains(b.group)) std::fill_n(active_.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size, 1);
  }
}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (active_[i] == 0) continue;
    m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
  }
}

// ---- Per-sample gradients -----------------------------------------------------------

namespace {

model::LatentGaussian gaussian_value(const Graph& g, const model::Model::GaussianVars& v) {
  return {g.value(v.mu).data, g.value(v.sigma).data};
}

Mask target_of(const Stage1Sample& s) {
  if (s.masks == nullptr || s.masks->empty()) throw ValidationError("stage1_sample: no masks");
  if (s.annotator < 0 || s.annotator >= static_cast<int>(s.masks->size())) throw ValidationError("stage1_sample: bad annotator");
  return (*s.masks)[s.annotator];
}

}  // namespace

losses::Stage1Breakdown stage1_sample(const model::Model& m, const Stage1Sample& s, const losses::LossConfig& cfg,
                                      std::span<double> grad, GroupMask trainable) {
  const Mask target = target_of(s);
  Graph g(m.params().values(), grad, trainable);
  const Var img = g.constant(m.image_tensor(*s.image));
  const auto enc = m.encode(g, img);
  const auto prior = m.prior_head(g, enc.features);
  const auto post = m.posterior_head(g, img, g.constant(m.mask_tensor(target)));
  const Var z = g.reparameterize(post.mu, post.sigma, s.posterior_noise);
  const Var pred = m.decode(g, enc, z);
  std::vector<Var> sample_vars;
  std::vector<ProbabilityMap> sample_maps;
  for (const auto& noise : s.prior_noise) {
    const Var zk = g.reparameterize(prior.mu, prior.sigma, noise);
    sample_vars.push_back(m.decode(g, enc, zk));
    sample_maps.push_back(model::to_probability_map(g.value(sample_vars.back())));
  }
  const auto ens = losses::make_ensemble(std::move(sample_maps));
  const auto bounds = losses::expert_bounds(*s.masks);
  losses::Stage1Gradient lg;
  const auto out = losses::stage1_loss(model::to_probability_map(g.value(pred)), target, gaussian_value(g, post),
                                       gaussian_value(g, prior), ens, bounds, cfg, grad.empty() ? nullptr : &lg);
  if (grad.empty()) return out;
  g.accumulate_grad(pred, lg.pred.values);
  g.accumulate_grad(post.mu, lg.kl.mu_q);
  g.accumulate_grad(post.sigma, lg.kl.sigma_q);
  g.accumulate_grad(prior.mu, lg.kl.mu_p);
  g.accumulate_grad(prior.sigma, lg.kl.sigma_p);
  for (std::size_t k = 0; k < sample_vars.size(); ++k) g.accumulate_grad(sample_vars[k], lg.samples[k].values);
  g.backward();
  return out;
}

losses::Stage2Breakdown stage2_sample(const model::Model& m, const Stage2Sample& s, const losses::LossConfig& cfg,
                                      std::span<double> grad, GroupMask trainable) {
  if (s.prompts.empty()) throw ValidationError("stage2_sample: no prompts");
  if (s.prior_noise.empty()) throw ValidationError("stage2_sample: K must be >= 1");
  Graph g(m.params().values(), grad, trainable);
  const Var img = g.constant(m.image_tensor(*s.image));
  const auto enc = m.encode(g, img);
  const auto prior = gaussian_value(g, m.prior_head(g, enc.features));
  // Prior samples enter the fusion as constants: no gradient reaches the prior head.
  std::vector<Tensor> samples;
  for (const auto& noise : s.prior_noise) samples.push_back(Tensor::vector(model::sample(prior, noise, model::LatentOrigin::prior_sample).z));

  const auto p = static_cast<Eigen::Index>(s.prompts.size());
  const auto kk = static_cast<Eigen::Index>(samples.size());
  std::vector<prompt::PromptVars> vars;
  std::vector<ProbabilityMap> preds;
  std::vector<Mask> targets;
  std::vector<int> owner;
  Eigen::MatrixXd E(p, static_cast<Eigen::Index>(s.prompts.front().embedding.e.size()));
  Eigen::MatrixXd S(p, kk);
  for (Eigen::Index i = 0; i < p; ++i) {
    const auto& pr = s.prompts[static_cast<std::size_t>(i)];
    if (pr.annotator < 0 || pr.annotator >= static_cast<int>(s.masks->size())) throw ValidationError("stage2_sample: bad annotator");
    const Var zq = m.project(g, g.constant(Tensor::vector(pr.embedding.e)));
    vars.push_back(prompt::fuse_and_decode(g, m, enc, samples, zq));
    preds.push_back(model::to_probability_map(g.value(vars.back().prob)));
    targets.push_back((*s.masks)[pr.annotator]);
    owner.push_back(pr.annotator);
    if (static_cast<Eigen::Index>(pr.embedding.e.size()) != E.cols()) throw ValidationError("stage2_sample: embedding size mismatch");
    for (Eigen::Index c = 0; c < E.cols(); ++c) E(i, c) = pr.embedding.e[static_cast<std::size_t>(c)];
    for (Eigen::Index c = 0; c < kk; ++c) S(i, c) = g.value(vars.back().scores).data[static_cast<std::size_t>(c)];
  }
  losses::ContrastiveBatch batch{losses::normalize_rows(E), losses::normalize_rows(S), losses::positive_pair_mask(owner), cfg.tau};
  losses::Stage2Gradient lg;
  const auto out = losses::stage2_loss(preds, targets, batch, cfg, grad.empty() ? nullptr : &lg);
  if (grad.empty()) return out;
  // E comes from the frozen text encoder, so dE has nowhere to flow.
  const Eigen::MatrixXd dS = losses::normalize_rows_backward(S, lg.dR);
  for (Eigen::Index i = 0; i < p; ++i) {
    const auto& v = vars[static_cast<std::size_t>(i)];
    g.accumulate_grad(v.prob, lg.preds[static_cast<std::size_t>(i)].values);
    std::vector<double> row(static_cast<std::size_t>(kk));
    for (Eigen::Index c = 0; c < kk; ++c) row[static_cast<std::size_t>(c)] = dS(i, c);
    g.accumulate_grad(v.scores, row);
  }
  g.backward();
  return out;
}

// ---- Training loops ---------------------------------------------------------------

namespace {

double param_norm(const model::Model& m) {
  double acc = 0.0;
  for (double v : m.params().values()) acc += v * v;
  return std::sqrt(acc);
}

bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
}

class JsonLog {
 public:
  explicit JsonLog(const std::filesystem::path& path) : f_(path, std::ios::trunc) {
    if (!f_) throw IoError("cannot open log: " + path.string());
  }
  void write(const ordered_json& j) {
    f_ << j.dump() << '\n';
    f_.flush();
  }

 private:
  std::ofstream f_;
};

struct Dataset {
  data::DatasetManifest manifest;
  data::DatasetManifest val_manifest;  // validation cases only, possibly truncated
  std::vector<data::Case> train;
};

Dataset load_dataset(const TrainConfig& cfg) {
  Dataset d;
  d.manifest = data::load_manifest(cfg.data_dir);
  for (const auto* e : d.manifest.cases_in(data::Split::train)) d.train.push_back(data::load_case(d.manifest, e->case_id));
  if (d.train.empty()) throw ConfigError("dataset has no training cases");
  d.val_manifest = d.manifest;
  d.val_manifest.cases.clear();
  for (const auto* e : d.manifest.cases_in(data::Split::val)) {
    if (cfg.val_max_cases > 0 && static_cast<int>(d.val_manifest.cases.size()) >= cfg.val_max_cases) break;
    d.val_manifest.cases.push_back(*e);
  }
  if (d.val_manifest.cases.empty()) throw ConfigError("dataset has no validation cases");
  return d;
}

metrics::MetricsReport validate(const model::Model& m, const prompt::TextEncoder& encoder, const Dataset& d,
                                const data::PromptCatalog& catalog, const TrainConfig& cfg) {
  const auto source = m.stage() >= 2 ? metrics::SampleSource::prompts : metrics::SampleSource::prior;
  const metrics::ModelPredictor predictor(m, encoder, source);
  metrics::EvalConfig ec;
  ec.k = cfg.val_k;
  ec.seed = mix_seed(cfg.seed, 0x7a11d);
  ec.split = data::Split::val;
  ec.threads = cfg.threads;
  return metrics::evaluate(predictor, d.val_manifest, catalog, ec);
}

/// Per-batch shuffle of the training indices; one permutation per epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x5b0f, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Mean of per-sample gradients, summed in index order so the result is thread-count independent.
void reduce_mean(const std::vector<std::vector<double>>& per_sample, std::vector<double>& out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (const auto& g : per_sample)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += g[i];
  const double inv = 1.0 / static_cast<double>(per_sample.size());
  for (double& v : out) v *= inv;
}

model::Architecture architecture_for(const TrainConfig& cfg, const data::DatasetManifest& manifest, int text_dim) {
  model::Architecture a;
  a.height = manifest.config.height;
  a.width = manifest.config.width;
  a.base_width = cfg.base_width;
  a.depth = cfg.depth;
  a.latent_dim = cfg.latent_dim;
  a.text_dim = text_dim;
  a.mlp_hidden = cfg.mlp_hidden;
  a.text_encoder = cfg.text_encoder;
  a.validate();
  return a;
}

[[noreturn]] void diverged(JsonLog& log, const model::Model& m, int epoch, long step, const ordered_json& batch_stats) {
  ordered_json j{{"event", "abort"}, {"epoch", epoch}, {"step", step}, {"batch", batch_stats}, {"param_norm", param_norm(m)}};
  log.write(j);
  throw TrainingDivergedError("non-finite loss or gradient at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + ": " + j.dump());
}

struct Selection {
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  ckpt::Metadata best_meta;
};

void consider(Selection& sel, const model::Model& m, double ged, int epoch, const TrainConfig& cfg, const std::string& parent,
              const std::filesystem::path& best_dir) {
  if (ged < sel.best) {
    sel.best = ged;
    sel.best_epoch = epoch;
    sel.best_meta = ckpt::save(m, best_dir, cfg.seed, parent, ged, epoch);
  }
}

}  // namespace

TrainResult train_stage1(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.stage != 1) throw ConfigError("train_stage1 called with stage " + std::to_string(cfg.stage));
  const auto encoder = prompt::make_text_encoder(cfg.text_encoder);
  Dataset d = load_dataset(cfg);
  const auto catalog = data::catalog_from_manifest(d.manifest);
  model::Model m(architecture_for(cfg, d.manifest, encoder->dim()), mix_seed(cfg.seed, 0x1417));
  m.set_stage(1);
  const auto loss_cfg = cfg.loss_config();

  std::filesystem::create_directories(cfg.out_dir);
  JsonLog log(cfg.out_dir / "train_log.jsonl");
  log.write({{"event", "config"}, {"config", cfg.to_json()}, {"param_count", m.params().size()}, {"git_hash", ckpt::build_git_hash()}});

  TrainResult result;
  result.best_dir = cfg.out_dir / "best";
  result.last_dir = cfg.out_dir / "last";
  Selection sel;
  const double ged0 = validate(m, *encoder, d, catalog, cfg).ged;
  result.val_ged.push_back(ged0);
  log.write({{"event", "epoch"}, {"epoch", 0}, {"val_ged", ged0}});
  consider(sel, m, ged0, 0, cfg, "", result.best_dir);

  Adam opt(m.params(), stage1_groups(), cfg.learning_rate);
  const std::size_t n_params = m.params().size();
  const int a = d.manifest.annotator_count();
  long step = 0;
  std::vector<double> grad(n_params);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(d.train.size(), cfg.seed, epoch);
    double epoch_total = 0.0;
    int epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::vector<double>> grads(b, std::vector<double>(n_params, 0.0));
      std::vector<losses::Stage1Breakdown> parts(b);
      std::vector<int> annotators(b);
      parallel_for(b, cfg.threads, [&](std::size_t j) {
        const data::Case& c = d.train[order[start + j]];
        std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step), j));
        Stage1Sample s;
        s.image = &c.image;
        s.masks = &c.masks;
        s.annotator = static_cast<int>(rng() % static_cast<std::uint64_t>(a));
        s.posterior_noise = model::standard_normal_rows(rng(), 1, cfg.latent_dim).front();
        s.prior_noise = model::standard_normal_rows(rng(), cfg.k, cfg.latent_dim);
        annotators[j] = s.annotator;
        parts[j] = stage1_sample(m, s, loss_cfg, grads[j], stage1_groups());
      });
      reduce_mean(grads, grad);
      losses::Stage1Breakdown mean;
      for (const auto& p : parts) {
        mean.l_seg += p.l_seg / static_cast<double>(b);
        mean.l_kl += p.l_kl / static_cast<double>(b);
        mean.l_bound += p.l_bound / static_cast<double>(b);
      }
      mean.total = loss_cfg.stage1.seg * mean.l_seg + loss_cfg.stage1.kl * mean.l_kl + loss_cfg.stage1.bound * mean.l_bound;
      ordered_json rec{{"event", "step"},     {"stage", 1},          {"epoch", epoch},           {"step", step},
                       {"l_seg", mean.l_seg}, {"l_kl", mean.l_kl},   {"l_bound", mean.l_bound},  {"total", mean.total},
                       {"weights", {{"seg", loss_cfg.stage1.seg}, {"kl", loss_cfg.stage1.kl}, {"bound", loss_cfg.stage1.bound}}},
                       {"annotators", annotators}};
      if (!std::isfinite(mean.total) || !all_finite(grad)) diverged(log, m, epoch, step, rec);
      opt.step(m.params().values(), grad);
      log.write(rec);
      epoch_total += mean.total;
      ++epoch_batches;
      ++step;
    }
    const double ged = validate(m, *encoder, d, catalog, cfg).ged;
    result.val_ged.push_back(ged);
    log.write({{"event", "epoch"}, {"epoch", epoch}, {"val_ged", ged}, {"train_total", epoch_total / std::max(epoch_batches, 1)}});
    consider(sel, m, ged, epoch, cfg, "", result.best_dir);
  }
  result.last = ckpt::save(m, result.last_dir, cfg.seed, "", result.val_ged.back(), cfg.epochs);
  result.best = sel.best_meta;
  result.best_epoch = sel.best_epoch;
  log.write({{"event", "done"}, {"best_epoch", sel.best_epoch}, {"best_val_ged", sel.best}, {"best_checkpoint", result.best.checkpoint_id},
             {"last_checkpoint", result.last.checkpoint_id}});
  return result;
}

TrainResult train_stage2(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.stage != 2) throw ConfigError("train_stage2 called with stage " + std::to_string(cfg.stage));
  ckpt::Metadata parent;
  model::Model m = ckpt::load(cfg.stage1_checkpoint, &parent);
  if (parent.stage < 1) throw ConfigError("stage1_checkpoint has not completed stage 1");
  const auto encoder = prompt::make_text_encoder(m.arch().text_encoder);
  if (encoder->dim() != m.arch().text_dim) throw ConfigError("text encoder dimension does not match the checkpoint");
  Dataset d = load_dataset(cfg);
  if (d.manifest.config.height != m.arch().height || d.manifest.config.width != m.arch().width)
    throw ConfigError("dataset image size does not match the stage-1 checkpoint");
  const auto catalog = data::catalog_from_manifest(d.manifest);
  if (static_cast<int>(catalog.styles.size()) != d.manifest.annotator_count())
    throw ConfigError("prompt catalog has " + std::to_string(catalog.styles.size()) + " styles, dataset has " +
                      std::to_string(d.manifest.annotator_count()) + " annotators");
  std::vector<Stage2Prompt> prompts;
  for (std::size_t i = 0; i < catalog.styles.size(); ++i) {
    if (catalog.styles[i].prompt_texts.empty()) throw ConfigError("style " + catalog.styles[i].style_name + " has no prompts");
    for (const auto& t : catalog.styles[i].prompt_texts) prompts.push_back({prompt::encode_text(t, *encoder), static_cast<int>(i)});
  }
  if (cfg.latent_dim != m.arch().latent_dim) throw ConfigError("D does not match the stage-1 checkpoint");
  if (cfg.zero_init_projection) {
    for (const auto& b : m.params().blocks()) {
      if (b.name.rfind("projector.out", 0) == 0)
        std::fill_n(m.params().values().begin() + static_cast<std::ptrdiff_t>(b.offset), b.size, 0.0);
    }
  }
  m.set_stage(2);
  const auto loss_cfg = cfg.loss_config();
  const auto groups = stage2_groups(cfg.trainable);

  std::filesystem::create_directories(cfg.out_dir);
  JsonLog log(cfg.out_dir / "train_log.jsonl");
  log.write({{"event", "config"},
             {"config", cfg.to_json()},
             {"parent_checkpoint_id", parent.checkpoint_id},
             {"prompts", prompts.size()},
             {"git_hash", ckpt::build_git_hash()}});

  TrainResult result;
  result.best_dir = cfg.out_dir / "best";
  result.last_dir = cfg.out_dir / "last";
  Selection sel;
  auto report = validate(m, *encoder, d, catalog, cfg);
  result.val_ged.push_back(report.ged);
  log.write({{"event", "epoch"}, {"epoch", 0}, {"val_ged", report.ged}, {"val_dice_match", report.dice_match.value_or(0.0)}});
  consider(sel, m, report.ged, 0, cfg, parent.checkpoint_id, result.best_dir);

  Adam opt(m.params(), groups, cfg.learning_rate);
  const std::size_t n_params = m.params().size();
  long step = 0;
  std::vector<double> grad(n_params);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(d.train.size(), cfg.seed, epoch);
    double epoch_total = 0.0;
    int epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::vector<double>> grads(b, std::vector<double>(n_params, 0.0));
      std::vector<losses::Stage2Breakdown> parts(b);
      parallel_for(b, cfg.threads, [&](std::size_t j) {
        const data::Case& c = d.train[order[start + j]];
        Stage2Sample s;
        s.image = &c.image;
        s.masks = &c.masks;
        s.prompts = prompts;
        s.prior_noise = model::standard_normal_rows(mix_seed(cfg.seed, static_cast<std::uint64_t>(step), j), cfg.k, cfg.latent_dim);
        parts[j] = stage2_sample(m, s, loss_cfg, grads[j], groups);
      });
      reduce_mean(grads, grad);
      losses::Stage2Breakdown mean;
      for (const auto& p : parts) {
        mean.l_seg += p.l_seg / static_cast<double>(b);
        mean.l_text += p.l_text / static_cast<double>(b);
        mean.l_sim += p.l_sim / static_cast<double>(b);
      }
      mean.total = mean.l_seg + loss_cfg.alpha * mean.l_text + loss_cfg.beta * mean.l_sim;
      ordered_json rec{{"event", "step"}, {"stage", 2}, {"epoch", epoch}, {"step", step}, {"l_seg", mean.l_seg}};
      if (loss_cfg.alpha > 0.0) rec["l_text"] = mean.l_text;
      if (loss_cfg.beta > 0.0) rec["l_sim"] = mean.l_sim;
      rec["total"] = mean.total;
      rec["alpha"] = loss_cfg.alpha;
      rec["beta"] = loss_cfg.beta;
      if (!std::isfinite(mean.total) || !all_finite(grad)) diverged(log, m, epoch, step, rec);
      opt.step(m.params().values(), grad);
      log.write(rec);
      epoch_total += mean.total;
      ++epoch_batches;
      ++step;
    }
    report = validate(m, *encoder, d, catalog, cfg);
    result.val_ged.push_back(report.ged);
    log.write({{"event", "epoch"},
               {"epoch", epoch},
               {"val_ged", report.ged},
               {"val_dice_match", report.dice_match.value_or(0.0)},
               {"train_total", epoch_total / std::max(epoch_batches, 1)}});
    consider(sel, m, report.ged, epoch, cfg, parent.checkpoint_id, result.best_dir);
  }
  result.last = ckpt::save(m, result.last_dir, cfg.seed, parent.checkpoint_id, result.val_ged.back(), cfg.epochs);
  result.best = sel.best_meta;
  result.best_epoch = sel.best_epoch;
  log.write({{"event", "done"}, {"best_epoch", sel.best_epoch}, {"best_val_ged", sel.best}, {"best_checkpoint", result.best.checkpoint_id},
             {"last_checkpoint", result.last.checkpoint_id}});
  return result;
}

// ---- Rendering helpers --------------------------------------------------------

namespace {

/// Piecewise-linear dark-blue → teal → yellow ramp for v in [0,1].
std::array<std::uint8_t, 3> ramp(double v) {
  static constexpr double stops[3][3] = {{68, 1, 84}, {33, 145, 140}, {253, 231, 37}};
  v = std::clamp(v, 0.0, 1.0) * 2.0;
  const int i = std::min(static_cast<int>(v), 1);
  const double f = v - i;
  std::array<std::uint8_t, 3> c{};
  for (int ch = 0; ch < 3; ++ch)
    c[ch] = static_cast<std::uint8_t>(std::lround(stops[i][ch] + f * (stops[i + 1][ch] - stops[i][ch])));
  return c;
}

void write_heatmap(const AblationGrid& grid, const std::filesystem::path& path) {
  constexpr int cell = 32;
  const int rows = static_cast<int>(grid.alpha_values.size());
  const int cols = static_cast<int>(grid.beta_values.size());
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& c : grid.cells) {
    if (c.ged) {
      lo = std::min(lo, *c.ged);
      hi = std::max(hi, *c.ged);
    }
  }
  io::Raster r{rows * cell, cols * cell, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(rows * cell * cols * cell * 3), 0)};
  for (int a = 0; a < rows; ++a) {
    for (int b = 0; b < cols; ++b) {
      const auto& c = grid.at(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
      std::array<std::uint8_t, 3> color{128, 128, 128};
      if (c.ged) color = ramp(hi > lo ? (*c.ged - lo) / (hi - lo) : 0.5);
      for (int y = a * cell + 1; y < (a + 1) * cell - 1; ++y)
        for (int x = b * cell + 1; x < (b + 1) * cell - 1; ++x)
          for (int ch = 0; ch < 3; ++ch) r.pixels[(static_cast<std::size_t>(y) * r.width + x) * 3 + ch] = color[ch];
    }
  }
  io::write_png(path, r);
}

std::string config_digest(const TrainConfig& cfg) { return io::sha256_hex(cfg.to_json().dump()); }

}  // namespace

AblationGrid run_ablation(AblationGrid grid, const TrainConfig& base) {
  if (grid.alpha_values.empty() || grid.beta_values.empty()) throw ConfigError("ablation grid must be non-empty");
  grid.cells.clear();
  const auto cells_dir = base.out_dir / "cells";
  std::filesystem::create_directories(cells_dir);
  for (double alpha : grid.alpha_values) {
    for (double beta : grid.beta_values) {
      AblationCell cell;
      cell.alpha = alpha;
      cell.beta = beta;
      std::ostringstream name;
      name << "alpha_" << alpha << "_beta_" << beta;
      TrainConfig cfg = base;
      cfg.stage = 2;
      cfg.alpha = alpha;
      cfg.beta = beta;
      cfg.out_dir = cells_dir / name.str();
      const std::string digest = config_digest(cfg);
      const auto digest_file = cfg.out_dir / "config.sha256";
      const auto result_file = cfg.out_dir / "result.json";
      cell.checkpoint = cfg.out_dir / "best";
      try {
        if (std::filesystem::exists(result_file) && std::filesystem::exists(digest_file) &&
            io::read_text(digest_file) == digest) {
          cell.ged = json::parse(io::read_text(result_file)).at("val_ged").get<double>();
          cell.cached = true;
        } else {
          const auto r = train_stage2(cfg);
          cell.ged = r.best.val_ged;
          io::write_bytes(result_file, ordered_json{{"alpha", alpha}, {"beta", beta}, {"val_ged", *cell.ged},
                                                    {"checkpoint_id", r.best.checkpoint_id}, {"best_epoch", r.best_epoch}}
                                               .dump(2) +
                                           "\n");
          io::write_bytes(digest_file, digest);
        }
      } catch (const std::exception& e) {
        cell.ged.reset();
        cell.error = e.what();
      }
      grid.cells.push_back(std::move(cell));
    }
  }
  std::ostringstream csv;
  csv << "alpha,beta,val_ged,status\n";
  csv.precision(17);
  for (const auto& c : grid.cells) {
    csv << c.alpha << ',' << c.beta << ',';
    if (c.ged) csv << *c.ged << ",ok";
    else csv << ",failed";
    csv << '\n';
  }
  io::write_bytes(base.out_dir / "ablation.csv", csv.str());
  write_heatmap(grid, base.out_dir / "ablation_heatmap.png");
  return grid;
}

// ---- Interpolation export -----------------------------------------------------

InterpolationExport export_interpolation(const model::Model& m, const prompt::TextEncoder& encoder, const data::Case& c,
                                         const std::string& prompt_a, const std::string& prompt_b, int steps, int k,
                                         std::uint64_t seed, const std::filesystem::path& out_prefix, double threshold) {
  if (steps < 2) throw ValidationError("interpolation needs steps >= 2");
  const auto ea = prompt::encode_text(prompt_a, encoder);
  const auto eb = prompt::encode_text(prompt_b, encoder);
  const auto bank = prompt::draw_prior_bank(m, c.image, k, seed);
  InterpolationExport out;
  for (int i = 0; i < steps; ++i) {
    const double t = i == steps - 1 ? 1.0 : static_cast<double>(i) / (steps - 1);
    const auto p = prompt::interpolate(bank, ea, eb, t, m);
    out.t.push_back(t);
    out.masks.push_back(binarize(p.map, threshold));
    out.area.push_back(mask_area(out.masks.back()));
  }

  const int h = c.image.height, w = c.image.width, gap = 2;
  io::Raster strip{h, steps * w + (steps - 1) * gap, 3, {}};
  strip.pixels.assign(static_cast<std::size_t>(strip.height) * strip.width * 3, 255);
  for (int i = 0; i < steps; ++i) {
    const Mask& mk = out.masks[static_cast<std::size_t>(i)];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double g = std::clamp(c.image.at(y, x), 0.0, 1.0) * 255.0;
        const bool on = mk.at(y, x) != 0;
        const std::size_t o = (static_cast<std::size_t>(y) * strip.width + i * (w + gap) + x) * 3;
        strip.pixels[o] = static_cast<std::uint8_t>(std::lround(on ? 0.5 * g + 127.5 : g));
        strip.pixels[o + 1] = static_cast<std::uint8_t>(std::lround(on ? 0.5 * g : g));
        strip.pixels[o + 2] = static_cast<std::uint8_t>(std::lround(on ? 0.5 * g : g));
      }
    }
  }
  io::write_png(out_prefix.string() + "_strip.png", strip);
  std::ostringstream csv;
  csv.precision(17);
  csv << "t,area\n";
  for (std::size_t i = 0; i < out.t.size(); ++i) csv << out.t[i] << ',' << out.area[i] << '\n';
  io::write_bytes(out_prefix.string() + "_area.csv", csv.str());
  return out;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("spearman: need two equal-length series of size >= 2");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace prosona::train
