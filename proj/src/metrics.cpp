#include "prosona/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "prosona/image_io.hpp"

namespace prosona::metrics {

namespace {

void require_same_shape(const Mask& a, const Mask& b, const char* what) {
  if (!a.same_shape(b)) throw ValidationError(std::string(what) + ": mask shapes differ");
}

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw ValidationError(std::string(what) + ": empty list");
}

template <class T>
void require_all_shapes(std::span<const T> xs, const Mask& ref, const char* what) {
  for (const auto& x : xs) {
    if (!x.same_shape(ref)) throw ValidationError(std::string(what) + ": shapes differ");
  }
}

double mean_pairwise(std::span<const Mask> a, std::span<const Mask> b) {
  double acc = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) acc += iou_distance(x, y);
  return acc / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

std::vector<Mask> binarize_all(std::span<const ProbabilityMap> maps, double threshold) {
  std::vector<Mask> out;
  out.reserve(maps.size());
  for (const auto& p : maps) out.push_back(binarize(p, threshold));
  return out;
}

}  // namespace

double iou_distance(const Mask& a, const Mask& b) {
  require_same_shape(a, b, "iou_distance");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.values[i] != 0;
    const bool y = b.values[i] != 0;
    inter += static_cast<std::size_t>(x && y);
    uni += static_cast<std::size_t>(x || y);
  }
  if (uni == 0) return 0.0;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

double ged_squared(std::span<const Mask> predictions, std::span<const Mask> experts) {
  require_nonempty(predictions.size(), "ged");
  require_nonempty(experts.size(), "ged");
  require_all_shapes(predictions, experts.front(), "ged");
  require_all_shapes(experts, experts.front(), "ged");
  return 2.0 * mean_pairwise(predictions, experts) - mean_pairwise(predictions, predictions) -
         mean_pairwise(experts, experts);
}

double ged(std::span<const Mask> predictions, std::span<const Mask> experts) {
  return std::sqrt(std::max(ged_squared(predictions, experts), 0.0));
}

double dice_coefficient(const Mask& pred, const Mask& target) {
  require_same_shape(pred, target, "dice_coefficient");
  std::size_t inter = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool x = pred.values[i] != 0;
    const bool y = target.values[i] != 0;
    inter += static_cast<std::size_t>(x && y);
    total += static_cast<std::size_t>(x) + static_cast<std::size_t>(y);
  }
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

double soft_dice(const ProbabilityMap& pred, const Mask& target) {
  if (!pred.same_shape(target)) throw ValidationError("soft_dice: shapes differ");
  double inter = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double t = target.values[i] != 0 ? 1.0 : 0.0;
    inter += pred.values[i] * t;
    total += pred.values[i] + t;
  }
  if (total == 0.0) return 1.0;
  return 2.0 * inter / total;
}

double dice_soft(std::span<const ProbabilityMap> samples, std::span<const Mask> experts) {
  require_nonempty(samples.size(), "dice_soft");
  require_nonempty(experts.size(), "dice_soft");
  double acc = 0.0;
  for (const auto& s : samples)
    for (const auto& a : experts) acc += soft_dice(s, a);
  return 100.0 * acc / (static_cast<double>(samples.size()) * static_cast<double>(experts.size()));
}

double dice_max(std::span<const Mask> samples, std::span<const Mask> experts) {
  require_nonempty(samples.size(), "dice_max");
  require_nonempty(experts.size(), "dice_max");
  double acc = 0.0;
  for (const auto& a : experts) {
    double best = 0.0;
    for (const auto& s : samples) best = std::max(best, dice_coefficient(s, a));
    acc += best;
  }
  return 100.0 * acc / static_cast<double>(experts.size());
}

std::vector<double> dice_match_per_annotator(std::span<const Mask> prompted, std::span<const Mask> experts) {
  require_nonempty(experts.size(), "dice_match");
  if (prompted.size() != experts.size()) throw ValidationError("dice_match: need one prompted prediction per annotator");
  std::vector<double> out;
  for (std::size_t i = 0; i < experts.size(); ++i) out.push_back(100.0 * dice_coefficient(prompted[i], experts[i]));
  return out;
}

double dice_match(std::span<const Mask> prompted, std::span<const Mask> experts) {
  require_nonempty(experts.size(), "dice_match");
  if (prompted.size() != experts.size()) throw ValidationError("dice_match: need one prompted prediction per annotator");
  double acc = 0.0;
  for (std::size_t i = 0; i < experts.size(); ++i) acc += dice_coefficient(prompted[i], experts[i]);
  return 100.0 * acc / static_cast<double>(experts.size());
}

MajorityVote majority_vote(std::span<const Mask> experts) {
  require_nonempty(experts.size(), "majority_vote");
  require_all_shapes(experts, experts.front(), "majority_vote");
  const Mask& ref = experts.front();
  MajorityVote mv{Mask(ref.height, ref.width), Mask(ref.height, ref.width)};
  const std::size_t a = experts.size();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    std::size_t votes = 0;
    for (const auto& m : experts) votes += static_cast<std::size_t>(m.values[i] != 0);
    const bool maj = 2 * votes > a;
    mv.majority.values[i] = maj ? 1 : 0;
    mv.omitted.values[i] = (votes > 0 && !maj) ? 1 : 0;
  }
  return mv;
}

// ---- ModelPredictor ---------------------------------------------------------

ModelPredictor::ModelPredictor(const model::Model& m, const prompt::TextEncoder& encoder, SampleSource source)
    : model_(m), encoder_(encoder), source_(source) {
  if (source == SampleSource::prompts && m.stage() < 2)
    throw StateError("prompt-based evaluation needs a stage-2 checkpoint");
}

std::string ModelPredictor::describe() const {
  return source_ == SampleSource::prompts ? "model/prompt-set" : "model/prior-samples";
}

CasePrediction ModelPredictor::predict(const data::Case& c, const data::PromptCatalog& catalog, int k, std::uint64_t seed) const {
  const auto bank = prompt::draw_prior_bank(model_, c.image, k, seed);
  CasePrediction out;
  if (source_ == SampleSource::prior) {
    for (const auto& z : bank.samples) out.samples.push_back(model::decode(model_, bank.encoded, z));
    return out;
  }
  if (catalog.styles.size() != c.masks.size())
    throw ConfigError("prompt catalog has " + std::to_string(catalog.styles.size()) + " styles, case has " +
                      std::to_string(c.masks.size()) + " annotators");
  for (const auto& style : catalog.styles) {
    if (style.prompt_texts.empty()) throw ConfigError("style " + style.style_name + " has no prompts");
    for (std::size_t j = 0; j < style.prompt_texts.size(); ++j) {
      auto p = prompt::personalize(bank, prompt::encode_text(style.prompt_texts[j], encoder_), model_);
      if (j == 0) out.prompted.push_back(p.map);
      out.samples.push_back(std::move(p.map));
    }
  }
  return out;
}

// ---- evaluate ---------------------------------------------------------------

MetricsReport evaluate(const Predictor& predictor, const data::DatasetManifest& manifest, const data::PromptCatalog& catalog,
                       const EvalConfig& config) {
  if (config.k < 1) throw ConfigError("evaluate: K must be >= 1");
  if (!(config.threshold > 0.0 && config.threshold < 1.0)) throw ConfigError("evaluate: threshold must lie in (0, 1)");
  const auto entries = manifest.cases_in(config.split);
  if (entries.empty()) throw ConfigError("evaluate: split '" + data::to_string(config.split) + "' has no cases");

  MetricsReport report;
  report.config = config;
  report.predictor = predictor.describe();
  report.per_case.resize(entries.size());
  parallel_for(entries.size(), config.threads, [&](std::size_t i) {
    const auto c = data::load_case(manifest, entries[i]->case_id);
    const auto pred = predictor.predict(c, catalog, config.k, mix_seed(config.seed, i));
    const auto samples = binarize_all(pred.samples, config.threshold);
    CaseMetrics& cm = report.per_case[i];
    cm.case_id = c.case_id;
    cm.ged = ged(samples, c.masks);
    cm.dice_soft = dice_soft(pred.samples, c.masks);
    cm.dice_max = dice_max(samples, c.masks);
    if (!pred.prompted.empty()) {
      const auto prompted = binarize_all(pred.prompted, config.threshold);
      cm.per_annotator = dice_match_per_annotator(prompted, c.masks);
      cm.dice_match = dice_match(prompted, c.masks);
    }
  });

  const double n = static_cast<double>(entries.size());
  bool have_match = true;
  for (const auto& cm : report.per_case) {
    report.ged += cm.ged / n;
    report.dice_soft += cm.dice_soft / n;
    report.dice_max += cm.dice_max / n;
    have_match = have_match && cm.dice_match.has_value();
  }
  if (have_match) {
    const std::size_t a = report.per_case.front().per_annotator.size();
    double match = 0.0;
    for (std::size_t j = 0; j < a; ++j) {
      AnnotatorMetrics am;
      am.annotator = static_cast<int>(j) + 1;
      am.style_name = j < catalog.styles.size() ? catalog.styles[j].style_name : "";
      for (const auto& cm : report.per_case) am.dice_match += cm.per_annotator[j] / n;
      report.per_annotator.push_back(am);
    }
    for (const auto& cm : report.per_case) match += *cm.dice_match / n;
    report.dice_match = match;
    double mean = 0.0;
    for (const auto& am : report.per_annotator) mean += am.dice_match;
    report.mean_dice = mean / static_cast<double>(a);
  }
  return report;
}

std::string MetricsReport::to_json() const {
  using nlohmann::ordered_json;
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  ordered_json j;
  j["config"] = {{"split", data::to_string(config.split)},
                 {"K", config.k},
                 {"threshold", config.threshold},
                 {"seed", config.seed},
                 {"predictor", predictor},
                 {"ged_kernel", "1 - IoU (empty/empty = 0)"},
                 {"ged_clamp", "sqrt(max(GED^2, 0))"},
                 {"dice_soft", "mean over (sample, annotator) pairs of 2*sum(p*a)/(sum(p)+sum(a))"}};
  j["aggregate"] = {{"ged", ged},
                    {"dice_soft", dice_soft},
                    {"dice_max", dice_max},
                    {"dice_match", opt(dice_match)},
                    {"mean_dice", opt(mean_dice)}};
  j["per_case"] = ordered_json::array();
  for (const auto& c : per_case) {
    j["per_case"].push_back({{"case_id", c.case_id},
                             {"ged", c.ged},
                             {"dice_soft", c.dice_soft},
                             {"dice_max", c.dice_max},
                             {"dice_match", opt(c.dice_match)},
                             {"per_annotator", c.per_annotator}});
  }
  j["per_annotator"] = ordered_json::array();
  for (const auto& a : per_annotator)
    j["per_annotator"].push_back({{"annotator", a.annotator}, {"style_name", a.style_name}, {"dice_match", a.dice_match}});
  return j.dump(2) + "\n";
}

void write_report(const MetricsReport& report, const std::filesystem::path& path) { io::write_bytes(path, report.to_json()); }

}  // namespace prosona::metrics
