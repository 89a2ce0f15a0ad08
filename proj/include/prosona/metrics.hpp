#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prosona/backbone.hpp"
#include "prosona/common.hpp"
#include "prosona/prompt_engine.hpp"
#include "prosona/synthetic_data.hpp"

namespace prosona::metrics {

/// 1 − IoU; two empty masks are at distance 0.
[[nodiscard]] double iou_distance(const Mask& a, const Mask& b);

/// Square root of the clamped finite-sample GED² estimator under iou_distance.
[[nodiscard]] double ged(std::span<const Mask> predictions, std::span<const Mask> experts);
/// The unclamped GED² estimate (may be slightly negative).
[[nodiscard]] double ged_squared(std::span<const Mask> predictions, std::span<const Mask> experts);

/// 2|A∩B| / (|A|+|B|); two empty masks give 1.
[[nodiscard]] double dice_coefficient(const Mask& pred, const Mask& target);
/// 2Σ p·t / (Σp + Σt) on a probability map; 1 when both sums are 0.
[[nodiscard]] double soft_dice(const ProbabilityMap& pred, const Mask& target);

// Percent-valued multi-rater scores.
[[nodiscard]] double dice_soft(std::span<const ProbabilityMap> samples, std::span<const Mask> experts);
[[nodiscard]] double dice_max(std::span<const Mask> samples, std::span<const Mask> experts);
[[nodiscard]] double dice_match(std::span<const Mask> prompted, std::span<const Mask> experts);
/// Per-annotator Dice (percent) of prompted[i] against experts[i].
[[nodiscard]] std::vector<double> dice_match_per_annotator(std::span<const Mask> prompted, std::span<const Mask> experts);

struct MajorityVote {
  Mask majority;  // strictly more than A/2 votes
  Mask omitted;   // A∪ \ majority
};
[[nodiscard]] MajorityVote majority_vote(std::span<const Mask> experts);

// ---- Evaluation -------------------------------------------------------------

/// Predictions for one case. `samples` feed GED / Dice Soft / Dice Max; `prompted[i]` is the
/// prediction for annotator i's prompt (empty when the model has no prompt head).
struct CasePrediction {
  std::vector<ProbabilityMap> samples;
  std::vector<ProbabilityMap> prompted;
};

class Predictor {
 public:
  virtual ~Predictor() = default;
  [[nodiscard]] virtual CasePrediction predict(const data::Case& c, const data::PromptCatalog& catalog, int k,
                                               std::uint64_t seed) const = 0;
  [[nodiscard]] virtual std::string describe() const = 0;
};

enum class SampleSource {
  prompts,  // one personalized prediction per catalog prompt (stage-2 models)
  prior,    // K decoded prior samples
};

/// Adapter over a trained model. With SampleSource::prompts, prompted[i] uses annotator i's
/// first catalog prompt.
class ModelPredictor final : public Predictor {
 public:
  ModelPredictor(const model::Model& m, const prompt::TextEncoder& encoder, SampleSource source);
  [[nodiscard]] CasePrediction predict(const data::Case& c, const data::PromptCatalog& catalog, int k,
                                       std::uint64_t seed) const override;
  [[nodiscard]] std::string describe() const override;

 private:
  const model::Model& model_;
  const prompt::TextEncoder& encoder_;
  SampleSource source_;
};

struct EvalConfig {
  int k = 10;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  data::Split split = data::Split::test;
  int threads = 1;
};

struct CaseMetrics {
  std::string case_id;
  double ged = 0.0;
  double dice_soft = 0.0;
  double dice_max = 0.0;
  std::optional<double> dice_match;
  std::vector<double> per_annotator;  // empty without prompted predictions
};

struct AnnotatorMetrics {
  int annotator = 0;  // 1-based
  std::string style_name;
  double dice_match = 0.0;
};

struct MetricsReport {
  EvalConfig config;
  std::string predictor;
  double ged = 0.0;
  double dice_soft = 0.0;
  double dice_max = 0.0;
  std::optional<double> dice_match;
  std::optional<double> mean_dice;
  std::vector<CaseMetrics> per_case;
  std::vector<AnnotatorMetrics> per_annotator;

  [[nodiscard]] std::string to_json() const;
};

/// Per-case seed is mix_seed(config.seed, case ordinal within the split).
[[nodiscard]] MetricsReport evaluate(const Predictor& predictor, const data::DatasetManifest& manifest,
                                     const data::PromptCatalog& catalog, const EvalConfig& config);
void write_report(const MetricsReport& report, const std::filesystem::path& path);

}  // namespace prosona::metrics
