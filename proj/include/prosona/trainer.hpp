#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prosona/backbone.hpp"
#include "prosona/checkpoint.hpp"
#include "prosona/losses.hpp"
#include "prosona/prompt_engine.hpp"
#include "prosona/synthetic_data.hpp"

namespace prosona::train {

enum class TrainableSet { stage2_mlp_only, stage2_full };

[[nodiscard]] std::string to_string(TrainableSet t);
[[nodiscard]] TrainableSet trainable_from_string(const std::string& s);

/// Declarative run configuration. Keys in the JSON form use the field names below;
/// `K`, `D` and `val_K` are upper-case. Unknown keys are rejected.
struct TrainConfig {
  int stage = 1;
  int epochs = 100;
  double learning_rate = 1e-4;
  int batch_size = 8;
  int k = 10;
  int latent_dim = 6;
  double alpha = 1.0;
  double beta = 1.0;
  double tau = 0.1;
  double dice_smooth = 1.0;
  double seg_weight = 1.0;
  double kl_weight = 1.0;
  double bound_weight = 1.0;
  std::uint64_t seed = 0;
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;           // receives best/, last/ and train_log.jsonl
  std::filesystem::path stage1_checkpoint;  // required for stage 2
  TrainableSet trainable = TrainableSet::stage2_mlp_only;
  int base_width = 16;
  int depth = 3;
  int mlp_hidden = 128;
  std::string text_encoder = "fallback";
  bool zero_init_projection = false;
  int val_k = 10;
  int val_max_cases = 0;  // 0 = whole validation split
  int threads = 1;

  void validate() const;
  [[nodiscard]] losses::LossConfig loss_config() const;
  [[nodiscard]] nlohmann::ordered_json to_json() const;
  /// Applies the keys present in `j` on top of the current values.
  void merge_json(const nlohmann::json& j);
};

/// Reads a JSON config file; missing keys keep their defaults. PROSONA_SEED supplies the
/// seed when the file does not.
[[nodiscard]] TrainConfig load_config(const std::filesystem::path& path);
[[nodiscard]] std::optional<std::uint64_t> seed_from_env();

struct TrainResult {
  std::filesystem::path best_dir;
  std::filesystem::path last_dir;
  ckpt::Metadata best;
  ckpt::Metadata last;
  std::vector<double> val_ged;  // index = epoch, entry 0 is before any update
  int best_epoch = 0;
};

TrainResult train_stage1(const TrainConfig& cfg);
TrainResult train_stage2(const TrainConfig& cfg);

// ---- Single-sample gradients (exposed for verification) -------------------

struct Stage1Sample {
  const Image* image = nullptr;
  const std::vector<Mask>* masks = nullptr;
  int annotator = 0;                             // 0-based
  std::vector<double> posterior_noise;           // D
  std::vector<std::vector<double>> prior_noise;  // K × D
};

/// Loss breakdown for one sample; adds ∂loss/∂θ into `grad` (size = parameter count) for
/// the groups in `trainable`.
losses::Stage1Breakdown stage1_sample(const model::Model& m, const Stage1Sample& s, const losses::LossConfig& cfg,
                                      std::span<double> grad, nn::GroupMask trainable);

struct Stage2Prompt {
  prompt::PromptEmbedding embedding;
  int annotator = 0;  // 0-based
};

struct Stage2Sample {
  const Image* image = nullptr;
  const std::vector<Mask>* masks = nullptr;
  std::vector<Stage2Prompt> prompts;
  std::vector<std::vector<double>> prior_noise;  // K × D, shared by all prompts
};

losses::Stage2Breakdown stage2_sample(const model::Model& m, const Stage2Sample& s, const losses::LossConfig& cfg,
                                      std::span<double> grad, nn::GroupMask trainable);

[[nodiscard]] nn::GroupMask stage1_groups();
[[nodiscard]] nn::GroupMask stage2_groups(TrainableSet t);

/// Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) over the parameters of the masked groups.
class Adam {
 public:
  Adam(const nn::ParameterSet& params, nn::GroupMask groups, double lr);
  void step(std::span<double> params, std::span<const double> grad);
  [[nodiscard]] long steps() const { return t_; }

 private:
  std::vector<std::uint8_t> active_;
  std::vector<double> m_;
  std::vector<double> v_;
  double lr_;
  long t_ = 0;
};

// ---- Ablation -----------------------------------------------------------------

struct AblationCell {
  double alpha = 0.0;
  double beta = 0.0;
  std::optional<double> ged;  // empty when the cell failed
  std::string error;
  bool cached = false;
  std::filesystem::path checkpoint;
};

struct AblationGrid {
  std::vector<double> alpha_values{0.0, 0.5, 1.0};
  std::vector<double> beta_values{0.0, 0.5, 1.0};
  std::vector<AblationCell> cells;  // row-major over (alpha, beta)

  [[nodiscard]] const AblationCell& at(std::size_t ai, std::size_t bi) const { return cells.at(ai * beta_values.size() + bi); }
};

/// Trains one stage-2 run per (α, β) under <base.out_dir>/cells/, reusing any cell whose
/// checkpoint and config digest already exist. Writes ablation.csv and ablation_heatmap.png.
AblationGrid run_ablation(AblationGrid grid, const TrainConfig& base);

// ---- Interpolation export -----------------------------------------------------

struct InterpolationExport {
  std::vector<double> t;
  std::vector<std::size_t> area;
  std::vector<Mask> masks;
};

/// Writes <out_prefix>_strip.png and <out_prefix>_area.csv.
InterpolationExport export_interpolation(const model::Model& m, const prompt::TextEncoder& encoder, const data::Case& c,
                                         const std::string& prompt_a, const std::string& prompt_b, int steps, int k,
                                         std::uint64_t seed, const std::filesystem::path& out_prefix, double threshold = 0.5);

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
[[nodiscard]] double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace prosona::train
