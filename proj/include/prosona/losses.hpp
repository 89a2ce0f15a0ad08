#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "prosona/backbone.hpp"
#include "prosona/common.hpp"

namespace prosona::losses {

using model::LatentGaussian;

struct Stage1Weights {
  double seg = 1.0;
  double kl = 1.0;
  double bound = 1.0;
};

struct LossConfig {
  double alpha = 1.0;  // weight of the text-level contrastive term
  double beta = 1.0;   // weight of the similarity-level contrastive term
  double tau = 0.1;
  double dice_smooth = 1.0;
  Stage1Weights stage1;

  void validate() const;
};

// ---- Dice -------------------------------------------------------------------

/// 1 − (2·Σ pred·target + ε) / (Σ pred + Σ target + ε). Writes ∂/∂pred into `grad` when non-empty.
double dice_loss(std::span<const double> pred, std::span<const double> target, double smooth, std::span<double> grad = {});
double dice_loss(const ProbabilityMap& pred, const Mask& target, double smooth, ProbabilityMap* grad = nullptr);

// ---- KL -----------------------------------------------------------------------

struct KlGradient {
  std::vector<double> mu_q, sigma_q, mu_p, sigma_p;
};

/// KL(q ‖ p) for diagonal Gaussians, summed over dimensions.
double kl_divergence(const LatentGaussian& q, const LatentGaussian& p, KlGradient* grad = nullptr);

// ---- Boundary diversity -----------------------------------------------------

/// Soft intersection/union of K sample maps: elementwise min / max.
struct EnsemblePrediction {
  std::vector<ProbabilityMap> samples;
  ProbabilityMap p_intersection;
  ProbabilityMap p_union;
  std::vector<int> argmin;  // first sample attaining the min, per pixel
  std::vector<int> argmax;
};

[[nodiscard]] EnsemblePrediction make_ensemble(std::vector<ProbabilityMap> samples);

struct ExpertBounds {
  Mask a_intersection;
  Mask a_union;
};

[[nodiscard]] ExpertBounds expert_bounds(std::span<const Mask> masks);

/// Dice(P∩, A∩) + Dice(P∪, A∪). `sample_grads` receives ∂/∂sample_k (subgradient routed to
/// the arg-min / arg-max sample of each pixel).
double boundary_loss(const EnsemblePrediction& ens, const ExpertBounds& bounds, double smooth,
                     std::vector<ProbabilityMap>* sample_grads = nullptr);

// ---- Stage 1 ----------------------------------------------------------------

struct Stage1Breakdown {
  double l_seg = 0.0;
  double l_kl = 0.0;
  double l_bound = 0.0;
  double total = 0.0;
};

struct Stage1Gradient {
  ProbabilityMap pred;
  KlGradient kl;
  std::vector<ProbabilityMap> samples;
};

Stage1Breakdown stage1_loss(const ProbabilityMap& pred, const Mask& target, const LatentGaussian& q, const LatentGaussian& p,
                            const EnsemblePrediction& ens, const ExpertBounds& bounds, const LossConfig& cfg,
                            Stage1Gradient* grad = nullptr);

// ---- Contrastive ------------------------------------------------------------

/// E: P×d unit-norm prompt embeddings; R: P×K unit-norm similarity profiles;
/// M: P×P positive-pair mask (1 iff same annotator).
struct ContrastiveBatch {
  Eigen::MatrixXd E;
  Eigen::MatrixXd R;
  Eigen::MatrixXd M;
  double tau = 0.1;

  [[nodiscard]] int size() const { return static_cast<int>(M.rows()); }
};

[[nodiscard]] Eigen::MatrixXd positive_pair_mask(std::span<const int> annotator_of_prompt);

/// Mean over all P² entries of BCE-with-logits(X Xᵀ / τ, M). No input validation.
double gram_bce(const Eigen::MatrixXd& X, const Eigen::MatrixXd& M, double tau, Eigen::MatrixXd* dX = nullptr);

double text_contrastive(const ContrastiveBatch& batch, Eigen::MatrixXd* dE = nullptr);
double sim_contrastive(const ContrastiveBatch& batch, Eigen::MatrixXd* dR = nullptr);

// ---- Stage 2 ----------------------------------------------------------------

struct Stage2Breakdown {
  double l_seg = 0.0;
  double l_text = 0.0;
  double l_sim = 0.0;
  double total = 0.0;
};

struct Stage2Gradient {
  std::vector<ProbabilityMap> preds;
  Eigen::MatrixXd dE;
  Eigen::MatrixXd dR;
};

/// L_seg (mean Dice over the prompts' predictions vs their annotators' masks)
/// + α·L_text + β·L_sim. Contrastive terms are skipped when their weight is 0.
Stage2Breakdown stage2_loss(std::span<const ProbabilityMap> preds, std::span<const Mask> targets, const ContrastiveBatch& batch,
                            const LossConfig& cfg, Stage2Gradient* grad = nullptr);
Stage2Breakdown stage2_loss(const ProbabilityMap& pred, const Mask& target, const ContrastiveBatch& batch, const LossConfig& cfg,
                            Stage2Gradient* grad = nullptr);

/// Row-wise L2 normalisation and its vector-Jacobian product.
[[nodiscard]] Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& X);
[[nodiscard]] Eigen::MatrixXd normalize_rows_backward(const Eigen::MatrixXd& X, const Eigen::MatrixXd& d_normalized);

}  // namespace prosona::losses
