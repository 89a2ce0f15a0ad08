#include "prosona/losses.hpp"

#include <algorithm>
#include <cmath>

namespace prosona::losses {

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw ValidationError("tau must be > 0");
  if (!(dice_smooth > 0.0)) throw ValidationError("dice_smooth must be > 0");
  if (alpha < 0.0 || beta < 0.0) throw ValidationError("alpha and beta must be >= 0");
  if (stage1.seg < 0.0 || stage1.kl < 0.0 || stage1.bound < 0.0) throw ValidationError("stage-1 weights must be >= 0");
}

double dice_loss(std::span<const double> pred, std::span<const double> target, double smooth, std::span<double> grad) {
  if (pred.size() != target.size()) throw ValidationError("dice_loss: shape mismatch");
  double inter = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * target[i];
    sum += pred[i] + target[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = sum + smooth;
  if (!grad.empty()) {
    if (grad.size() != pred.size()) throw ValidationError("dice_loss: gradient buffer size mismatch");
    const double den2 = den * den;
    for (std::size_t i = 0; i < pred.size(); ++i) grad[i] = -(2.0 * target[i] * den - num) / den2;
  }
  return 1.0 - num / den;
}

double dice_loss(const ProbabilityMap& pred, const Mask& target, double smooth, ProbabilityMap* grad) {
  if (!pred.same_shape(target)) throw ValidationError("dice_loss: shape mismatch");
  std::vector<double> t(target.values.begin(), target.values.end());
  if (grad != nullptr) *grad = ProbabilityMap(pred.height, pred.width);
  return dice_loss(pred.values, t, smooth, grad != nullptr ? std::span<double>(grad->values) : std::span<double>{});
}

double kl_divergence(const LatentGaussian& q, const LatentGaussian& p, KlGradient* grad) {
  const std::size_t d = q.mu.size();
  if (q.sigma.size() != d || p.mu.size() != d || p.sigma.size() != d) throw ValidationError("kl_divergence: dimension mismatch");
  if (grad != nullptr) *grad = KlGradient{std::vector<double>(d), std::vector<double>(d), std::vector<double>(d), std::vector<double>(d)};
  double kl = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double sq = q.sigma[i], sp = p.sigma[i];
    if (!(sq > 0.0) || !(sp > 0.0)) throw ValidationError("kl_divergence: sigma must be > 0");
    const double diff = q.mu[i] - p.mu[i];
    const double vp = sp * sp;
    kl += std::log(sp / sq) + (sq * sq + diff * diff) / (2.0 * vp) - 0.5;
    if (grad != nullptr) {
      grad->mu_q[i] = diff / vp;
      grad->mu_p[i] = -diff / vp;
      grad->sigma_q[i] = -1.0 / sq + sq / vp;
      grad->sigma_p[i] = 1.0 / sp - (sq * sq + diff * diff) / (vp * sp);
    }
  }
  return kl;
}

EnsemblePrediction make_ensemble(std::vector<ProbabilityMap> samples) {
  if (samples.empty()) throw ValidationError("make_ensemble: no samples");
  EnsemblePrediction e;
  const auto& first = samples.front();
  e.p_intersection = first;
  e.p_union = first;
  e.argmin.assign(first.size(), 0);
  e.argmax.assign(first.size(), 0);
  for (std::size_t k = 1; k < samples.size(); ++k) {
    if (!samples[k].same_shape(first)) throw ValidationError("make_ensemble: sample shape mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      const double v = samples[k].values[i];
      if (v < e.p_intersection.values[i]) {
        e.p_intersection.values[i] = v;
        e.argmin[i] = static_cast<int>(k);
      }
      if (v > e.p_union.values[i]) {
        e.p_union.values[i] = v;
        e.argmax[i] = static_cast<int>(k);
      }
    }
  }
  e.samples = std::move(samples);
  return e;
}

ExpertBounds expert_bounds(std::span<const Mask> masks) {
  if (masks.empty()) throw ValidationError("expert_bounds: no masks");
  ExpertBounds b{masks.front(), masks.front()};
  for (const auto& m : masks) {
    if (!m.same_shape(b.a_union)) throw ValidationError("expert_bounds: mask shape mismatch");
    require_binary(m, "expert_bounds");
    for (std::size_t i = 0; i < m.size(); ++i) {
      b.a_intersection.values[i] &= m.values[i];
      b.a_union.values[i] |= m.values[i];
    }
  }
  return b;
}

double boundary_loss(const EnsemblePrediction& ens, const ExpertBounds& bounds, double smooth,
                     std::vector<ProbabilityMap>* sample_grads) {
  if (ens.samples.size() < 2) throw ConfigError("boundary_loss: needs K >= 2 samples");
  if (!ens.p_intersection.same_shape(bounds.a_intersection) || !ens.p_union.same_shape(bounds.a_union))
    throw ValidationError("boundary_loss: shape mismatch");
  ProbabilityMap g_inter, g_union;
  const bool want = sample_grads != nullptr;
  const double l = dice_loss(ens.p_intersection, bounds.a_intersection, smooth, want ? &g_inter : nullptr) +
                   dice_loss(ens.p_union, bounds.a_union, smooth, want ? &g_union : nullptr);
  if (want) {
    sample_grads->assign(ens.samples.size(), ProbabilityMap(ens.p_union.height, ens.p_union.width));
    for (std::size_t i = 0; i < g_inter.size(); ++i) {
      (*sample_grads)[ens.argmin[i]].values[i] += g_inter.values[i];
      (*sample_grads)[ens.argmax[i]].values[i] += g_union.values[i];
    }
  }
  return l;
}

Stage1Breakdown stage1_loss(const ProbabilityMap& pred, const Mask& target, const LatentGaussian& q, const LatentGaussian& p,
                            const EnsemblePrediction& ens, const ExpertBounds& bounds, const LossConfig& cfg,
                            Stage1Gradient* grad) {
  cfg.validate();
  Stage1Breakdown b;
  const bool want = grad != nullptr;
  b.l_seg = dice_loss(pred, target, cfg.dice_smooth, want ? &grad->pred : nullptr);
  b.l_kl = kl_divergence(q, p, want ? &grad->kl : nullptr);
  b.l_bound = boundary_loss(ens, bounds, cfg.dice_smooth, want ? &grad->samples : nullptr);
  const auto& w = cfg.stage1;
  b.total = w.seg * b.l_seg + w.kl * b.l_kl + w.bound * b.l_bound;
  if (want) {
    for (auto& v : grad->pred.values) v *= w.seg;
    for (auto* vec : {&grad->kl.mu_q, &grad->kl.sigma_q, &grad->kl.mu_p, &grad->kl.sigma_p})
      for (auto& v : *vec) v *= w.kl;
    for (auto& s : grad->samples)
      for (auto& v : s.values) v *= w.bound;
  }
  return b;
}

Eigen::MatrixXd positive_pair_mask(std::span<const int> annotator_of_prompt) {
  const auto p = static_cast<Eigen::Index>(annotator_of_prompt.size());
  Eigen::MatrixXd m(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j) m(i, j) = annotator_of_prompt[i] == annotator_of_prompt[j] ? 1.0 : 0.0;
  return m;
}

double gram_bce(const Eigen::MatrixXd& X, const Eigen::MatrixXd& M, double tau, Eigen::MatrixXd* dX) {
  const Eigen::MatrixXd logits = (X * X.transpose()) / tau;
  const double n = static_cast<double>(logits.size());
  double loss = 0.0;
  Eigen::MatrixXd d_logits(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double x = logits(i, j);
      const double m = M(i, j);
      loss += std::max(x, 0.0) - x * m + std::log1p(std::exp(-std::abs(x)));
      d_logits(i, j) = (nn::kernels::sigmoid(x) - m) / n;
    }
  }
  if (dX != nullptr) {
    const Eigen::MatrixXd d_gram = d_logits / tau;
    *dX = (d_gram + d_gram.transpose()) * X;
  }
  return loss / n;
}

namespace {

void validate_batch(const Eigen::MatrixXd& X, const ContrastiveBatch& b, const char* what) {
  if (!(b.tau > 0.0)) throw ValidationError(std::string(what) + ": tau must be > 0");
  const auto p = b.M.rows();
  if (b.M.cols() != p || X.rows() != p) throw ValidationError(std::string(what) + ": P mismatch between rows and M");
  for (Eigen::Index i = 0; i < p; ++i) {
    if (b.M(i, i) != 1.0) throw ValidationError(std::string(what) + ": M must have a unit diagonal");
    for (Eigen::Index j = 0; j < p; ++j) {
      const double m = b.M(i, j);
      if ((m != 0.0 && m != 1.0) || m != b.M(j, i)) throw ValidationError(std::string(what) + ": M must be binary and symmetric");
    }
    if (std::abs(X.row(i).norm() - 1.0) > 1e-6) throw ValidationError(std::string(what) + ": rows must be unit-norm");
  }
}

}  // namespace

double text_contrastive(const ContrastiveBatch& batch, Eigen::MatrixXd* dE) {
  validate_batch(batch.E, batch, "text_contrastive");
  return gram_bce(batch.E, batch.M, batch.tau, dE);
}

double sim_contrastive(const ContrastiveBatch& batch, Eigen::MatrixXd* dR) {
  validate_batch(batch.R, batch, "sim_contrastive");
  return gram_bce(batch.R, batch.M, batch.tau, dR);
}

Stage2Breakdown stage2_loss(std::span<const ProbabilityMap> preds, std::span<const Mask> targets, const ContrastiveBatch& batch,
                            const LossConfig& cfg, Stage2Gradient* grad) {
  cfg.validate();
  if (preds.empty() || preds.size() != targets.size()) throw ValidationError("stage2_loss: need one target per prediction");
  Stage2Breakdown b;
  const double inv = 1.0 / static_cast<double>(preds.size());
  if (grad != nullptr) grad->preds.assign(preds.size(), ProbabilityMap{});
  for (std::size_t i = 0; i < preds.size(); ++i) {
    b.l_seg += inv * dice_loss(preds[i], targets[i], cfg.dice_smooth, grad != nullptr ? &grad->preds[i] : nullptr);
    if (grad != nullptr)
      for (auto& v : grad->preds[i].values) v *= inv;
  }
  if (grad != nullptr) {
    grad->dE = Eigen::MatrixXd::Zero(batch.E.rows(), batch.E.cols());
    grad->dR = Eigen::MatrixXd::Zero(batch.R.rows(), batch.R.cols());
  }
  if (cfg.alpha > 0.0) {
    b.l_text = text_contrastive(batch, grad != nullptr ? &grad->dE : nullptr);
    if (grad != nullptr) grad->dE *= cfg.alpha;
  }
  if (cfg.beta > 0.0) {
    b.l_sim = sim_contrastive(batch, grad != nullptr ? &grad->dR : nullptr);
    if (grad != nullptr) grad->dR *= cfg.beta;
  }
  b.total = b.l_seg + cfg.alpha * b.l_text + cfg.beta * b.l_sim;
  return b;
}

Stage2Breakdown stage2_loss(const ProbabilityMap& pred, const Mask& target, const ContrastiveBatch& batch, const LossConfig& cfg,
                            Stage2Gradient* grad) {
  return stage2_loss(std::span<const ProbabilityMap>(&pred, 1), std::span<const Mask>(&target, 1), batch, cfg, grad);
}

Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& X) {
  Eigen::MatrixXd Y = X;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double n = std::sqrt(X.row(i).squaredNorm() + 1e-24);
    Y.row(i) /= n;
  }
  return Y;
}

Eigen::MatrixXd normalize_rows_backward(const Eigen::MatrixXd& X, const Eigen::MatrixXd& d_normalized) {
  Eigen::MatrixXd dX(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double n = std::sqrt(X.row(i).squaredNorm() + 1e-24);
    const Eigen::RowVectorXd y = X.row(i) / n;
    const double dot = y.dot(d_normalized.row(i));
    dX.row(i) = (d_normalized.row(i) - y * dot) / n;
  }
  return dX;
}

}  // namespace prosona::losses
