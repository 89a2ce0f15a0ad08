// Primary acceptance run: one PASS/FAIL line per criterion. The exit code is nonzero only
// when a hard criterion fails; the contrastive trend is reported as a soft criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oracles.hpp"
#include "probe.hpp"
#include "prosona/checkpoint.hpp"
#include "prosona/image_io.hpp"
#include "prosona/losses.hpp"
#include "prosona/metrics.hpp"
#include "prosona/prompt_engine.hpp"
#include "prosona/service.hpp"
#include "prosona/synthetic_data.hpp"
#include "prosona/trainer.hpp"

using namespace prosona;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  bool soft = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- Random instances -----------------------------------------------------------

std::vector<double> unit_row(std::mt19937_64& rng, int d, bool positive) {
  std::normal_distribution<double> n;
  std::vector<double> v(static_cast<std::size_t>(d));
  double s = 0.0;
  for (auto& x : v) {
    x = positive ? std::abs(n(rng)) + 1e-3 : n(rng);
    s += x * x;
  }
  for (auto& x : v) x /= std::sqrt(s);
  return v;
}

model::LatentGaussian random_gaussian(std::mt19937_64& rng, int d) {
  std::uniform_real_distribution<double> mu(-1.5, 1.5);
  std::uniform_real_distribution<double> sigma(0.3, 2.0);
  model::LatentGaussian g;
  for (int i = 0; i < d; ++i) {
    g.mu.push_back(mu(rng));
    g.sigma.push_back(sigma(rng));
  }
  return g;
}

struct RandomBatch {
  losses::ContrastiveBatch batch;
  std::vector<std::vector<double>> e;
  std::vector<std::vector<double>> r;
  std::vector<std::vector<double>> m;
  std::vector<int> who;
};

RandomBatch random_batch(std::mt19937_64& rng, int p, int d, int k, int annotators) {
  RandomBatch b;
  for (int i = 0; i < p; ++i) {
    b.e.push_back(unit_row(rng, d, false));
    b.r.push_back(unit_row(rng, k, true));
    b.who.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(annotators)));
  }
  b.batch.E.resize(p, d);
  b.batch.R.resize(p, k);
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < d; ++j) b.batch.E(i, j) = b.e[i][j];
    for (int j = 0; j < k; ++j) b.batch.R(i, j) = b.r[i][j];
  }
  b.batch.M = losses::positive_pair_mask(b.who);
  b.batch.tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
  b.m.assign(p, std::vector<double>(p));
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) b.m[i][j] = b.batch.M(i, j);
  return b;
}

// ---- 1. Loss oracles -------------------------------------------------------------

Outcome loss_oracles() {
  std::mt19937_64 rng(101);
  std::map<std::string, double> worst;
  auto track = [&](const std::string& name, double a, double b) { worst[name] = std::max(worst[name], std::abs(a - b)); };
  for (int t = 0; t < 500; ++t) {
    const int h = 1 + static_cast<int>(rng() % 5);
    const int w = 1 + static_cast<int>(rng() % 5);
    const int k = 2 + static_cast<int>(rng() % 3);
    const int a = 1 + static_cast<int>(rng() % 4);
    const int p = 1 + static_cast<int>(rng() % 4);
    const int d = 1 + static_cast<int>(rng() % 6);
    const losses::LossConfig cfg{.alpha = std::uniform_real_distribution<double>(0, 2)(rng),
                                 .beta = std::uniform_real_distribution<double>(0, 2)(rng)};

    const auto pred = oracle::random_map(rng, h, w);
    std::vector<Mask> masks;
    for (int i = 0; i < a; ++i) masks.push_back(oracle::random_mask(rng, h, w));
    const auto target = oracle::as_doubles(masks[0]);
    track("dice", losses::dice_loss(pred, masks[0], cfg.dice_smooth), oracle::dice_loss(pred.values, target, cfg.dice_smooth));

    const auto q = random_gaussian(rng, d);
    const auto pr = random_gaussian(rng, d);
    track("kl", losses::kl_divergence(q, pr), oracle::kl_diag(q.mu, q.sigma, pr.mu, pr.sigma));

    std::vector<ProbabilityMap> samples;
    for (int i = 0; i < k; ++i) samples.push_back(oracle::random_map(rng, h, w));
    const auto ens = losses::make_ensemble(samples);
    const auto bounds = losses::expert_bounds(masks);
    const double bound_ref = oracle::boundary_loss(samples, masks, cfg.dice_smooth);
    track("boundary", losses::boundary_loss(ens, bounds, cfg.dice_smooth), bound_ref);

    const auto rb = random_batch(rng, p, d, k, std::min(a, p));
    const double text_ref = oracle::gram_bce(rb.e, rb.m, rb.batch.tau);
    const double sim_ref = oracle::gram_bce(rb.r, rb.m, rb.batch.tau);
    track("text_contrastive", losses::text_contrastive(rb.batch), text_ref);
    track("sim_contrastive", losses::sim_contrastive(rb.batch), sim_ref);

    const auto s1 = losses::stage1_loss(pred, masks[0], q, pr, ens, bounds, cfg);
    track("stage1", s1.total,
          oracle::dice_loss(pred.values, target, cfg.dice_smooth) + oracle::kl_diag(q.mu, q.sigma, pr.mu, pr.sigma) + bound_ref);

    std::vector<ProbabilityMap> preds;
    std::vector<Mask> targets;
    double seg = 0.0;
    for (int i = 0; i < p; ++i) {
      preds.push_back(oracle::random_map(rng, h, w));
      targets.push_back(masks[static_cast<std::size_t>(rb.who[i]) % masks.size()]);
      seg += oracle::dice_loss(preds.back().values, oracle::as_doubles(targets.back()), cfg.dice_smooth) / p;
    }
    track("stage2", losses::stage2_loss(preds, targets, rb.batch, cfg).total, seg + cfg.alpha * text_ref + cfg.beta * sim_ref);
  }
  double max_err = 0.0;
  std::string detail;
  for (const auto& [name, err] : worst) {
    max_err = std::max(max_err, err);
    detail += (detail.empty() ? "" : " ") + name + "=" + fmt("%.1e", err);
  }
  return {max_err <= 1e-10, false, "500 instances, max |err| " + fmt("%.2e", max_err) + " (" + detail + ")"};
}

// ---- 2. Gradients ------------------------------------------------------------------

template <class F>
std::vector<double> numeric_gradient(F&& f, const std::vector<double>& x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = oracle::central_difference(f, x, i, h);
  return g;
}

std::vector<double> flat(const Eigen::MatrixXd& m) {
  std::vector<double> v;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

std::vector<std::vector<double>> rows_of(const std::vector<double>& x, std::size_t offset, int rows, int cols) {
  std::vector<std::vector<double>> out(rows, std::vector<double>(cols));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[i][j] = x[offset + static_cast<std::size_t>(i * cols + j)];
  return out;
}

Outcome gradient_suite() {
  std::mt19937_64 rng(202);
  std::map<std::string, double> worst;
  auto record = [&](const std::string& name, const std::vector<double>& a, const std::vector<double>& n) {
    worst[name] = std::max(worst[name], oracle::relative_error(a, n));
  };

  for (int trial = 0; trial < 5; ++trial) {
    // Dice.
    const auto p = oracle::random_map(rng, 4, 5);
    const auto t = oracle::as_doubles(oracle::random_mask(rng, 4, 5));
    std::vector<double> gd(p.size());
    (void)losses::dice_loss(p.values, t, 1.0, gd);
    record("dice", gd, numeric_gradient([&](const std::vector<double>& x) { return oracle::dice_loss(x, t, 1.0); }, p.values));

    // KL wrt both Gaussians.
    const auto q = random_gaussian(rng, 6);
    const auto pr = random_gaussian(rng, 6);
    losses::KlGradient kg;
    (void)losses::kl_divergence(q, pr, &kg);
    std::vector<double> packed;
    std::vector<double> analytic;
    for (const auto* v : {&q.mu, &q.sigma, &pr.mu, &pr.sigma}) packed.insert(packed.end(), v->begin(), v->end());
    for (const auto* v : {&kg.mu_q, &kg.sigma_q, &kg.mu_p, &kg.sigma_p}) analytic.insert(analytic.end(), v->begin(), v->end());
    record("kl", analytic, numeric_gradient(
                               [](const std::vector<double>& x) {
                                 auto s = [&](int b) { return std::vector<double>(x.begin() + 6 * b, x.begin() + 6 * (b + 1)); };
                                 return oracle::kl_diag(s(0), s(1), s(2), s(3));
                               },
                               packed));

    // Boundary wrt every sample.
    std::vector<ProbabilityMap> samples;
    for (int i = 0; i < 3; ++i) samples.push_back(oracle::random_map(rng, 4, 4));
    const std::vector<Mask> masks{oracle::random_mask(rng, 4, 4), oracle::random_mask(rng, 4, 4)};
    std::vector<ProbabilityMap> sg;
    (void)losses::boundary_loss(losses::make_ensemble(samples), losses::expert_bounds(masks), 1.0, &sg);
    std::vector<double> xs;
    std::vector<double> as;
    for (int i = 0; i < 3; ++i) {
      xs.insert(xs.end(), samples[i].values.begin(), samples[i].values.end());
      as.insert(as.end(), sg[i].values.begin(), sg[i].values.end());
    }
    record("boundary", as, numeric_gradient(
                               [&](const std::vector<double>& x) {
                                 auto s = samples;
                                 for (int i = 0; i < 3; ++i) std::copy_n(x.begin() + 16 * i, 16, s[i].values.begin());
                                 return oracle::boundary_loss(s, masks, 1.0);
                               },
                               xs, 1e-7));

    // Contrastive terms wrt E and R.
    const auto rb = random_batch(rng, 4, 5, 4, 2);
    Eigen::MatrixXd de;
    Eigen::MatrixXd dr;
    (void)losses::text_contrastive(rb.batch, &de);
    (void)losses::sim_contrastive(rb.batch, &dr);
    record("text_contrastive", flat(de),
           numeric_gradient([&](const std::vector<double>& x) { return oracle::gram_bce(rows_of(x, 0, 4, 5), rb.m, rb.batch.tau); },
                            flat(rb.batch.E)));
    record("sim_contrastive", flat(dr),
           numeric_gradient([&](const std::vector<double>& x) { return oracle::gram_bce(rows_of(x, 0, 4, 4), rb.m, rb.batch.tau); },
                            flat(rb.batch.R)));

    // Row normalisation feeding the similarity term.
    Eigen::MatrixXd raw = Eigen::MatrixXd::NullaryExpr(4, 4, [&] { return std::normal_distribution<double>(0, 1)(rng); });
    Eigen::MatrixXd up;
    auto nb = rb.batch;
    nb.R = losses::normalize_rows(raw);
    (void)losses::sim_contrastive(nb, &up);
    record("normalized_sim", flat(losses::normalize_rows_backward(raw, up)),
           numeric_gradient(
               [&](const std::vector<double>& x) {
                 Eigen::MatrixXd m(4, 4);
                 for (int i = 0; i < 4; ++i)
                   for (int j = 0; j < 4; ++j) m(i, j) = x[static_cast<std::size_t>(i * 4 + j)];
                 const Eigen::MatrixXd n = losses::normalize_rows(m);
                 std::vector<std::vector<double>> rows(4, std::vector<double>(4));
                 for (int i = 0; i < 4; ++i)
                   for (int j = 0; j < 4; ++j) rows[i][j] = n(i, j);
                 return oracle::gram_bce(rows, rb.m, rb.batch.tau);
               },
               flat(raw)));

    // Stage-1 total wrt prediction, both Gaussians and the samples.
    const auto pred = oracle::random_map(rng, 3, 3);
    const std::vector<Mask> m2{oracle::random_mask(rng, 3, 3), oracle::random_mask(rng, 3, 3)};
    const auto q2 = random_gaussian(rng, 2);
    const auto p2 = random_gaussian(rng, 2);
    const std::vector<ProbabilityMap> s2{oracle::random_map(rng, 3, 3), oracle::random_map(rng, 3, 3)};
    const losses::LossConfig cfg;
    losses::Stage1Gradient g1;
    (void)losses::stage1_loss(pred, m2[0], q2, p2, losses::make_ensemble(s2), losses::expert_bounds(m2), cfg, &g1);
    std::vector<double> x1 = pred.values;
    for (const auto* v : {&q2.mu, &q2.sigma, &p2.mu, &p2.sigma}) x1.insert(x1.end(), v->begin(), v->end());
    for (const auto& s : s2) x1.insert(x1.end(), s.values.begin(), s.values.end());
    std::vector<double> a1 = g1.pred.values;
    for (const auto* v : {&g1.kl.mu_q, &g1.kl.sigma_q, &g1.kl.mu_p, &g1.kl.sigma_p}) a1.insert(a1.end(), v->begin(), v->end());
    for (const auto& s : g1.samples) a1.insert(a1.end(), s.values.begin(), s.values.end());
    record("stage1", a1, numeric_gradient(
                             [&](const std::vector<double>& x) {
                               std::vector<double> pv(x.begin(), x.begin() + 9);
                               std::vector<ProbabilityMap> s(2, ProbabilityMap(3, 3));
                               std::copy_n(x.begin() + 17, 9, s[0].values.begin());
                               std::copy_n(x.begin() + 26, 9, s[1].values.begin());
                               return oracle::dice_loss(pv, oracle::as_doubles(m2[0]), 1.0) +
                                      oracle::kl_diag({x[9], x[10]}, {x[11], x[12]}, {x[13], x[14]}, {x[15], x[16]}) +
                                      oracle::boundary_loss(s, m2, 1.0);
                             },
                             x1, 1e-7));

    // Stage-2 total wrt the predictions, E and R.
    const auto b2 = random_batch(rng, 2, 4, 3, 2);
    const std::vector<ProbabilityMap> preds{oracle::random_map(rng, 3, 3), oracle::random_map(rng, 3, 3)};
    const std::vector<Mask> tg{m2[static_cast<std::size_t>(b2.who[0])], m2[static_cast<std::size_t>(b2.who[1])]};
    losses::Stage2Gradient g2;
    (void)losses::stage2_loss(preds, tg, b2.batch, cfg, &g2);
    std::vector<double> x2 = preds[0].values;
    x2.insert(x2.end(), preds[1].values.begin(), preds[1].values.end());
    const auto ef = flat(b2.batch.E);
    const auto rf = flat(b2.batch.R);
    x2.insert(x2.end(), ef.begin(), ef.end());
    x2.insert(x2.end(), rf.begin(), rf.end());
    std::vector<double> a2 = g2.preds[0].values;
    a2.insert(a2.end(), g2.preds[1].values.begin(), g2.preds[1].values.end());
    const auto gef = flat(g2.dE);
    const auto grf = flat(g2.dR);
    a2.insert(a2.end(), gef.begin(), gef.end());
    a2.insert(a2.end(), grf.begin(), grf.end());
    record("stage2", a2, numeric_gradient(
                             [&](const std::vector<double>& x) {
                               double seg = 0.0;
                               for (int i = 0; i < 2; ++i)
                                 seg += 0.5 * oracle::dice_loss(std::vector<double>(x.begin() + 9 * i, x.begin() + 9 * (i + 1)),
                                                                oracle::as_doubles(tg[static_cast<std::size_t>(i)]), 1.0);
                               return seg + cfg.alpha * oracle::gram_bce(rows_of(x, 18, 2, 4), b2.m, b2.batch.tau) +
                                      cfg.beta * oracle::gram_bce(rows_of(x, 26, 2, 3), b2.m, b2.batch.tau);
                             },
                             x2));
  }

  // Personalize pipeline output wrt the query code and the MLP parameters.
  for (int trial = 0; trial < 2; ++trial) {
    auto m = testutil::probe_model(300 + static_cast<std::uint64_t>(trial));
    testutil::jitter_params(m, 310 + static_cast<std::uint64_t>(trial));
    m.set_stage(2);
    const Image img = testutil::random_image(rng, 16, 16);
    const prompt::HashedBagOfWordsEncoder enc;
    const auto bank = prompt::draw_prior_bank(m, img, 4, 11 + static_cast<std::uint64_t>(trial));
    std::vector<nn::Tensor> keys;
    for (const auto& s : bank.samples) keys.push_back(nn::Tensor::vector(s.z));
    const auto e = prompt::encode_text(trial == 0 ? "include subtle regions" : "tight boundary", enc);
    const auto w = oracle::random_map(rng, 16, 16);
    auto output = [&](nn::Graph& g, nn::Var z_query) {
      model::Model::EncodedVars vars{g.constant(bank.encoded.features), {}};
      for (const auto& t : bank.encoded.pyramid) vars.pyramid.push_back(g.constant(t));
      return prompt::fuse_and_decode(g, m, vars, keys, z_query).prob;
    };
    auto weighted = [&](const nn::Tensor& prob) {
      double s = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) s += w.values[i] * prob.data[i];
      return s;
    };

    const auto z0 = prompt::project(e, m).z;
    nn::Graph g(m.params().values());
    const auto zv = g.leaf(nn::Tensor::vector(z0));
    g.accumulate_grad(output(g, zv), w.values);
    g.backward();
    record("pipeline_z", g.grad(zv).data, numeric_gradient(
                                                [&](const std::vector<double>& z) {
                                                  nn::Graph h(m.params().values());
                                                  return weighted(h.value(output(h, h.constant(nn::Tensor::vector(z)))));
                                                },
                                                z0));

    std::vector<double> grad(m.params().size(), 0.0);
    nn::Graph gp(m.params().values(), grad, nn::GroupMask{nn::ParamGroup::projector});
    gp.accumulate_grad(output(gp, m.project(gp, gp.constant(nn::Tensor::vector(e.e)))), w.values);
    gp.backward();
    const std::vector<double> base(m.params().values().begin(), m.params().values().end());
    std::vector<double> analytic;
    std::vector<double> numeric;
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (!m.params().in_group(i, nn::ParamGroup::projector)) continue;
      analytic.push_back(grad[i]);
      numeric.push_back(oracle::central_difference(
          [&](const std::vector<double>& pv) {
            nn::Graph h(pv);
            return weighted(h.value(output(h, m.project(h, h.constant(nn::Tensor::vector(e.e))))));
          },
          base, i, 1e-6));
    }
    record("pipeline_mlp", analytic, numeric);
  }

  double max_err = 0.0;
  std::string detail;
  for (const auto& [name, err] : worst) {
    max_err = std::max(max_err, err);
    detail += (detail.empty() ? "" : " ") + name + "=" + fmt("%.1e", err);
  }
  return {max_err <= 1e-3, false, "max relative error " + fmt("%.2e", max_err) + " (" + detail + ")"};
}

// ---- 3. KL vs Monte-Carlo --------------------------------------------------------

Outcome kl_monte_carlo() {
  std::mt19937_64 rng(303);
  double worst = 0.0;
  for (int pair = 0; pair < 20; ++pair) {
    const auto q = random_gaussian(rng, 6);
    const auto p = random_gaussian(rng, 6);
    const double closed = losses::kl_divergence(q, p);
    const double mc = oracle::kl_monte_carlo(q.mu, q.sigma, p.mu, p.sigma, 1'000'000, rng());
    worst = std::max(worst, std::abs(closed - mc) / closed);
  }
  return {worst <= 0.01, false, "20 pairs, 1e6 samples, worst relative deviation " + fmt("%.3f%%", 100.0 * worst)};
}

// ---- 4. Metric oracles -----------------------------------------------------------

Outcome metric_oracles() {
  std::mt19937_64 rng(404);
  int mismatches = 0;
  int property_failures = 0;
  std::map<std::string, int> violated;
  for (int t = 0; t < 200; ++t) {
    const int h = 1 + static_cast<int>(rng() % 5);
    const int w = 1 + static_cast<int>(rng() % 5);
    const int k = 1 + static_cast<int>(rng() % 4);
    const int a = 1 + static_cast<int>(rng() % 4);
    std::vector<ProbabilityMap> soft;
    std::vector<Mask> s;
    std::vector<Mask> y;
    std::vector<Mask> prompted;
    for (int i = 0; i < k; ++i) {
      soft.push_back(oracle::random_map(rng, h, w));
      s.push_back(binarize(soft.back()));
    }
    for (int i = 0; i < a; ++i) y.push_back(oracle::random_mask(rng, h, w));
    for (int i = 0; i < a; ++i) prompted.push_back(oracle::random_mask(rng, h, w));

    mismatches += metrics::ged_squared(s, y) != oracle::ged_squared(s, y);
    mismatches += metrics::dice_soft(soft, y) != oracle::dice_soft(soft, y);
    mismatches += metrics::dice_max(s, y) != oracle::dice_max(s, y);
    mismatches += metrics::dice_match(prompted, y) != oracle::dice_match(prompted, y);

    auto check = [&](const char* name, bool ok) {
      if (!ok) {
        ++property_failures;
        ++violated[name];
      }
    };
    check("ged(S,S)=0", metrics::ged(s, s) == 0.0);
    check("ged symmetry", std::abs(metrics::ged(s, y) - metrics::ged(y, s)) <= 1e-12);
    auto sp = s;
    auto yp = y;
    auto softp = soft;
    std::shuffle(sp.begin(), sp.end(), rng);
    std::shuffle(yp.begin(), yp.end(), rng);
    std::shuffle(softp.begin(), softp.end(), rng);
    check("ged permutation", std::abs(metrics::ged(sp, yp) - metrics::ged(s, y)) <= 1e-12);
    check("dice_soft permutation", std::abs(metrics::dice_soft(softp, yp) - metrics::dice_soft(soft, y)) <= 1e-12);
    check("dice_max permutation", std::abs(metrics::dice_max(sp, yp) - metrics::dice_max(s, y)) <= 1e-12);
  }
  std::string which;
  for (const auto& [name, count] : violated) which += " " + name + ":" + std::to_string(count);
  return {mismatches == 0 && property_failures == 0, false,
          "200 cases, " + std::to_string(mismatches) + " oracle mismatches, " + std::to_string(property_failures) +
              " property violations" + which};
}

// ---- End-to-end pipeline -----------------------------------------------------------

struct Pipeline {
  fs::path work;
  data::DatasetManifest manifest;
  data::GenerationConfig gen;
  train::TrainConfig stage1;
  train::TrainConfig stage2;
  fs::path stage1_best;
  fs::path stage2_best;
  fs::path stage2_zero_best;
  double stage1_seconds = 0.0;
  double stage2_seconds = 0.0;
  double datagen_seconds = 0.0;

  static constexpr int kEvalK = 10;
  static constexpr std::uint64_t kEvalSeed = 3;

  explicit Pipeline(fs::path w) : work(std::move(w)) {
    gen.height = gen.width = 64;
    gen.num_cases = 200;
    gen.annotators = 2;
    gen.seed = 7;

    stage1.data_dir = work / "data";
    stage1.out_dir = work / "stage1";
    stage1.epochs = 12;
    stage1.learning_rate = 1e-3;
    stage1.batch_size = 8;
    stage1.k = 6;
    stage1.base_width = 8;
    stage1.seed = 1;
    stage1.threads = 1;

    stage2 = stage1;
    stage2.stage = 2;
    stage2.out_dir = work / "stage2";
    stage2.epochs = 30;
    stage2.learning_rate = 1e-2;
    stage2.alpha = 1.0;
    stage2.beta = 1.0;
    stage2.tau = 0.1;
    stage2.stage1_checkpoint = work / "stage1" / "best";
  }

  void run() {
    auto t0 = Clock::now();
    manifest = data::generate_dataset(gen, work / "data", true);
    datagen_seconds = seconds_since(t0);

    t0 = Clock::now();
    stage1_best = train::train_stage1(stage1).best_dir;
    stage1_seconds = seconds_since(t0);
    std::cout << "  stage 1 trained in " << fmt("%.0f", stage1_seconds) << " s" << std::endl;

    t0 = Clock::now();
    stage2_best = train::train_stage2(stage2).best_dir;
    stage2_seconds = seconds_since(t0);
    std::cout << "  stage 2 (alpha = beta = 1) trained in " << fmt("%.0f", stage2_seconds) << " s" << std::endl;

    auto zero = stage2;
    zero.alpha = 0.0;
    zero.beta = 0.0;
    zero.out_dir = work / "stage2_zero";
    stage2_zero_best = train::train_stage2(zero).best_dir;
    std::cout << "  stage 2 (alpha = beta = 0) trained" << std::endl;
  }

  [[nodiscard]] metrics::MetricsReport evaluate(const fs::path& checkpoint) const {
    const auto m = ckpt::load(checkpoint);
    const prompt::HashedBagOfWordsEncoder enc;
    const metrics::ModelPredictor predictor(m, enc, metrics::SampleSource::prompts);
    metrics::EvalConfig ec;
    ec.k = kEvalK;
    ec.seed = kEvalSeed;
    return metrics::evaluate(predictor, manifest, data::catalog_from_manifest(manifest), ec);
  }
};

Outcome end_to_end(const Pipeline& p, const metrics::MetricsReport& report) {
  const auto m = ckpt::load(p.stage2_best);
  const prompt::HashedBagOfWordsEncoder enc;
  const auto catalog = data::catalog_from_manifest(p.manifest);
  const auto& conservative = catalog.styles.front().prompt_texts.front();
  const auto& inclusive = catalog.styles.back().prompt_texts.front();
  const auto tests = p.manifest.cases_in(data::Split::test);
  int larger = 0;
  for (std::size_t i = 0; i < tests.size(); ++i) {
    const auto c = data::load_case(p.manifest, tests[i]->case_id);
    const auto bank = prompt::draw_prior_bank(m, c.image, Pipeline::kEvalK, mix_seed(Pipeline::kEvalSeed, i));
    const auto a_con = mask_area(binarize(prompt::personalize(bank, prompt::encode_text(conservative, enc), m).map));
    const auto a_inc = mask_area(binarize(prompt::personalize(bank, prompt::encode_text(inclusive, enc), m).map));
    larger += a_inc > a_con;
  }
  const double fraction = static_cast<double>(larger) / static_cast<double>(tests.size());
  const double dice_match = report.dice_match.value_or(0.0);
  const double runtime = p.datagen_seconds + p.stage1_seconds + p.stage2_seconds;
  const bool pass = dice_match >= 85.0 && fraction >= 0.9 && runtime <= 900.0;
  std::ostringstream os;
  os << "Dice Match " << fmt("%.2f", dice_match) << " (>= 85), inclusive > conservative on " << larger << "/" << tests.size()
     << " = " << fmt("%.1f%%", 100.0 * fraction) << " (>= 90%), GED " << fmt("%.4f", report.ged) << ", Dice Soft "
     << fmt("%.2f", report.dice_soft) << ", Dice Max " << fmt("%.2f", report.dice_max) << ", runtime " << fmt("%.0f", runtime)
     << " s (<= 900)";
  return {pass, false, os.str()};
}

Outcome contrastive_trend(const metrics::MetricsReport& with, const metrics::MetricsReport& without) {
  const double margin = without.ged - with.ged;
  std::ostringstream os;
  os << "GED(1,1) " << fmt("%.4f", with.ged) << " vs GED(0,0) " << fmt("%.4f", without.ged) << ", margin " << fmt("%+.4f", margin)
     << " (soft: reported, does not fail the run)";
  return {margin >= 0.0, true, os.str()};
}

Outcome interpolation_contract(const Pipeline& p) {
  const auto m = ckpt::load(p.stage2_best);
  const prompt::HashedBagOfWordsEncoder enc;
  const auto catalog = data::catalog_from_manifest(p.manifest);
  const auto ea = prompt::encode_text(catalog.styles.front().prompt_texts.front(), enc);
  const auto eb = prompt::encode_text(catalog.styles.back().prompt_texts.front(), enc);
  const auto tests = p.manifest.cases_in(data::Split::test);
  int endpoint_mismatches = 0;
  std::vector<double> rhos;
  std::vector<double> ts;
  for (int s = 0; s <= 10; ++s) ts.push_back(s / 10.0);
  for (std::size_t i = 0; i < tests.size(); ++i) {
    const auto c = data::load_case(p.manifest, tests[i]->case_id);
    const auto bank = prompt::draw_prior_bank(m, c.image, Pipeline::kEvalK, mix_seed(Pipeline::kEvalSeed, i));
    const auto pa = prompt::personalize(bank, ea, m);
    const auto pb = prompt::personalize(bank, eb, m);
    std::vector<double> areas;
    for (double t : ts) {
      const auto r = prompt::interpolate(bank, ea, eb, t, m);
      if (t == 0.0) endpoint_mismatches += r.map.values != pa.map.values;
      if (t == 1.0) endpoint_mismatches += r.map.values != pb.map.values;
      areas.push_back(static_cast<double>(mask_area(binarize(r.map))));
    }
    rhos.push_back(train::spearman(ts, areas));
  }
  std::sort(rhos.begin(), rhos.end());
  const std::size_t n = rhos.size();
  const double median = n % 2 ? rhos[n / 2] : 0.5 * (rhos[n / 2 - 1] + rhos[n / 2]);
  std::ostringstream os;
  os << tests.size() << " test cases, endpoint mismatches " << endpoint_mismatches << ", median Spearman " << fmt("%.3f", median)
     << " (>= 0.9), min " << fmt("%.3f", rhos.front());
  return {endpoint_mismatches == 0 && median >= 0.9, false, os.str()};
}

// ---- 8. Determinism ---------------------------------------------------------------

std::map<std::string, std::string> tree_digest(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file()) out[fs::relative(entry.path(), root).generic_string()] = io::sha256_file(entry.path());
  return out;
}

std::vector<json> log_without_paths(const fs::path& file) {
  std::vector<json> out;
  std::ifstream f(file);
  for (std::string line; std::getline(f, line);) {
    auto j = json::parse(line);
    // Run directories differ by construction; the parent is still compared by content id.
    if (j["event"] == "config") {
      j["config"].erase("out_dir");
      j["config"].erase("stage1_checkpoint");
    }
    out.push_back(std::move(j));
  }
  return out;
}

json stable_response(const service::HttpResponse& r) {
  auto j = json::parse(r.body);
  j.erase("latency_ms");
  return j;
}

Outcome determinism(const Pipeline& p) {
  std::vector<std::string> failures;

  // Datagen: a second generation with the same seed is byte-identical.
  const auto again = p.work / "determinism" / "data";
  (void)data::generate_dataset(p.gen, again, true);
  if (tree_digest(p.work / "data") != tree_digest(again)) failures.emplace_back("datagen");

  // Training: two short single-threaded runs of each stage.
  auto short1 = p.stage1;
  short1.epochs = 2;
  short1.val_max_cases = 6;
  std::vector<std::string> ids;
  for (const char* run : {"a", "b"}) {
    short1.out_dir = p.work / "determinism" / (std::string("stage1_") + run);
    const auto r1 = train::train_stage1(short1);
    auto short2 = p.stage2;
    short2.epochs = 2;
    short2.val_max_cases = 6;
    short2.stage1_checkpoint = r1.last_dir;
    short2.out_dir = p.work / "determinism" / (std::string("stage2_") + run);
    const auto r2 = train::train_stage2(short2);
    ids.push_back(r1.last.checkpoint_id + "/" + r2.last.checkpoint_id);
  }
  const auto d = p.work / "determinism";
  if (ids[0] != ids[1] || log_without_paths(d / "stage1_a" / "train_log.jsonl") != log_without_paths(d / "stage1_b" / "train_log.jsonl") ||
      log_without_paths(d / "stage2_a" / "train_log.jsonl") != log_without_paths(d / "stage2_b" / "train_log.jsonl"))
    failures.emplace_back("training");

  // Evaluation: repeated runs and a different thread count give identical reports.
  const auto m = ckpt::load(p.stage2_best);
  const prompt::HashedBagOfWordsEncoder enc;
  const metrics::ModelPredictor predictor(m, enc, metrics::SampleSource::prompts);
  const auto catalog = data::catalog_from_manifest(p.manifest);
  metrics::EvalConfig ec;
  ec.k = 4;
  ec.seed = 11;
  const auto first = metrics::evaluate(predictor, p.manifest, catalog, ec).to_json();
  const auto second = metrics::evaluate(predictor, p.manifest, catalog, ec).to_json();
  ec.threads = 2;
  const auto threaded = metrics::evaluate(predictor, p.manifest, catalog, ec).to_json();
  if (first != second || first != threaded) failures.emplace_back("eval");

  // Service: identical requests give identical responses (latency aside).
  service::InferenceService svc(service::ServiceOptions{.port = 0});
  svc.set_dataset(p.manifest);
  ckpt::Metadata meta;
  svc.set_model({ckpt::load(p.stage2_best, &meta), prompt::make_text_encoder("fallback"), meta.checkpoint_id});
  const auto id = p.manifest.cases_in(data::Split::test).front()->case_id;
  const std::string predict = json{{"case_id", id}, {"prompt", "inclusive mask"}, {"seed", 42}}.dump();
  const std::string interp =
      json{{"case_id", id}, {"prompt_a", "conservative mask"}, {"prompt_b", "inclusive mask"}, {"t", 0.4}, {"seed", 42}}.dump();
  const auto p1 = svc.predict(predict);
  const auto i1 = svc.interpolate(interp);
  if (p1.status != 200 || i1.status != 200 || stable_response(p1) != stable_response(svc.predict(predict)) ||
      stable_response(i1) != stable_response(svc.interpolate(interp)))
    failures.emplace_back("service");

  std::string detail = "datagen, training, eval, service";
  if (!failures.empty()) {
    detail = "not reproducible:";
    for (const auto& f : failures) detail += " " + f;
  } else {
    detail += " reproducible";
  }
  return {failures.empty(), false, detail};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app("Primary acceptance criteria");
  fs::path work = fs::temp_directory_path() / "prosona_acceptance";
  app.add_option("--work", work, "scratch directory for the end-to-end run");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  int hard_failures = 0;
  auto report = [&](const std::string& name, double limit_seconds, const std::function<Outcome()>& fn) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (limit_seconds > 0 && secs > limit_seconds) {
      o.pass = false;
      o.detail += ", exceeded " + fmt("%.0f", limit_seconds) + " s";
    }
    const char* tag = o.pass ? "PASS" : (o.soft ? "SOFT-FAIL" : "FAIL");
    if (!o.pass && !o.soft) ++hard_failures;
    std::cout << tag << "  " << name << ": " << o.detail << " [" << fmt("%.1f", secs) << " s]" << std::endl;
  };

  report("loss oracle suite", 30, loss_oracles);
  report("gradient suite", 120, gradient_suite);
  report("KL closed form vs Monte-Carlo", 0, kl_monte_carlo);
  report("metric oracle suite", 0, metric_oracles);

  Pipeline pipeline(work);
  std::optional<metrics::MetricsReport> with;
  std::optional<metrics::MetricsReport> without;
  std::string setup_error;
  try {
    std::cout << "  running end-to-end pipeline in " << work << std::endl;
    pipeline.run();
    with = pipeline.evaluate(pipeline.stage2_best);
    without = pipeline.evaluate(pipeline.stage2_zero_best);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_pipeline = [&](const std::function<Outcome()>& fn) {
    return [&, fn] {
      if (!setup_error.empty()) return Outcome{false, false, "pipeline failed: " + setup_error};
      return fn();
    };
  };
  report("end-to-end synthetic personalization", 0, needs_pipeline([&] { return end_to_end(pipeline, *with); }));
  if (setup_error.empty()) {
    report("contrastive benefit trend", 0, [&] { return contrastive_trend(*with, *without); });
  } else {
    report("contrastive benefit trend", 0, [&] { return Outcome{false, true, "pipeline failed: " + setup_error}; });
  }
  report("interpolation contract", 0, needs_pipeline([&] { return interpolation_contract(pipeline); }));
  report("determinism", 0, needs_pipeline([&] { return determinism(pipeline); }));

  std::cout << (hard_failures == 0 ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED") << " (" << hard_failures << " hard failures)"
            << std::endl;
  return hard_failures == 0 ? 0 : 1;
}
