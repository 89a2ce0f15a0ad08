#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "prosona/checkpoint.hpp"
#include "prosona/metrics.hpp"
#include "prosona/service.hpp"
#include "prosona/synthetic_data.hpp"
#include "prosona/trainer.hpp"

namespace {

using namespace prosona;

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback = 0) {
  if (flag) return *flag;
  if (auto env = train::seed_from_env()) return *env;
  return fallback;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw ConfigError("not a number in list: " + item);
    }
  }
  return out;
}

/// Flags shared by the training verbs; each one, when given, overrides the config file.
struct TrainFlags {
  std::string config;
  std::optional<std::string> data, out, stage1, trainable, text_encoder;
  std::optional<int> epochs, batch_size, k, val_k, val_max_cases, threads, base_width;
  std::optional<double> lr, alpha, beta, tau, kl_weight, bound_weight;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON config file");
    app->add_option("--data", data, "dataset directory");
    app->add_option("--out", out, "output directory");
    app->add_option("--epochs", epochs);
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--batch-size", batch_size);
    app->add_option("--K", k, "latent samples per image");
    app->add_option("--val-K", val_k);
    app->add_option("--val-max-cases", val_max_cases);
    app->add_option("--alpha", alpha);
    app->add_option("--beta", beta);
    app->add_option("--tau", tau);
    app->add_option("--kl-weight", kl_weight);
    app->add_option("--bound-weight", bound_weight);
    app->add_option("--base-width", base_width);
    app->add_option("--text-encoder", text_encoder, "fallback | external:<path>");
    app->add_option("--trainable", trainable, "stage2_mlp_only | stage2_full");
    app->add_option("--threads", threads);
    app->add_option("--seed", seed);
  }

  [[nodiscard]] train::TrainConfig resolve(int stage) const {
    train::TrainConfig c;
    if (!config.empty()) c = train::load_config(config);
    else if (auto env = train::seed_from_env()) c.seed = *env;
    c.stage = stage;
    if (data) c.data_dir = *data;
    if (out) c.out_dir = *out;
    if (stage1) c.stage1_checkpoint = *stage1;
    if (trainable) c.trainable = train::trainable_from_string(*trainable);
    if (text_encoder) c.text_encoder = *text_encoder;
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (k) c.k = *k;
    if (val_k) c.val_k = *val_k;
    if (val_max_cases) c.val_max_cases = *val_max_cases;
    if (threads) c.threads = *threads;
    if (base_width) c.base_width = *base_width;
    if (lr) c.learning_rate = *lr;
    if (alpha) c.alpha = *alpha;
    if (beta) c.beta = *beta;
    if (tau) c.tau = *tau;
    if (kl_weight) c.kl_weight = *kl_weight;
    if (bound_weight) c.bound_weight = *bound_weight;
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
};

void print_result(const train::TrainResult& r) {
  std::cout << "best:  " << r.best_dir.string() << " (epoch " << r.best_epoch << ", val GED " << r.best.val_ged << ", id "
            << r.best.checkpoint_id << ")\n"
            << "last:  " << r.last_dir.string() << " (id " << r.last.checkpoint_id << ")\n";
}

service::InferenceService* g_service = nullptr;

void on_signal(int) {
  if (g_service != nullptr) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  prosona::tune_allocator();
  CLI::App app{"prosona: prompt-guided multi-rater segmentation"};
  app.require_subcommand(1);

  // datagen
  auto* datagen = app.add_subcommand("datagen", "generate a synthetic multi-rater dataset");
  data::GenerationConfig gen;
  std::string gen_out;
  bool gen_force = false;
  int gen_size = 0;
  std::optional<std::uint64_t> gen_seed;
  datagen->add_option("--out", gen_out, "output directory")->required();
  datagen->add_option("--cases", gen.num_cases);
  datagen->add_option("--size", gen_size, "image height and width");
  datagen->add_option("--height", gen.height);
  datagen->add_option("--width", gen.width);
  datagen->add_option("--annotators", gen.annotators);
  datagen->add_option("--cases-per-family", gen.cases_per_family);
  datagen->add_option("--noise", gen.noise_std);
  datagen->add_option("--jitter", gen.boundary_jitter);
  datagen->add_option("--seed", gen_seed);
  datagen->add_flag("--force", gen_force, "overwrite a non-empty directory");

  TrainFlags s1, s2, ab;
  auto* t1 = app.add_subcommand("train-stage1", "train the probabilistic backbone");
  s1.add(t1);
  auto* t2 = app.add_subcommand("train-stage2", "train the prompt projection");
  s2.add(t2);
  t2->add_option("--stage1", s2.stage1, "stage-1 checkpoint directory");

  auto* ablate = app.add_subcommand("ablate", "alpha/beta grid over stage-2 runs");
  ab.add(ablate);
  ablate->add_option("--stage1", ab.stage1, "stage-1 checkpoint directory");
  std::string alphas = "0,0.5,1", betas = "0,0.5,1";
  ablate->add_option("--alphas", alphas);
  ablate->add_option("--betas", betas);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_out = "report.json", ev_source;
  metrics::EvalConfig ec;
  std::optional<std::uint64_t> ev_seed;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--split", ev_split);
  ev->add_option("--out", ev_out);
  ev->add_option("--seed", ev_seed);
  ev->add_option("--K", ec.k);
  ev->add_option("--threshold", ec.threshold);
  ev->add_option("--threads", ec.threads);
  ev->add_option("--source", ev_source, "prompts | prior (default: prompts for stage-2 checkpoints)");

  // interpolate
  auto* ip = app.add_subcommand("interpolate", "export an interpolation sweep between two prompts");
  std::string ip_ckpt, ip_data, ip_case, ip_a, ip_b, ip_out = "interpolation";
  int ip_steps = 5, ip_k = 10;
  std::optional<std::uint64_t> ip_seed;
  ip->add_option("--checkpoint", ip_ckpt)->required();
  ip->add_option("--data", ip_data)->required();
  ip->add_option("--case", ip_case)->required();
  ip->add_option("--prompt-a", ip_a)->required();
  ip->add_option("--prompt-b", ip_b)->required();
  ip->add_option("--steps", ip_steps);
  ip->add_option("--K", ip_k);
  ip->add_option("--seed", ip_seed);
  ip->add_option("--out", ip_out, "output prefix");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP inference service");
  std::string sv_ckpt, sv_data;
  service::ServiceOptions so;
  sv->add_option("--checkpoint", sv_ckpt)->required();
  sv->add_option("--data", sv_data);
  sv->add_option("--host", so.host);
  sv->add_option("--port", so.port);
  sv->add_option("--workers", so.workers);
  sv->add_option("--max-queue", so.max_queue);
  sv->add_option("--cors-origin", so.cors_origin);
  sv->add_option("--K", so.default_k, "default K when a request omits it");

  CLI11_PARSE(app, argc, argv);

  try {
    if (datagen->parsed()) {
      if (gen_size > 0) gen.height = gen.width = gen_size;
      gen.seed = resolve_seed(gen_seed);
      const auto m = data::generate_dataset(gen, gen_out, gen_force);
      std::cout << "wrote " << m.cases.size() << " cases to " << gen_out << "\n";
    } else if (t1->parsed()) {
      print_result(train::train_stage1(s1.resolve(1)));
    } else if (t2->parsed()) {
      print_result(train::train_stage2(s2.resolve(2)));
    } else if (ablate->parsed()) {
      train::AblationGrid grid;
      grid.alpha_values = parse_list(alphas);
      grid.beta_values = parse_list(betas);
      const auto res = train::run_ablation(grid, ab.resolve(2));
      for (const auto& c : res.cells) {
        std::cout << "alpha=" << c.alpha << " beta=" << c.beta << " ";
        if (c.ged) std::cout << "GED=" << *c.ged << (c.cached ? " (cached)" : "") << "\n";
        else std::cout << "FAILED: " << c.error << "\n";
      }
    } else if (ev->parsed()) {
      ckpt::Metadata meta;
      const auto m = ckpt::load(ev_ckpt, &meta);
      const auto encoder = prompt::make_text_encoder(m.arch().text_encoder);
      const auto manifest = data::load_manifest(ev_data);
      ec.split = data::split_from_string(ev_split);
      ec.seed = resolve_seed(ev_seed);
      metrics::SampleSource source = m.stage() >= 2 ? metrics::SampleSource::prompts : metrics::SampleSource::prior;
      if (ev_source == "prior") source = metrics::SampleSource::prior;
      else if (ev_source == "prompts") source = metrics::SampleSource::prompts;
      else if (!ev_source.empty()) throw ConfigError("--source must be prompts or prior");
      const metrics::ModelPredictor predictor(m, *encoder, source);
      const auto report = metrics::evaluate(predictor, manifest, data::catalog_from_manifest(manifest), ec);
      metrics::write_report(report, ev_out);
      std::cout << "GED " << report.ged << "  Dice Soft " << report.dice_soft << "  Dice Max " << report.dice_max;
      if (report.dice_match) std::cout << "  Dice Match " << *report.dice_match << "  Mean Dice " << *report.mean_dice;
      std::cout << "\nreport: " << ev_out << "\n";
    } else if (ip->parsed()) {
      const auto m = ckpt::load(ip_ckpt);
      const auto encoder = prompt::make_text_encoder(m.arch().text_encoder);
      const auto manifest = data::load_manifest(ip_data);
      const auto c = data::load_case(manifest, ip_case);
      const auto res = train::export_interpolation(m, *encoder, c, ip_a, ip_b, ip_steps, ip_k, resolve_seed(ip_seed), ip_out);
      for (std::size_t i = 0; i < res.t.size(); ++i) std::cout << "t=" << res.t[i] << " area=" << res.area[i] << "\n";
      std::cout << "wrote " << ip_out << "_strip.png and " << ip_out << "_area.csv\n";
    } else if (sv->parsed()) {
      service::InferenceService svc(so);
      if (!sv_data.empty()) svc.set_dataset(data::load_manifest(sv_data));
      const int port = svc.bind();
      if (port < 0) throw IoError("cannot bind " + so.host + ":" + std::to_string(so.port));
      g_service = &svc;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::thread server([&] { svc.listen_after_bind(); });
      std::cout << "listening on " << so.host << ":" << port << " (loading " << sv_ckpt << ")\n" << std::flush;
      try {
        ckpt::Metadata meta;
        auto m = ckpt::load(sv_ckpt, &meta);
        auto encoder = prompt::make_text_encoder(m.arch().text_encoder);
        svc.set_model({std::move(m), std::move(encoder), meta.checkpoint_id});
        std::cout << "ready: checkpoint " << meta.checkpoint_id << "\n" << std::flush;
      } catch (...) {
        svc.stop();
        server.join();
        throw;
      }
      server.join();
      g_service = nullptr;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
