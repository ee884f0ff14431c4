// Experiment runner for the cross-optimization FBSDE solver.
//
//   fbsde_co run    --problem paper-market-linear --n 10 --T 0.25 --kappa 19
//   fbsde_co sweep  --kappa-list 49,19,9,1,1/4,1/9 --n 10 --T 0.5
//   fbsde_co verify

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/experiment.hpp"

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw fbsdeco::ContractError("--seeds: cannot parse '" + item + "'");
    }
  }
  if (seeds.empty()) throw fbsdeco::ContractError("--seeds: list is empty");
  return seeds;
}

std::vector<fbsdeco::Kappa> parse_kappa_list(const std::string& text) {
  std::vector<fbsdeco::Kappa> list;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    list.push_back(fbsdeco::Kappa::parse(item));
  }
  if (list.empty()) throw fbsdeco::ContractError("--kappa-list: list is empty");
  return list;
}

void print_file(const std::string& path) {
  std::ifstream in(path);
  std::cout << in.rdbuf();
}

}  // namespace

int main(int argc, char** argv) {
  using fbsdeco::ExperimentConfig;

  // --config seeds the defaults; explicit flags override file values.
  ExperimentConfig cfg;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      try {
        cfg = ExperimentConfig::from_json_file(argv[i + 1]);
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
      }
    }
  }

  CLI::App app{"Deep cross-optimization solver for stochastic control "
               "problems driven by fully-coupled FBSDEs"};
  app.require_subcommand(1);

  std::string kappa_text = cfg.kappa.str();
  std::string kappa_list_text;
  std::string seeds_text;
  {
    std::ostringstream ss;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
      ss << (i ? "," : "") << cfg.seeds[i];
    seeds_text = ss.str();
    std::ostringstream kl;
    for (std::size_t i = 0; i < cfg.kappa_list.size(); ++i)
      kl << (i ? "," : "") << cfg.kappa_list[i].str();
    kappa_list_text = kl.str();
  }
  std::string config_path;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "JSON config file (flags override file values)");
    sub->add_option("--problem", cfg.problem, "problem preset name");
    sub->add_option("--n", cfg.n, "problem dimension (risky assets)");
    sub->add_option("--T", cfg.horizon, "time horizon");
    sub->add_option("--kappa", kappa_text,
                    "penalty updating coefficient (integer or p/q)");
    sub->add_option("--maxstep", cfg.maxstep, "total parameter updates");
    sub->add_option("--seeds", seeds_text, "comma-separated seed list");
    sub->add_option("--m-train", cfg.m_train, "training batch size");
    sub->add_option("--m-test", cfg.m_test, "test batch size");
    sub->add_option("--time-points", cfg.time_points, "Euler time points N");
    sub->add_option("--lr-leader", cfg.lr_leader, "leader learning rate");
    sub->add_option("--lr-follower", cfg.lr_follower, "follower learning rate");
    sub->add_option("--eval-interval", cfg.eval_interval,
                    "iterations between evaluations");
    sub->add_option("--out", cfg.out_dir, "output directory");
    sub->add_option("--precision", cfg.precision, "f64 or f32");
  };

  CLI::App* run = app.add_subcommand("run", "train the CO solver and report");
  add_common(run);
  run->add_option("--baseline", cfg.baseline,
                  "additional baseline: none, classical or penalty");
  run->add_option("--penalty-mu", cfg.penalty_mu, "penalty coefficient mu");
  run->add_option("--dump-traj", cfg.dump_trajectories,
                  "write evaluation trajectories to this CSV");
  run->add_flag("--save-nets", cfg.save_nets,
                "write trained network checkpoints per seed");

  CLI::App* sweep = app.add_subcommand("sweep", "kappa sweep experiment");
  add_common(sweep);
  sweep->add_option("--kappa-list", kappa_list_text,
                    "comma-separated kappa values (integers or p/q)");

  CLI::App* verify = app.add_subcommand("verify", "run the property suite");
  verify->add_option("--precision", cfg.precision, "f64 or f32");

  CLI11_PARSE(app, argc, argv);

  try {
    cfg.kappa = fbsdeco::Kappa::parse(kappa_text);
    cfg.seeds = parse_seeds(seeds_text);
    if (!kappa_list_text.empty())
      cfg.kappa_list = parse_kappa_list(kappa_list_text);
    cfg.check();

    if (verify->parsed()) {
      return fbsdeco::run_verify(std::cout, cfg.precision_mode());
    }
    if (run->parsed()) {
      fbsdeco::ReportBundle bundle = fbsdeco::run_experiment(cfg);
      std::cout << "wrote " << bundle.history_files.size()
                << " history files under " << bundle.out_dir << "\n"
                << "manifest: " << bundle.manifest_file << " (config hash "
                << bundle.content_hash << ")\n"
                << "aggregate (" << bundle.aggregate_file << "):\n";
      print_file(bundle.aggregate_file);
      return 0;
    }
    if (sweep->parsed()) {
      fbsdeco::ReportBundle bundle = fbsdeco::sweep_experiment(cfg);
      std::cout << "wrote " << bundle.history_files.size()
                << " history files under " << bundle.out_dir << "\n"
                << "manifest: " << bundle.manifest_file << " (config hash "
                << bundle.content_hash << ")\n"
                << "sweep table (" << bundle.aggregate_file << "):\n";
      print_file(bundle.aggregate_file);
      return 0;
    }
  } catch (const fbsdeco::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
