#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "fbsdeco/trainer.hpp"

namespace fbsdeco {

// One CLI invocation: a problem preset at one (n, T) cell, trained over a
// seed list, with an optional baseline.
struct ExperimentConfig {
  std::string problem = "paper-market-linear";
  std::size_t n = 10;
  double horizon = 0.25;
  Kappa kappa{19, 1};
  std::vector<Kappa> kappa_list;  // sweep subcommand
  std::uint64_t maxstep = 18000;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::size_t m_train = 64;
  std::size_t m_test = 512;
  std::size_t time_points = 25;
  double lr_leader = 5e-3;
  double lr_follower = 1e-3;
  std::string baseline = "none";  // none | classical | penalty
  double penalty_mu = 1000.0;
  std::string out_dir = "out";
  std::string precision = "f64";  // f64 | f32
  std::uint64_t eval_interval = 20;
  std::string dump_trajectories;  // optional debug CSV of final test paths
  bool save_nets = false;         // write nets_seed<k>.ckpt per run

  void check() const;
  Precision precision_mode() const;
  TrainingConfig training(std::uint64_t seed, const Kappa& k) const;
  std::string to_json() const;                    // canonical echo
  static ExperimentConfig from_json_file(const std::string& path);
  static ExperimentConfig from_json_text(const std::string& text);
};

struct ReportBundle {
  std::string out_dir;
  std::vector<std::string> history_files;
  std::string aggregate_file;  // run: aggregate.csv; sweep: sweep.csv
  std::string manifest_file;
  std::string content_hash;
};

// Trains every seed (plus baseline runs when requested), writes per-run
// history CSVs, the aggregate table and the manifest. Seeds run
// concurrently up to the worker cap.
ReportBundle run_experiment(const ExperimentConfig& config);

// kappa_sweep over config.kappa_list with per-run histories written out.
ReportBundle sweep_experiment(const ExperimentConfig& config);

struct VerifyItem {
  std::string name;
  enum class Status { kPass, kFail, kSkip } status;
  std::string detail;
};

// Fast property suite: op/objective gradient checks (skipped in f32),
// analytic follower oracle, schedule exactness, simplex invariants,
// determinism, checkpoint format checks.
std::vector<VerifyItem> verify_suite(Precision precision);
// Prints one line per property; returns 0 iff nothing failed.
int run_verify(std::ostream& out, Precision precision);

// Max error of the analytic gradient of one discrete objective against
// central finite differences (step 1e-6) over every network parameter of a
// small batchnorm-free instance; error metric |a-n| / max(|a|,|n|,1e-3).
double tiny_instance_grad_error(bool leader_objective,
                                Precision precision = Precision::f64);

// git-style content hash used in run manifests
std::string sha1_hex(std::string_view data);

}  // namespace fbsdeco
