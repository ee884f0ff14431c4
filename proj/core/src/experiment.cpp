#include "fbsdeco/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/parallel.hpp"
#include "fbsdeco/rng.hpp"

namespace fbsdeco {

using nlohmann::json;
namespace fs = std::filesystem;

void ExperimentConfig::check() const {
  if (seeds.empty()) throw ContractError("config: seed list is empty");
  if (precision != "f64" && precision != "f32")
    throw ContractError("config: precision must be f64 or f32");
  if (baseline != "none" && baseline != "classical" && baseline != "penalty")
    throw ContractError("config: baseline must be none, classical or penalty");
  if (n < 1) throw ContractError("config: n must be >= 1");
  if (!(horizon > 0.0)) throw ContractError("config: T must be positive");
  if (!(penalty_mu > 0.0)) throw ContractError("config: penalty-mu must be positive");
}

Precision ExperimentConfig::precision_mode() const {
  return precision == "f32" ? Precision::f32 : Precision::f64;
}

TrainingConfig ExperimentConfig::training(std::uint64_t seed,
                                          const Kappa& k) const {
  TrainingConfig t;
  t.kappa = k;
  t.maxstep = maxstep;
  t.m_train = m_train;
  t.m_test = m_test;
  t.time_points = time_points;
  t.leader_opt.learning_rate = lr_leader;
  t.follower_opt.learning_rate = lr_follower;
  t.seed = seed;
  t.eval_interval = eval_interval;
  t.precision = precision_mode();
  return t;
}

namespace {

json config_json(const ExperimentConfig& c) {
  json j;
  j["problem"] = c.problem;
  j["n"] = c.n;
  j["T"] = c.horizon;
  j["kappa"] = c.kappa.str();
  json kl = json::array();
  for (const Kappa& k : c.kappa_list) kl.push_back(k.str());
  j["kappa_list"] = kl;
  j["maxstep"] = c.maxstep;
  j["seeds"] = c.seeds;
  j["m_train"] = c.m_train;
  j["m_test"] = c.m_test;
  j["time_points"] = c.time_points;
  j["lr_leader"] = c.lr_leader;
  j["lr_follower"] = c.lr_follower;
  j["baseline"] = c.baseline;
  j["penalty_mu"] = c.penalty_mu;
  j["out"] = c.out_dir;
  j["precision"] = c.precision;
  j["eval_interval"] = c.eval_interval;
  return j;
}

ExperimentConfig config_from(const json& j) {
  ExperimentConfig c;
  if (j.contains("problem")) c.problem = j["problem"].get<std::string>();
  if (j.contains("n")) c.n = j["n"].get<std::size_t>();
  if (j.contains("T")) c.horizon = j["T"].get<double>();
  if (j.contains("kappa")) c.kappa = Kappa::parse(j["kappa"].get<std::string>());
  if (j.contains("kappa_list")) {
    c.kappa_list.clear();
    for (const auto& k : j["kappa_list"])
      c.kappa_list.push_back(Kappa::parse(k.get<std::string>()));
  }
  if (j.contains("maxstep")) c.maxstep = j["maxstep"].get<std::uint64_t>();
  if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  if (j.contains("m_train")) c.m_train = j["m_train"].get<std::size_t>();
  if (j.contains("m_test")) c.m_test = j["m_test"].get<std::size_t>();
  if (j.contains("time_points")) c.time_points = j["time_points"].get<std::size_t>();
  if (j.contains("lr_leader")) c.lr_leader = j["lr_leader"].get<double>();
  if (j.contains("lr_follower")) c.lr_follower = j["lr_follower"].get<double>();
  if (j.contains("baseline")) c.baseline = j["baseline"].get<std::string>();
  if (j.contains("penalty_mu")) c.penalty_mu = j["penalty_mu"].get<double>();
  if (j.contains("out")) c.out_dir = j["out"].get<std::string>();
  if (j.contains("precision")) c.precision = j["precision"].get<std::string>();
  if (j.contains("eval_interval"))
    c.eval_interval = j["eval_interval"].get<std::uint64_t>();
  return c;
}

}  // namespace

std::string ExperimentConfig::to_json() const {
  return config_json(*this).dump(2);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: invalid JSON: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

// ---------------------------------------------------------------------------
// SHA-1 (manifest content hash)

std::string sha1_hex(std::string_view data) {
  std::uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u,
                        0xC3D2E1F0u};
  const std::uint64_t total_bits = static_cast<std::uint64_t>(data.size()) * 8;
  std::string msg(data);
  msg.push_back('\x80');
  while (msg.size() % 64 != 56) msg.push_back('\0');
  for (int i = 7; i >= 0; --i)
    msg.push_back(static_cast<char>((total_bits >> (8 * i)) & 0xff));

  auto rol = [](std::uint32_t x, int s) { return (x << s) | (x >> (32 - s)); };
  for (std::size_t off = 0; off < msg.size(); off += 64) {
    std::uint32_t w[80];
    for (int i = 0; i < 16; ++i) {
      w[i] = (static_cast<std::uint8_t>(msg[off + 4 * i]) << 24) |
             (static_cast<std::uint8_t>(msg[off + 4 * i + 1]) << 16) |
             (static_cast<std::uint8_t>(msg[off + 4 * i + 2]) << 8) |
             static_cast<std::uint8_t>(msg[off + 4 * i + 3]);
    }
    for (int i = 16; i < 80; ++i)
      w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, k;
      if (i < 20) {
        f = (b & c) | ((~b) & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const std::uint32_t tmp = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = tmp;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
  }
  char out[41];
  std::snprintf(out, sizeof(out), "%08x%08x%08x%08x%08x", h[0], h[1], h[2],
                h[3], h[4]);
  return std::string(out);
}

// ---------------------------------------------------------------------------

namespace {

struct AggRow {
  std::string metric;
  double mean = 0.0, var = 0.0;
  std::size_t runs = 0;
};

AggRow aggregate(const std::string& metric, const std::vector<double>& xs) {
  AggRow row;
  row.metric = metric;
  row.runs = xs.size();
  double s = 0.0;
  for (double x : xs) s += x;
  row.mean = s / static_cast<double>(xs.size());
  if (xs.size() >= 2) {
    double sq = 0.0;
    for (double x : xs) {
      const double d = x - row.mean;
      sq += d * d;
    }
    row.var = sq / static_cast<double>(xs.size() - 1);
  }
  return row;
}

void write_aggregate_csv(const std::string& path, std::size_t n, double T,
                         const std::vector<AggRow>& rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path);
  out << "n,T,metric,mean,var,runs\n";
  char buf[200];
  for (const AggRow& r : rows) {
    if (r.runs >= 2) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%s,%.17g,%.17g,%zu\n", n, T,
                    r.metric.c_str(), r.mean, r.var, r.runs);
    } else {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%s,%.17g,,%zu\n", n, T,
                    r.metric.c_str(), r.mean, r.runs);
    }
    out << buf;
  }
}

void write_manifest(ReportBundle& bundle, const ExperimentConfig& config,
                    const std::string& command) {
  json m;
  m["command"] = command;
  m["config"] = json::parse(config.to_json());
  m["history_files"] = bundle.history_files;
  m["aggregate_file"] = bundle.aggregate_file;
  bundle.content_hash = sha1_hex(config.to_json());
  m["content_hash"] = bundle.content_hash;
  bundle.manifest_file = (fs::path(bundle.out_dir) / "manifest.json").string();
  std::ofstream out(bundle.manifest_file);
  if (!out) throw FormatError("cannot open " + bundle.manifest_file);
  out << m.dump(2) << "\n";
}

}  // namespace

ReportBundle run_experiment(const ExperimentConfig& config) {
  config.check();
  FBSDEControlProblem problem =
      make_problem(config.problem, config.n, config.horizon);

  ReportBundle bundle;
  bundle.out_dir = config.out_dir;
  fs::create_directories(config.out_dir);

  struct Job {
    std::uint64_t seed;
    enum class Kind { kCo, kClassical, kPenalty } kind;
  };
  std::vector<Job> jobs;
  for (std::uint64_t s : config.seeds) jobs.push_back({s, Job::Kind::kCo});
  if (config.baseline == "classical")
    for (std::uint64_t s : config.seeds)
      jobs.push_back({s, Job::Kind::kClassical});
  if (config.baseline == "penalty")
    for (std::uint64_t s : config.seeds)
      jobs.push_back({s, Job::Kind::kPenalty});

  std::vector<TrainResult> results(jobs.size());
  parallel_for_index(jobs.size(), [&](std::size_t i) {
    const Job& job = jobs[i];
    TrainingConfig t = config.training(job.seed, config.kappa);
    try {
      switch (job.kind) {
        case Job::Kind::kCo:
          results[i] = co_train(problem, t);
          break;
        case Job::Kind::kClassical: {
          MarketParams params = MarketParams::paper(config.n, config.horizon);
          results[i] = classical_train(params, t);
          break;
        }
        case Job::Kind::kPenalty:
          results[i] = penalty_train(problem, t, config.penalty_mu);
          break;
      }
    } catch (const DivergenceError& e) {
      throw DivergenceError("seed " + std::to_string(job.seed) + ": " +
                            e.what());
    }
  });

  std::vector<double> inte, para, dist, base_y0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Job& job = jobs[i];
    const char* tag = job.kind == Job::Kind::kCo          ? "history"
                      : job.kind == Job::Kind::kClassical ? "classical"
                                                          : "penalty";
    const std::string file =
        (fs::path(config.out_dir) /
         (std::string(tag) + "_seed" + std::to_string(job.seed) + ".csv"))
            .string();
    write_history_csv(results[i].history, file);
    bundle.history_files.push_back(file);
    if (config.save_nets && job.kind == Job::Kind::kCo) {
      save_bundle(results[i].nets,
                  (fs::path(config.out_dir) /
                   ("nets_seed" + std::to_string(job.seed) + ".ckpt"))
                      .string());
    }
    const TrainingRecord& last = results[i].history.back();
    if (job.kind == Job::Kind::kCo) {
      inte.push_back(last.inte_y0);
      para.push_back(last.para_y0);
      dist.push_back(last.distance);
    } else {
      base_y0.push_back(last.inte_y0);
    }
  }

  std::vector<AggRow> rows;
  rows.push_back(aggregate("inte_y0", inte));
  if (problem.backward_dim > 0) {
    rows.push_back(aggregate("para_y0", para));
    rows.push_back(aggregate("distance", dist));
  }
  if (!base_y0.empty())
    rows.push_back(aggregate(
        config.baseline == "classical" ? "clas_y0" : "penalty_y0", base_y0));
  bundle.aggregate_file = (fs::path(config.out_dir) / "aggregate.csv").string();
  write_aggregate_csv(bundle.aggregate_file, config.n, config.horizon, rows);

  if (!config.dump_trajectories.empty()) {
    NetworkBundle& nets = results[0].nets;
    TimeGrid grid(problem.horizon, config.time_points);
    const BrownianBatch test =
        sample_brownian(std::min<std::size_t>(config.m_test, 32), grid,
                        problem.noise_dim, config.seeds[0], stream_tag::kTest);
    Tape tape(config.precision_mode());
    SimResult sim = simulate(problem, nets, Y0Source::net(), test, grid,
                             SimMode::kEval, tape);
    write_trajectory_csv(sim.traj, problem, config.dump_trajectories);
  }

  write_manifest(bundle, config, "run");
  return bundle;
}

ReportBundle sweep_experiment(const ExperimentConfig& config) {
  config.check();
  if (config.kappa_list.empty())
    throw ContractError("sweep: kappa list is empty");
  FBSDEControlProblem problem =
      make_problem(config.problem, config.n, config.horizon);

  ReportBundle bundle;
  bundle.out_dir = config.out_dir;
  fs::create_directories(config.out_dir);

  TrainingConfig base = config.training(config.seeds[0], config.kappa);
  std::vector<std::vector<TrainingRecord>> histories;
  SweepResult sweep = kappa_sweep(problem, base, config.kappa_list,
                                  config.seeds.size(), &histories);

  const std::size_t runs = config.seeds.size();
  for (std::size_t r = 0; r < sweep.rows.size(); ++r) {
    for (std::size_t k = 0; k < runs; ++k) {
      std::string tag = sweep.rows[r].kappa.str();
      std::replace(tag.begin(), tag.end(), '/', '_');
      const std::string file =
          (fs::path(config.out_dir) /
           ("history_kappa" + tag + "_run" + std::to_string(k) + ".csv"))
              .string();
      write_history_csv(histories[r * runs + k], file);
      bundle.history_files.push_back(file);
    }
  }

  bundle.aggregate_file = (fs::path(config.out_dir) / "sweep.csv").string();
  write_sweep_csv(sweep, bundle.aggregate_file);
  write_manifest(bundle, config, "sweep");
  return bundle;
}

}  // namespace fbsdeco
