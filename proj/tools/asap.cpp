// Command-line front end: generate / train / solve / benchmark / plot.
// Exit codes: 0 success, 1 usage, 2 I/O or file-format failure, 3 numeric
// failure during training.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "asap/baselines.hpp"
#include "asap/env.hpp"
#include "asap/errors.hpp"
#include "asap/instance.hpp"
#include "asap/io.hpp"
#include "asap/svg.hpp"
#include "asap/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace asap;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct GenArgs {
  int nodes = 50;
  uint64_t seed = 1234;
  int count = 1;
  std::string out_dir;
  GenerationConfig gen;
};

int cmd_generate(const GenArgs& a) {
  fs::create_directories(a.out_dir);
  std::cout << "file,nodes,seed,total_demand,fleet\n";
  for (int i = 0; i < a.count; ++i) {
    const uint64_t seed = a.seed + static_cast<uint64_t>(i);
    const Instance inst = generate_instance(a.nodes, seed, a.gen);
    const fs::path path =
        fs::path(a.out_dir) / ("N" + std::to_string(a.nodes) + "_s" + std::to_string(seed) + ".json");
    save_instance(inst, path);
    std::cout << path.string() << "," << inst.num_nodes() << "," << seed << ","
              << inst.total_demand() << "," << inst.fleet_size << "\n";
  }
  return 0;
}

struct SolveArgs {
  std::string instance_path;
  std::string checkpoint_path;
  std::string mode = "greedy";
  std::string out;
  std::string trace;
  uint64_t rng_seed = 0;
  double penalty = -1.0;  // <0: take the checkpoint's training penalty
};

int cmd_solve(const SolveArgs& a) {
  const Instance inst = load_instance(a.instance_path);
  const Checkpoint ck = load_checkpoint(a.checkpoint_path);
  const double penalty = a.penalty >= 0.0 ? a.penalty : ck.train.penalty;
  const ActMode mode = a.mode == "sample" ? ActMode::Sample : ActMode::Greedy;

  Rng rng(a.rng_seed);
  RolloutOptions options;
  options.penalty = penalty;
  options.record_trace = !a.trace.empty();
  const EpisodeRecord rec = rollout_episode(inst, ck.policy, mode, rng, options);

  const std::string producer = mode == ActMode::Greedy ? "policy-greedy" : "policy-sample";
  int best = 0;
  Solution best_sol;
  for (int k = 0; k < rec.traj; ++k) {
    Solution s = solution_from_visits(rec.final_state.visit_order[k], inst, penalty, producer);
    if (k == 0 || s.objective < best_sol.objective) {
      best_sol = std::move(s);
      best = k;
    }
  }
  save_solution(best_sol, a.out);
  std::cout << "solution: objective " << best_sol.objective << ", distance "
            << best_sol.total_distance << ", served " << best_sol.served_demand << ", tours "
            << best_sol.tours.size() << " -> " << a.out << "\n";

  if (!a.trace.empty()) {
    const int n = inst.num_nodes();
    json steps = json::array();
    for (size_t t = 0; t < rec.logits_trace.size(); ++t) {
      json row = json::array();
      for (int j = 0; j < n; ++j) row.push_back(rec.logits_trace[t][best * n + j]);
      steps.push_back({{"logits", std::move(row)},
                       {"chosen", rec.actions[t][best]},
                       {"forced", t == 0}});
      if (rec.dones[t][best]) break;  // trajectory finished; later rows are padding
    }
    json doc = {{"nodes", n},
                {"mode", a.mode},
                {"instance", a.instance_path},
                {"steps", std::move(steps)}};
    atomic_write_text(a.trace, doc.dump(2) + "\n");
    std::cout << "trace: " << rec.logits_trace.size() << " steps -> " << a.trace << "\n";
  }
  return 0;
}

struct BenchArgs {
  std::string instances_dir;
  std::string checkpoint;
  std::string solvers = "greedy,oracle";
  double penalty = 10.0;
  std::string out = "results.csv";
  uint64_t rng_seed = 0;
  int threads = 2;
};

struct BenchRow {
  std::string instance_id;
  int nodes = 0;
  std::string seed;
  std::string solver;
  bool skipped = false;
  double distance = 0, served = 0, objective = 0, wallclock = 0;
  int vehicles = 0;
};

int cmd_benchmark(const BenchArgs& a) {
  std::vector<std::string> solvers;
  {
    std::stringstream ss(a.solvers);
    std::string part;
    while (std::getline(ss, part, ',')) solvers.push_back(part);
  }
  if (solvers.empty()) throw ConfigError("no solvers selected");

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.instances_dir)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no instance files in " + a.instances_dir);

  std::optional<Checkpoint> ck;
  for (const auto& s : solvers) {
    if (s == "policy") {
      if (a.checkpoint.empty()) throw ConfigError("--checkpoint required for the policy solver");
      ck = load_checkpoint(a.checkpoint);
    } else if (s != "greedy" && s != "oracle") {
      throw ConfigError("unknown solver '" + s + "' (expected policy, greedy, oracle)");
    }
  }

  std::vector<std::vector<BenchRow>> rows(files.size());
  auto run_instance = [&](size_t fi) {
    const Instance inst = load_instance(files[fi]);
    for (const auto& solver : solvers) {
      BenchRow row;
      row.instance_id = files[fi].stem().string();
      row.nodes = inst.num_nodes();
      row.seed = inst.seed ? std::to_string(*inst.seed) : "";
      row.solver = solver;
      if (solver == "oracle" && inst.num_customers() > 9) {
        row.skipped = true;
        rows[fi].push_back(row);
        continue;
      }
      const auto t0 = std::chrono::steady_clock::now();
      Solution sol;
      if (solver == "greedy") {
        sol = greedy_heuristic(inst, a.penalty);
      } else if (solver == "oracle") {
        sol = brute_force_oracle(inst, a.penalty);
      } else {
        sol = solve_with_policy(inst, ck->policy, ActMode::Greedy, a.penalty, a.rng_seed);
      }
      row.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      row.distance = sol.total_distance;
      row.served = sol.served_demand;
      row.objective = sol.objective;
      row.vehicles = sol.vehicles_used();
      rows[fi].push_back(row);
    }
  };

  const int workers = std::max(1, std::min<int>(a.threads, static_cast<int>(files.size())));
  if (workers <= 1) {
    for (size_t fi = 0; fi < files.size(); ++fi) run_instance(fi);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w]() {
        for (size_t fi = w; fi < files.size(); fi += workers) run_instance(fi);
      });
    for (auto& th : pool) th.join();
  }

  std::ostringstream csv;
  csv << "instance_id,nodes,seed,solver,distance,served_demand,vehicles_used,objective,"
         "wallclock_s,rel_dev\n";
  for (size_t fi = 0; fi < files.size(); ++fi) {
    const BenchRow* baseline = nullptr;
    for (const auto& row : rows[fi])
      if (row.solver == solvers[0] && !row.skipped) baseline = &row;
    for (const auto& row : rows[fi]) {
      csv << row.instance_id << "," << row.nodes << "," << row.seed << "," << row.solver << ",";
      if (row.skipped) {
        std::cerr << "warning: oracle skipped for " << row.instance_id << " ("
                  << row.nodes - 1 << " customers > 9)\n";
        csv << ",,,,0,\n";
        continue;
      }
      csv << row.distance << "," << row.served << "," << row.vehicles << "," << row.objective
          << "," << row.wallclock << ",";
      // Positive deviation = this solver beats the first listed one.
      if (baseline && &row != baseline && row.objective > 0)
        csv << (baseline->objective - row.objective) / row.objective;
      else if (baseline && &row == baseline)
        csv << 0;
      csv << "\n";
    }
  }
  atomic_write_text(a.out, csv.str());
  std::cout << "benchmark: " << files.size() << " instances x " << solvers.size()
            << " solvers -> " << a.out << "\n";
  return 0;
}

struct PlotArgs {
  std::string solution;
  std::string instance;
  std::string trace;
  std::string out;
};

int cmd_plot(const PlotArgs& a) {
  if (!a.trace.empty()) {
    json doc;
    try {
      doc = json::parse(read_file(a.trace));
    } catch (const json::parse_error& e) {
      throw ParseError(a.trace + ": " + e.what());
    }
    std::vector<std::vector<double>> logits;
    std::vector<int> chosen;
    for (const auto& step : doc.at("steps")) {
      std::vector<double> row;
      for (const auto& v : step.at("logits"))
        row.push_back(v.is_null() ? kNegInf : v.get<double>());
      logits.push_back(std::move(row));
      chosen.push_back(step.at("chosen").get<int>());
    }
    atomic_write_text(a.out, render_heatmap_svg(logits, chosen));
  } else {
    if (a.solution.empty() || a.instance.empty())
      throw ConfigError("plot needs either --trace or both --solution and --instance");
    const Solution sol = load_solution(a.solution);
    const Instance inst = load_instance(a.instance);
    atomic_write_text(a.out, render_route_svg(inst, sol));
  }
  std::cout << "plot -> " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  TrainConfig cfg;
  PolicyConfig policy;
  std::string out_dir;
};

int cmd_train(const TrainArgs& a) {
  const TrainResult result = train(a.cfg, a.policy, a.out_dir);
  std::cout << "training complete: " << result.updates_completed << " updates\n"
            << "checkpoint: " << result.checkpoint_path.string() << "\n"
            << "metrics:    " << result.metrics_path.string() << "\n"
            << "eval objective " << result.untrained_eval_objective << " -> "
            << result.final_eval_objective << "\n";
  return 0;
}

void add_gen_flags(CLI::App* cmd, GenerationConfig& gen) {
  cmd->add_option("--fleet", gen.fleet_size, "vehicles per instance")->capture_default_str();
  cmd->add_option("--capacity", gen.capacity_raw, "raw vehicle capacity")->capture_default_str();
  cmd->add_option("--max-demand", gen.max_raw_demand, "max raw customer demand")
      ->capture_default_str();
  cmd->add_option("--tmin", gen.end_time_min, "min customer end-time, seconds")
      ->capture_default_str();
  cmd->add_option("--tmax", gen.end_time_max, "max customer end-time, seconds")
      ->capture_default_str();
  cmd->add_option("--speed", gen.speed, "vehicle speed, distance units per second")
      ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural and classical solvers for the time-constrained CVRP with a finite fleet"};
  app.require_subcommand(1);

  GenArgs gen_args;
  auto* gen = app.add_subcommand("generate", "Generate random problem instances");
  gen->add_option("--nodes", gen_args.nodes, "customers per instance")->capture_default_str();
  gen->add_option("--seed", gen_args.seed, "base seed; instance i uses seed+i")
      ->capture_default_str();
  gen->add_option("--count", gen_args.count, "number of instances")->capture_default_str();
  gen->add_option("--out-dir", gen_args.out_dir, "output directory")->required();
  add_gen_flags(gen, gen_args.gen);

  TrainArgs train_args;
  train_args.cfg.threads = std::max(1u, std::thread::hardware_concurrency());
  train_args.policy.embed_dim = 64;
  train_args.policy.ff_dim = 0;  // resolved to 4*dim below
  auto* tr = app.add_subcommand("train", "Train the routing policy with PPO");
  tr->add_option("--nodes", train_args.cfg.nodes, "customers per training instance")
      ->capture_default_str();
  tr->add_option("--envs", train_args.cfg.num_envs, "parallel environments")
      ->capture_default_str();
  tr->add_option("--updates", train_args.cfg.global_updates, "global update steps")
      ->capture_default_str();
  tr->add_option("--steps", train_args.cfg.steps_per_rollout, "env steps per rollout")
      ->capture_default_str();
  int traj_flag = -1;
  tr->add_option("--traj", traj_flag, "POMO trajectories (default: customers)");
  tr->add_option("--dim", train_args.policy.embed_dim, "embedding dimension")
      ->capture_default_str();
  tr->add_option("--heads", train_args.policy.heads, "attention heads")->capture_default_str();
  tr->add_option("--layers", train_args.policy.encoder_layers, "encoder layers")
      ->capture_default_str();
  int ff_flag = 0;
  tr->add_option("--ff", ff_flag, "feed-forward width (default 4*dim)");
  tr->add_option("--clip-c", train_args.policy.clip_c, "pointer logit clipping factor")
      ->capture_default_str();
  tr->add_flag("--no-residual", "disable encoder skip connections");
  tr->add_option("--lr", train_args.cfg.learning_rate, "learning rate")->capture_default_str();
  tr->add_option("--gamma", train_args.cfg.gamma, "discount")->capture_default_str();
  tr->add_option("--gae-lambda", train_args.cfg.gae_lambda, "GAE decay")->capture_default_str();
  tr->add_option("--clip", train_args.cfg.clip_coef, "PPO clip coefficient")
      ->capture_default_str();
  tr->add_option("--ent-coef", train_args.cfg.ent_coef, "entropy bonus coefficient")
      ->capture_default_str();
  tr->add_option("--vf-coef", train_args.cfg.vf_coef, "value loss coefficient")
      ->capture_default_str();
  tr->add_option("--minibatches", train_args.cfg.minibatches, "minibatches per epoch")
      ->capture_default_str();
  tr->add_option("--epochs", train_args.cfg.update_epochs, "update epochs per rollout")
      ->capture_default_str();
  tr->add_option("--penalty", train_args.cfg.penalty, "depot-return load penalty P")
      ->capture_default_str();
  tr->add_option("--seed", train_args.cfg.seed, "master seed")->capture_default_str();
  tr->add_option("--eval-every", train_args.cfg.eval_every, "updates between evaluations")
      ->capture_default_str();
  tr->add_option("--eval-instances", train_args.cfg.eval_instances, "held-out instances")
      ->capture_default_str();
  tr->add_option("--threads", train_args.cfg.threads,
                 "worker threads (1 = bitwise-reproducible reference mode)")
      ->capture_default_str();
  tr->add_option("--value-target", "critic regression target: returns|old_values")
      ->check(CLI::IsMember({"returns", "old_values"}));
  tr->add_option("--ratio-mode", "probability ratio direction: standard|literal")
      ->check(CLI::IsMember({"standard", "literal"}));
  tr->add_flag("--no-adv-norm", "disable per-minibatch advantage normalization");
  tr->add_option("--out-dir", train_args.out_dir, "output directory")->required();
  add_gen_flags(tr, train_args.cfg.gen);

  SolveArgs solve_args;
  auto* so = app.add_subcommand("solve", "Solve one instance with a trained policy");
  so->add_option("--instance", solve_args.instance_path, "instance file")->required();
  so->add_option("--checkpoint", solve_args.checkpoint_path, "trained checkpoint")->required();
  so->add_option("--mode", solve_args.mode, "greedy|sample")
      ->check(CLI::IsMember({"greedy", "sample"}))
      ->capture_default_str();
  so->add_option("--out", solve_args.out, "solution output file")->required();
  so->add_option("--trace", solve_args.trace, "also write a per-step logit trace");
  so->add_option("--rng-seed", solve_args.rng_seed, "sampling seed (sample mode)")
      ->capture_default_str();
  so->add_option("--penalty", solve_args.penalty,
                 "objective penalty P (default: from checkpoint)");

  BenchArgs bench_args;
  auto* be = app.add_subcommand("benchmark", "Run solvers over an instance directory");
  be->add_option("--instances-dir", bench_args.instances_dir, "directory of instance files")
      ->required();
  be->add_option("--checkpoint", bench_args.checkpoint, "checkpoint for the policy solver");
  be->add_option("--solvers", bench_args.solvers,
                 "comma list from policy,greedy,oracle; first is the deviation baseline")
      ->capture_default_str();
  be->add_option("--penalty", bench_args.penalty, "objective penalty P")->capture_default_str();
  be->add_option("--out", bench_args.out, "output CSV")->capture_default_str();
  be->add_option("--rng-seed", bench_args.rng_seed, "sampling seed")->capture_default_str();
  be->add_option("--threads", bench_args.threads, "parallel workers")->capture_default_str();

  PlotArgs plot_args;
  auto* pl = app.add_subcommand("plot", "Render a route map or logit heatmap as SVG");
  pl->add_option("--solution", plot_args.solution, "solution file (route mode)");
  pl->add_option("--instance", plot_args.instance, "instance file (route mode)");
  pl->add_option("--trace", plot_args.trace, "trace file (heatmap mode)");
  pl->add_option("--out", plot_args.out, "output SVG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_generate(gen_args);
    if (*tr) {
      train_args.policy.ff_dim =
          ff_flag > 0 ? ff_flag : 4 * train_args.policy.embed_dim;
      train_args.policy.residual = tr->count("--no-residual") == 0;
      train_args.cfg.adv_norm = tr->count("--no-adv-norm") == 0;
      if (tr->count("--value-target"))
        train_args.cfg.value_target = tr->get_option("--value-target")->as<std::string>() ==
                                              "old_values"
                                          ? TrainConfig::ValueTarget::OldValues
                                          : TrainConfig::ValueTarget::Returns;
      if (tr->count("--ratio-mode"))
        train_args.cfg.ratio_mode =
            tr->get_option("--ratio-mode")->as<std::string>() == "literal"
                ? TrainConfig::RatioMode::OldMinusNew
                : TrainConfig::RatioMode::NewMinusOld;
      train_args.cfg.num_traj = traj_flag > 0 ? traj_flag : train_args.cfg.nodes;
      return cmd_train(train_args);
    }
    if (*so) return cmd_solve(solve_args);
    if (*be) return cmd_benchmark(bench_args);
    if (*pl) return cmd_plot(plot_args);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const IncompatibleError& e) {
    std::cerr << "incompatible input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
