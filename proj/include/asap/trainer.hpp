#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "asap/instance.hpp"
#include "asap/policy.hpp"

namespace asap {

struct TrainConfig {
  int nodes = 10;  // customers per training instance
  int num_envs = 64;
  int steps_per_rollout = 100;  // T
  int global_updates = 300;     // U
  int minibatches = 8;
  int update_epochs = 4;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_coef = 0.2;
  double ent_coef = 0.01;
  double vf_coef = 0.5;
  double learning_rate = 2.5e-4;
  double penalty = 10.0;
  int num_traj = 10;
  int eval_every = 100;
  int eval_instances = 16;
  uint64_t seed = 1;
  bool adv_norm = true;

  enum class ValueTarget { Returns, OldValues };
  ValueTarget value_target = ValueTarget::Returns;
  enum class RatioMode { NewMinusOld, OldMinusNew };
  RatioMode ratio_mode = RatioMode::NewMinusOld;

  double grad_clip = 0.5;
  double bn_momentum = 0.1;
  int threads = 1;  // 1 = bitwise-reproducible reference mode
  GenerationConfig gen;

  void validate() const;
};

// Time-major record of one rollout across all environments. Row layout is
// [t * E * traj + e * traj + k]; per-row state snapshots let the update
// phase re-decode without touching the environment again.
struct RolloutBuffer {
  int T = 0, E = 0, traj = 0, nodes = 0;

  std::vector<int> actions;
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<double> entropies;
  std::vector<uint8_t> dones;
  std::vector<uint8_t> included;  // 0 for forced POMO steps and frozen padding
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<double> next_values;  // [E * traj]

  std::vector<int64_t> cur;         // [T*E*traj]
  std::vector<double> load;         // [T*E*traj]
  std::vector<double> veh;          // [T*E*traj]
  std::vector<uint8_t> infeasible;  // [T*E*traj*nodes]
  std::vector<double> urgency_add;  // [T*E*traj*nodes]

  // One contiguous episode of one environment.
  struct Segment {
    int env = 0;
    int t_begin = 0;
    int t_end = 0;  // exclusive
    std::shared_ptr<const Instance> instance;
  };
  std::vector<Segment> segments;

  size_t rows() const { return static_cast<size_t>(T) * E * traj; }
  size_t row(int t, int e, int k) const {
    return (static_cast<size_t>(t) * E + e) * traj + k;
  }
  bool finalized = false;
};

// Reverse-time generalized advantage estimation over independent series.
// Arrays are time-major [T * rows]; at done steps the advantage collapses
// to r - v with no bootstrapping.
void compute_gae(int T, int rows, const double* rewards, const double* values,
                 const uint8_t* dones, const double* next_values, double gamma, double lam,
                 double* advantages, double* returns);

// Convenience overload for a single series.
void compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                 const std::vector<uint8_t>& dones, double next_value, double gamma, double lam,
                 std::vector<double>& advantages, std::vector<double>& returns);

// Steps all environments for T steps with the current policy, auto-resetting
// finished episodes onto fresh seeded instances. Environment state persists
// across calls so episodes may span rollout boundaries.
class RolloutCollector {
 public:
  explicit RolloutCollector(const TrainConfig& config);
  ~RolloutCollector();
  RolloutCollector(RolloutCollector&&) noexcept;

  void collect(PolicyParams& policy, RolloutBuffer& out);

  struct Stats {
    double mean_return = 0.0;
    double mean_distance = 0.0;
    double mean_served = 0.0;
    double mean_vehicles = 0.0;
    long episodes = 0;  // completed (episode, trajectory) pairs
  };
  Stats last_stats() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct LossReport {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  int optimizer_steps = 0;
  // First minibatch of the first epoch, before any weight change.
  double first_mb_max_ratio_dev = 0.0;
  double first_mb_clip_fraction = 0.0;
};

// One global update: update_epochs passes over env-axis minibatches of the
// finalized buffer, each ending in one optimizer step.
LossReport ppo_update(const RolloutBuffer& buffer, PolicyParams& policy, AdamState& opt,
                      const TrainConfig& config, Rng& shuffle_rng,
                      const std::filesystem::path& diagnostics_dir = {});

struct TrainResult {
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;
  std::filesystem::path eval_path;
  double untrained_eval_objective = 0.0;
  double final_eval_objective = 0.0;
  int updates_completed = 0;
};

TrainResult train(const TrainConfig& config, const PolicyConfig& policy_config,
                  const std::filesystem::path& out_dir);

struct Checkpoint {
  PolicyParams policy;
  TrainConfig train;
  int update = 0;
};

void save_checkpoint(const PolicyParams& policy, const TrainConfig& config, int update,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws IncompatibleError naming both values on any architecture mismatch.
void check_compatible(const PolicyConfig& checkpoint, const PolicyConfig& runtime);

// Mean greedy best-of-POMO objective over the fixed held-out seed set.
struct EvalStats {
  double mean_objective = 0.0;
  double mean_distance = 0.0;
  double mean_served = 0.0;
};
EvalStats evaluate_policy(const PolicyParams& policy, const TrainConfig& config);

}  // namespace asap
