#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "asap/instance.hpp"

namespace asap {

// Urgency of serving a node: anticipated travel time over remaining
// deadline slack. Outside [0, 1] the service cannot happen in time.
struct Urgency {
  double value = 0.0;
  bool missed = false;
};

// Slack left before a node's deadline expires must stay above this many
// seconds for the node to count as reachable; below it the ratio is
// reported as the +inf sentinel instead of a raw division.
inline constexpr double kMinDeadlineSlack = 1e-9;

Urgency urgency_of(double dist, double end_time, double fleet_distance, double speed);

// Dynamic state of one instance rolled out over `num_traj` parallel
// trajectories. All per-trajectory arrays share indexing; mask is
// row-major [traj][node] with 1 = not selectable.
struct EnvState {
  std::shared_ptr<const Instance> instance;
  double penalty = 10.0;
  int num_traj = 0;

  std::vector<int> step;
  std::vector<int> current_node;
  std::vector<double> load;
  std::vector<int> vehicles_remaining;
  std::vector<double> fleet_distance;
  std::vector<uint8_t> mask;  // [traj * N + node]
  std::vector<uint8_t> done;
  std::vector<std::vector<int>> visit_order;

  int nodes() const { return instance->num_nodes(); }
  bool mask_at(int traj, int node) const { return mask[traj * nodes() + node] != 0; }
  bool all_done() const;
  bool all_customers_masked(int traj) const;
};

struct StepOutcome {
  std::vector<double> reward;
  std::vector<uint8_t> done;
  std::vector<uint8_t> returned_to_depot;
  std::vector<double> load_at_return;
};

EnvState reset(std::shared_ptr<const Instance> instance, int num_traj,
               double penalty = 10.0);

// Applies one action per trajectory. Done trajectories ignore their action
// and stay frozen with zero reward. An infeasible action on a live
// trajectory throws ContractError.
StepOutcome step(EnvState& state, const std::vector<int>& actions);

// Ratio of travel time to remaining deadline for every (trajectory, node),
// from the trajectory's current position under the shared fleet clock.
// Already-masked nodes report their ratio with the missed flag forced on.
struct UrgencyField {
  std::vector<double> value;    // [traj * N + node]
  std::vector<uint8_t> missed;  // [traj * N + node]
};
UrgencyField compute_urgency(const EnvState& state);

// 1 = selectable now. Complement of the mask minus missed nodes; the depot
// stays closed for the first three decisions unless no customer is
// selectable, in which case it is the only feasible action.
std::vector<uint8_t> feasible_actions(const EnvState& state);

// Distinct forced first action per trajectory: trajectory k starts at
// customer k+1. Requires step 0 and num_traj equal to the customer count.
std::vector<int> force_pomo_starts(const EnvState& state);

}  // namespace asap
