#include "asap/env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "asap/errors.hpp"

namespace asap {

Urgency urgency_of(double dist, double end_time, double fleet_distance, double speed) {
  const double slack = end_time - fleet_distance / speed;
  if (slack <= kMinDeadlineSlack) {
    return {std::numeric_limits<double>::infinity(), true};
  }
  const double value = (dist / speed) / slack;
  return {value, value > 1.0 || value < 0.0};
}

bool EnvState::all_done() const {
  return std::all_of(done.begin(), done.end(), [](uint8_t d) { return d != 0; });
}

bool EnvState::all_customers_masked(int traj) const {
  const int n = nodes();
  for (int c = 1; c < n; ++c) {
    if (!mask[traj * n + c]) return false;
  }
  return true;
}

EnvState reset(std::shared_ptr<const Instance> instance, int num_traj, double penalty) {
  const int n = instance->num_nodes();
  if (num_traj < 1 || num_traj > n - 1) {
    throw ConfigError("num_traj must lie in [1, " + std::to_string(n - 1) + "], got " +
                      std::to_string(num_traj));
  }
  EnvState s;
  s.instance = std::move(instance);
  s.penalty = penalty;
  s.num_traj = num_traj;
  s.step.assign(num_traj, 0);
  s.current_node.assign(num_traj, 0);
  s.load.assign(num_traj, 1.0);
  s.vehicles_remaining.assign(num_traj, s.instance->fleet_size);
  s.fleet_distance.assign(num_traj, 0.0);
  s.mask.assign(static_cast<size_t>(num_traj) * n, 0);
  for (int t = 0; t < num_traj; ++t) s.mask[t * n + 0] = 1;  // depot closed at start
  s.done.assign(num_traj, 0);
  s.visit_order.assign(num_traj, {});
  return s;
}

namespace {

// A customer is selectable when unmasked and still reachable in time from
// the trajectory's current position.
bool customer_selectable(const EnvState& s, int traj, int c) {
  const int n = s.nodes();
  if (s.mask[traj * n + c]) return false;
  const auto& inst = *s.instance;
  const double d = inst.distance(s.current_node[traj], c);
  return !urgency_of(d, inst.end_times[c], s.fleet_distance[traj], inst.speed).missed;
}

bool any_customer_selectable(const EnvState& s, int traj) {
  for (int c = 1; c < s.nodes(); ++c) {
    if (customer_selectable(s, traj, c)) return true;
  }
  return false;
}

// The depot opens after the third decision; it also opens early as the
// forced fallback once no customer remains selectable.
bool depot_feasible(const EnvState& s, int traj) {
  if (s.vehicles_remaining[traj] <= 0) return false;
  if (s.step[traj] > 2) return true;
  return !any_customer_selectable(s, traj);
}

}  // namespace

StepOutcome step(EnvState& s, const std::vector<int>& actions) {
  const int n = s.nodes();
  if (static_cast<int>(actions.size()) != s.num_traj)
    throw ContractError("actions size " + std::to_string(actions.size()) +
                        " != num_traj " + std::to_string(s.num_traj));
  const auto& inst = *s.instance;

  StepOutcome out;
  out.reward.assign(s.num_traj, 0.0);
  out.done.assign(s.num_traj, 0);
  out.returned_to_depot.assign(s.num_traj, 0);
  out.load_at_return.assign(s.num_traj, 0.0);

  for (int t = 0; t < s.num_traj; ++t) {
    if (s.done[t]) {
      out.done[t] = 1;
      continue;
    }
    const int a = actions[t];
    if (a < 0 || a >= n)
      throw ContractError("action " + std::to_string(a) + " out of range, N=" +
                          std::to_string(n));
    if (a == 0) {
      if (!depot_feasible(s, t))
        throw ContractError("depot selected while masked (trajectory " +
                            std::to_string(t) + ", step " + std::to_string(s.step[t]) + ")");
    } else if (s.mask[t * n + a]) {
      throw ContractError("masked node " + std::to_string(a) +
                          " selected on live trajectory " + std::to_string(t));
    }

    const double leg = inst.distance(s.current_node[t], a);
    s.fleet_distance[t] += leg;
    double reward = -leg;

    if (a == 0) {
      out.returned_to_depot[t] = 1;
      out.load_at_return[t] = s.load[t];
      reward -= s.penalty * s.load[t];
      s.vehicles_remaining[t] -= 1;
      s.load[t] = 1.0;
    } else {
      s.load[t] -= inst.demand[a];
      s.mask[t * n + a] = 1;
    }
    s.current_node[t] = a;
    s.step[t] += 1;
    s.visit_order[t].push_back(a);

    // Fold load- and time-infeasibility into the mask; bits never clear.
    for (int c = 1; c < n; ++c) {
      if (s.mask[t * n + c]) continue;
      if (inst.demand[c] > s.load[t]) {
        s.mask[t * n + c] = 1;
        continue;
      }
      const double d = inst.distance(s.current_node[t], c);
      if (urgency_of(d, inst.end_times[c], s.fleet_distance[t], inst.speed).missed) {
        s.mask[t * n + c] = 1;
      }
    }

    if (s.vehicles_remaining[t] == 0 ||
        (s.current_node[t] == 0 && s.all_customers_masked(t))) {
      s.done[t] = 1;
    }
    out.reward[t] = reward;
    out.done[t] = s.done[t];
  }
  return out;
}

UrgencyField compute_urgency(const EnvState& s) {
  const int n = s.nodes();
  const auto& inst = *s.instance;
  UrgencyField f;
  f.value.assign(static_cast<size_t>(s.num_traj) * n, 0.0);
  f.missed.assign(static_cast<size_t>(s.num_traj) * n, 0);
  for (int t = 0; t < s.num_traj; ++t) {
    for (int node = 0; node < n; ++node) {
      const double d = inst.distance(s.current_node[t], node);
      const Urgency u = urgency_of(d, inst.end_times[node], s.fleet_distance[t], inst.speed);
      f.value[t * n + node] = u.value;
      f.missed[t * n + node] = (u.missed || s.mask[t * n + node]) ? 1 : 0;
    }
  }
  return f;
}

std::vector<uint8_t> feasible_actions(const EnvState& s) {
  const int n = s.nodes();
  std::vector<uint8_t> feasible(static_cast<size_t>(s.num_traj) * n, 0);
  for (int t = 0; t < s.num_traj; ++t) {
    if (s.done[t]) continue;
    for (int c = 1; c < n; ++c) {
      if (customer_selectable(s, t, c)) feasible[t * n + c] = 1;
    }
    if (depot_feasible(s, t)) feasible[t * n + 0] = 1;
  }
  return feasible;
}

std::vector<int> force_pomo_starts(const EnvState& s) {
  const int customers = s.nodes() - 1;
  if (s.num_traj != customers)
    throw ConfigError("POMO start requires num_traj == customer count (" +
                      std::to_string(s.num_traj) + " != " + std::to_string(customers) + ")");
  for (int t = 0; t < s.num_traj; ++t) {
    if (s.step[t] != 0)
      throw ConfigError("POMO start requires step 0, trajectory " + std::to_string(t) +
                        " is at step " + std::to_string(s.step[t]));
  }
  std::vector<int> actions(s.num_traj);
  for (int t = 0; t < s.num_traj; ++t) actions[t] = t + 1;
  return actions;
}

}  // namespace asap
