#include <cmath>
#include <memory>
#include <set>

#include "asap/env.hpp"
#include "asap/errors.hpp"
#include "asap/rng.hpp"
#include "doctest.h"

using namespace asap;

namespace {

std::shared_ptr<const Instance> make_line(std::vector<double> xs, std::vector<double> demands,
                                          std::vector<double> ends, int fleet = 5) {
  Instance inst;
  inst.xs = std::move(xs);
  inst.ys.assign(inst.xs.size(), 0.0);
  inst.demand = std::move(demands);
  inst.end_times = std::move(ends);
  inst.fleet_size = fleet;
  return std::make_shared<const Instance>(std::move(inst));
}

// Uniform choice among feasible actions; drives the invariant suites.
int random_feasible(const EnvState& s, int traj, const std::vector<uint8_t>& feasible,
                    Rng& rng) {
  std::vector<int> options;
  for (int a = 0; a < s.nodes(); ++a)
    if (feasible[traj * s.nodes() + a]) options.push_back(a);
  REQUIRE(!options.empty());
  return options[rng.uniform_int(0, static_cast<int64_t>(options.size()) - 1)];
}

}  // namespace

TEST_CASE("reset starts all trajectories at the depot") {
  auto inst = std::make_shared<const Instance>(generate_instance(10, 5));
  EnvState s = reset(inst, 10);
  CHECK(s.num_traj == 10);
  for (int t = 0; t < 10; ++t) {
    CHECK(s.current_node[t] == 0);
    CHECK(s.load[t] == 1.0);
    CHECK(s.vehicles_remaining[t] == 5);
    CHECK(s.fleet_distance[t] == 0.0);
    CHECK(s.mask_at(t, 0));  // depot closed
    for (int c = 1; c < 11; ++c) CHECK(!s.mask_at(t, c));
    CHECK(!s.done[t]);
  }
  CHECK_THROWS_AS(reset(inst, 0), ConfigError);
  CHECK_THROWS_AS(reset(inst, 11), ConfigError);
}

TEST_CASE("serving a customer updates load, mask and reward") {
  auto inst = make_line({0.0, 0.3}, {0.0, 0.2}, {10000.0, 10000.0});
  EnvState s = reset(inst, 1);
  const StepOutcome out = step(s, {1});
  CHECK(s.load[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(s.mask_at(0, 1));
  CHECK(out.reward[0] == doctest::Approx(-0.3).epsilon(1e-12));
  CHECK(out.returned_to_depot[0] == 0);
  CHECK(!s.done[0]);
}

TEST_CASE("depot return at load 0.8 costs distance plus penalty 8") {
  auto inst = make_line({0.0, 0.3}, {0.0, 0.2}, {10000.0, 10000.0});
  EnvState s = reset(inst, 1, /*penalty=*/10.0);
  step(s, {1});
  const StepOutcome out = step(s, {0});
  CHECK(out.reward[0] == doctest::Approx(-0.3 - 8.0).epsilon(1e-12));
  CHECK(out.returned_to_depot[0] == 1);
  CHECK(out.load_at_return[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(s.vehicles_remaining[0] == 4);
  CHECK(s.load[0] == 1.0);
  CHECK(s.done[0]);  // all customers masked and back at the depot
}

TEST_CASE("episode terminates when the last vehicle is deployed") {
  auto inst = make_line({0.0, 0.2, 0.8}, {0.0, 0.1, 0.1}, {10000.0, 10000.0, 10000.0},
                        /*fleet=*/1);
  EnvState s = reset(inst, 1);
  step(s, {1});
  step(s, {2});
  step(s, {0});
  CHECK(s.vehicles_remaining[0] == 0);
  CHECK(s.done[0]);
}

TEST_CASE("a masked action on a live trajectory is a contract violation") {
  auto inst = make_line({0.0, 0.3, 0.6}, {0.0, 0.2, 0.2}, {10000.0, 10000.0, 10000.0});
  EnvState s = reset(inst, 1);
  CHECK_THROWS_AS(step(s, {0}), ContractError);  // depot masked at step 0
  step(s, {1});
  CHECK_THROWS_AS(step(s, {1}), ContractError);  // already visited
}

TEST_CASE("done trajectories freeze") {
  auto inst = make_line({0.0, 0.3}, {0.0, 0.2}, {10000.0, 10000.0});
  EnvState s = reset(inst, 1);
  step(s, {1});
  step(s, {0});
  REQUIRE(s.done[0]);
  const EnvState before = s;
  const StepOutcome out = step(s, {1});  // ignored
  CHECK(out.reward[0] == 0.0);
  CHECK(s.load == before.load);
  CHECK(s.fleet_distance == before.fleet_distance);
  CHECK(s.visit_order[0] == before.visit_order[0]);
}

TEST_CASE("urgency matches the hand-evaluated ratio") {
  auto inst = make_line({0.0, 0.7}, {0.0, 0.1}, {10000.0, 100.0});
  EnvState s = reset(inst, 1);
  const UrgencyField f = compute_urgency(s);
  // (0.7 / 0.014) / 100 = 0.5
  CHECK(f.value[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(!f.missed[1]);
  CHECK(f.value[0] == 0.0);  // zero distance to the current node
}

TEST_CASE("expired and unreachable nodes are missed") {
  CHECK(urgency_of(0.1, 100.0, /*fleet_distance=*/100.0 * 0.014, 0.014).missed);
  CHECK(std::isinf(urgency_of(0.1, 100.0, 200.0 * 0.014, 0.014).value));
  // reachable, urgency just above 1
  CHECK(urgency_of(0.7, 49.0, 0.0, 0.014).missed);
  // exactly at the boundary: f_u = 1 is still serviceable
  CHECK(!urgency_of(0.7, 50.0, 0.0, 0.014).missed);
  // masked nodes report missed regardless of slack
  auto inst = make_line({0.0, 0.3}, {0.0, 0.2}, {10000.0, 10000.0});
  EnvState s = reset(inst, 1);
  step(s, {1});
  const UrgencyField f = compute_urgency(s);
  CHECK(f.missed[1]);
}

TEST_CASE("feasible actions after reset are exactly the customers") {
  auto inst = std::make_shared<const Instance>(generate_instance(10, 3));
  EnvState s = reset(inst, 2);
  const auto feasible = feasible_actions(s);
  for (int t = 0; t < 2; ++t) {
    CHECK(!feasible[t * 11 + 0]);
    for (int c = 1; c < 11; ++c) {
      const double d = inst->distance(0, c);
      const bool reachable = !urgency_of(d, inst->end_times[c], 0.0, inst->speed).missed;
      CHECK(feasible[t * 11 + c] == (reachable ? 1 : 0));
    }
  }
}

TEST_CASE("zero load opens only the depot") {
  auto inst = make_line({0.0, 0.5, 0.9}, {0.0, 1.0, 0.3}, {10000.0, 10000.0, 10000.0});
  EnvState s = reset(inst, 1);
  step(s, {1});  // consumes the entire load
  CHECK(s.load[0] == 0.0);
  const auto feasible = feasible_actions(s);
  CHECK(!feasible[1]);
  CHECK(!feasible[2]);  // demand 0.3 > load 0
  CHECK(feasible[0]);   // forced fallback although step <= 2
}

TEST_CASE("customers with demand above the load are infeasible") {
  auto inst = make_line({0.0, 0.2, 0.4}, {0.0, 0.8, 0.5}, {10000.0, 10000.0, 10000.0});
  EnvState s = reset(inst, 1);
  step(s, {1});  // load 0.2 now, customer 2 demands 0.5
  const auto feasible = feasible_actions(s);
  CHECK(!feasible[2]);
  CHECK(s.mask_at(0, 2));  // folded into the mask permanently
}

TEST_CASE("depot unmasks after the third decision") {
  auto inst = std::make_shared<const Instance>(generate_instance(8, 11));
  EnvState s = reset(inst, 1);
  Rng rng(4);
  for (int t = 0; t < 3; ++t) {
    const auto feasible = feasible_actions(s);
    if (!s.all_customers_masked(0)) CHECK(!feasible[0]);
    step(s, {random_feasible(s, 0, feasible, rng)});
  }
  const auto feasible = feasible_actions(s);
  CHECK(feasible[0]);  // step is now 3
}

TEST_CASE("one-customer episode forms depot-customer-depot") {
  auto inst = make_line({0.0, 0.4}, {0.0, 0.2}, {10000.0, 10000.0});
  EnvState s = reset(inst, 1);
  const auto starts = force_pomo_starts(s);
  CHECK(starts == std::vector<int>{1});
  step(s, starts);
  const auto feasible = feasible_actions(s);
  CHECK(feasible[0]);  // only the depot remains although step == 1
  CHECK(!feasible[1]);
  step(s, {0});
  CHECK(s.done[0]);
  CHECK(s.visit_order[0] == std::vector<int>{1, 0});
}

TEST_CASE("pomo starts are distinct and guarded") {
  auto inst = std::make_shared<const Instance>(generate_instance(10, 21));
  EnvState s = reset(inst, 10);
  const auto starts = force_pomo_starts(s);
  std::set<int> unique(starts.begin(), starts.end());
  CHECK(unique.size() == 10);
  for (int t = 0; t < 10; ++t) CHECK(starts[t] == t + 1);

  EnvState wrong = reset(inst, 9);
  CHECK_THROWS_AS(force_pomo_starts(wrong), ConfigError);
  step(s, starts);
  CHECK_THROWS_AS(force_pomo_starts(s), ConfigError);  // no longer at step 0
}

TEST_CASE("random episodes keep every environment invariant") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const int customers = 5 + static_cast<int>(rng.uniform_int(0, 7));
    auto inst = std::make_shared<const Instance>(
        generate_instance(customers, 40000 + trial));
    const int traj = 1 + static_cast<int>(rng.uniform_int(0, 2));
    EnvState s = reset(inst, traj);
    const int n = s.nodes();

    std::vector<std::vector<uint8_t>> prev_mask(traj, std::vector<uint8_t>(n, 0));
    std::vector<double> tour_load(traj, 1.0);
    std::vector<double> total_reward(traj, 0.0);
    std::vector<double> penalty_sum(traj, 0.0);
    int steps = 0;
    const int step_limit = 2 * (n + inst->fleet_size);

    while (!s.all_done()) {
      REQUIRE(steps <= step_limit);
      const auto feasible = feasible_actions(s);
      std::vector<int> actions(traj, 0);
      std::vector<int> veh_before(traj);
      for (int t = 0; t < traj; ++t) {
        veh_before[t] = s.vehicles_remaining[t];
        actions[t] = s.done[t] ? 0 : random_feasible(s, t, feasible, rng);
      }
      const StepOutcome out = step(s, actions);
      for (int t = 0; t < traj; ++t) {
        if (out.reward[t] == 0.0 && veh_before[t] == s.vehicles_remaining[t] &&
            prev_mask[t] == std::vector<uint8_t>(s.mask.begin() + t * n,
                                                 s.mask.begin() + (t + 1) * n) &&
            s.done[t])
          continue;  // frozen trajectory
        // mask monotonicity
        for (int c = 1; c < n; ++c) {
          if (prev_mask[t][c]) CHECK(s.mask_at(t, c));
          prev_mask[t][c] = s.mask_at(t, c) ? 1 : 0;
        }
        // fleet decrements exactly on depot actions
        if (actions[t] == 0 && veh_before[t] > 0)
          CHECK(s.vehicles_remaining[t] == veh_before[t] - 1);
        else if (!s.done[t] || actions[t] != 0)
          CHECK(s.vehicles_remaining[t] <= veh_before[t]);
        // load conservation within the current tour
        if (actions[t] == 0) {
          penalty_sum[t] += out.load_at_return[t];
          tour_load[t] = 1.0;
        } else {
          tour_load[t] -= inst->demand[actions[t]];
          CHECK(s.load[t] == doctest::Approx(tour_load[t]).epsilon(1e-12));
        }
        total_reward[t] += out.reward[t];
      }
      ++steps;
    }

    // distance additivity and reward decomposition via replay
    for (int t = 0; t < traj; ++t) {
      double dist = 0.0;
      int prev = 0;
      for (int node : s.visit_order[t]) {
        dist += inst->distance(prev, node);
        prev = node;
      }
      CHECK(s.fleet_distance[t] == doctest::Approx(dist).epsilon(1e-9));
      CHECK(total_reward[t] ==
            doctest::Approx(-dist - s.penalty * penalty_sum[t]).epsilon(1e-9));
    }
  }
}
