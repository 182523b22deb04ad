#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "asap/instance.hpp"
#include "asap/policy.hpp"

namespace asap {

// A set of depot-bracketed tours plus the cost breakdown under the
// load-at-return penalty objective.
struct Solution {
  std::string producer;
  std::vector<std::vector<int>> tours;  // each tour starts and ends at node 0
  double total_distance = 0.0;
  double served_demand = 0.0;
  double penalty_cost = 0.0;
  double objective = 0.0;  // total_distance + penalty_cost
  bool feasible = true;

  int vehicles_used() const { return static_cast<int>(tours.size()); }
};

struct Metrics {
  double distance = 0.0;
  double served = 0.0;
  double penalty = 0.0;
  double objective = 0.0;
  std::vector<std::string> violations;
};

// Recomputes distance, capacity/time feasibility under the shared fleet
// clock, the depot-return penalty, and the combined objective from scratch.
Metrics evaluate_solution(const Solution& solution, const Instance& instance, double penalty);

// Splits an environment visit order into depot-bracketed tours and prices
// them with the evaluator.
Solution solution_from_visits(const std::vector<int>& visits, const Instance& instance,
                              double penalty, std::string producer);

// Nearest feasible customer first, depot when none remains; runs on the
// environment itself so feasibility semantics match the learned policy
// exactly. Deterministic, ties to the lowest index.
Solution greedy_heuristic(const Instance& instance, double penalty);

// Exhaustive search over feasible action sequences under exact environment
// semantics. Minimum objective, lexicographically smallest action sequence
// on ties. Guarded to at most 9 customers.
Solution brute_force_oracle(const Instance& instance, double penalty);

// Best-of-POMO decode: one trajectory per customer, converted to solutions,
// minimum objective returned.
Solution solve_with_policy(const Instance& instance, const PolicyParams& policy, ActMode mode,
                           double penalty, uint64_t rng_seed = 0);

void save_solution(const Solution& solution, const std::filesystem::path& path);
Solution load_solution(const std::filesystem::path& path);

}  // namespace asap
