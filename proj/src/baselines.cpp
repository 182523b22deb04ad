#include "asap/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "asap/env.hpp"
#include "asap/errors.hpp"
#include "asap/io.hpp"
#include "json.hpp"

namespace asap {

using nlohmann::json;

Metrics evaluate_solution(const Solution& solution, const Instance& instance, double penalty) {
  const int n = instance.num_nodes();
  Metrics m;
  std::vector<int> seen(n, 0);
  if (static_cast<int>(solution.tours.size()) > instance.fleet_size)
    m.violations.push_back("fleet: " + std::to_string(solution.tours.size()) + " tours > " +
                           std::to_string(instance.fleet_size) + " vehicles");

  double fleet_distance = 0.0;  // shared clock across sequentially deployed vehicles
  for (size_t k = 0; k < solution.tours.size(); ++k) {
    const auto& tour = solution.tours[k];
    if (tour.size() < 2 || tour.front() != 0 || tour.back() != 0)
      throw ParseError("tour " + std::to_string(k) + " is not depot-bracketed");
    for (size_t i = 1; i + 1 < tour.size(); ++i) {
      if (tour[i] <= 0 || tour[i] >= n)
        throw ParseError("tour " + std::to_string(k) + " contains invalid node " +
                         std::to_string(tour[i]));
    }
    double load = 1.0;
    for (size_t i = 1; i < tour.size(); ++i) {
      const int prev = tour[i - 1];
      const int node = tour[i];
      const double leg = instance.distance(prev, node);
      if (node != 0) {
        if (seen[node]++)
          m.violations.push_back("duplicate: customer " + std::to_string(node));
        if (urgency_of(leg, instance.end_times[node], fleet_distance, instance.speed).missed)
          m.violations.push_back("time: customer " + std::to_string(node) +
                                 " unreachable before its end-time");
        if (instance.demand[node] > load + 1e-12)
          m.violations.push_back("capacity: customer " + std::to_string(node) +
                                 " demand exceeds remaining load");
        load -= instance.demand[node];
        m.served += instance.demand[node];
      }
      fleet_distance += leg;
      m.distance += leg;
    }
    m.penalty += penalty * load;  // load remaining when the vehicle reaches the depot
  }
  m.objective = m.distance + m.penalty;
  return m;
}

Solution solution_from_visits(const std::vector<int>& visits, const Instance& instance,
                              double penalty, std::string producer) {
  Solution s;
  s.producer = std::move(producer);
  std::vector<int> tour{0};
  for (int node : visits) {
    tour.push_back(node);
    if (node == 0) {
      s.tours.push_back(tour);
      tour = {0};
    }
  }
  if (tour.size() > 1)
    throw ContractError("visit order does not end at the depot; episode incomplete");
  const Metrics m = evaluate_solution(s, instance, penalty);
  s.total_distance = m.distance;
  s.served_demand = m.served;
  s.penalty_cost = m.penalty;
  s.objective = m.objective;
  s.feasible = m.violations.empty();
  return s;
}

Solution greedy_heuristic(const Instance& instance, double penalty) {
  auto inst = std::make_shared<const Instance>(instance);
  EnvState state = reset(inst, 1, penalty);
  const int n = instance.num_nodes();
  while (!state.all_done()) {
    const auto feasible = feasible_actions(state);
    int choice = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int c = 1; c < n; ++c) {
      if (!feasible[c]) continue;
      const double d = instance.distance(state.current_node[0], c);
      if (d < best) {
        best = d;
        choice = c;
      }
    }
    if (choice < 0) {
      if (!feasible[0]) break;  // unreachable: a live trajectory always has an action
      choice = 0;
    }
    step(state, {choice});
  }
  return solution_from_visits(state.visit_order[0], instance, penalty, "greedy");
}

namespace {

struct OracleSearch {
  const Instance& instance;
  double penalty;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<int> best_seq;

  // Feasible actions in ascending index order (depot first when open).
  std::vector<int> ordered_actions(const EnvState& s, bool nearest_first) const {
    const auto feasible = feasible_actions(s);
    std::vector<int> actions;
    for (int a = 0; a < s.nodes(); ++a)
      if (feasible[a]) actions.push_back(a);
    if (nearest_first) {
      std::stable_sort(actions.begin(), actions.end(), [&](int a, int b) {
        if (a == 0) return false;  // depot explored last
        if (b == 0) return true;
        return instance.distance(s.current_node[0], a) <
               instance.distance(s.current_node[0], b);
      });
    }
    return actions;
  }

  // Pass A: cheap bound via nearest-first ordering; prunes on >= best.
  void bound_pass(const EnvState& s, double cost, std::vector<int>& seq) {
    if (cost >= best_cost) return;
    if (s.all_done()) {
      best_cost = cost;
      best_seq = seq;
      return;
    }
    for (int a : ordered_actions(s, /*nearest_first=*/true)) {
      EnvState next = s;
      const StepOutcome out = step(next, {a});
      seq.push_back(a);
      bound_pass(next, cost - out.reward[0], seq);
      seq.pop_back();
    }
  }

  // Pass B: lexicographic order, pruning strictly above the optimum, so the
  // first completion hitting it is the lexicographically smallest optimum.
  bool lex_pass(const EnvState& s, double cost, std::vector<int>& seq) {
    if (cost > best_cost) return false;
    if (s.all_done()) {
      if (cost <= best_cost) {
        best_seq = seq;
        return true;
      }
      return false;
    }
    for (int a : ordered_actions(s, /*nearest_first=*/false)) {
      EnvState next = s;
      const StepOutcome out = step(next, {a});
      seq.push_back(a);
      if (lex_pass(next, cost - out.reward[0], seq)) return true;
      seq.pop_back();
    }
    return false;
  }
};

}  // namespace

Solution brute_force_oracle(const Instance& instance, double penalty) {
  if (instance.num_customers() > 9)
    throw ConfigError("brute_force_oracle is guarded to 9 customers, instance has " +
                      std::to_string(instance.num_customers()));
  auto inst = std::make_shared<const Instance>(instance);
  OracleSearch search{instance, penalty};
  std::vector<int> seq;
  EnvState root = reset(inst, 1, penalty);
  search.bound_pass(root, 0.0, seq);
  seq.clear();
  search.lex_pass(root, 0.0, seq);
  Solution s = solution_from_visits(search.best_seq, instance, penalty, "oracle");
  return s;
}

Solution solve_with_policy(const Instance& instance, const PolicyParams& policy, ActMode mode,
                           double penalty, uint64_t rng_seed) {
  Rng rng(rng_seed);
  RolloutOptions options;
  options.penalty = penalty;
  const EpisodeRecord rec = rollout_episode(instance, policy, mode, rng, options);
  const std::string producer = mode == ActMode::Greedy ? "policy-greedy" : "policy-sample";
  Solution best;
  bool have = false;
  for (int t = 0; t < rec.traj; ++t) {
    Solution s =
        solution_from_visits(rec.final_state.visit_order[t], instance, penalty, producer);
    if (!have || s.objective < best.objective) {
      best = std::move(s);
      have = true;
    }
  }
  return best;
}

void save_solution(const Solution& solution, const std::filesystem::path& path) {
  json doc = {{"producer", solution.producer},
              {"tours", solution.tours},
              {"total_distance", solution.total_distance},
              {"served_demand", solution.served_demand},
              {"penalty_cost", solution.penalty_cost},
              {"objective", solution.objective},
              {"feasible", solution.feasible},
              {"violations", json::array()}};
  atomic_write_text(path, doc.dump(2) + "\n");
}

Solution load_solution(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  try {
    Solution s;
    s.producer = doc.at("producer").get<std::string>();
    s.tours = doc.at("tours").get<std::vector<std::vector<int>>>();
    s.total_distance = doc.at("total_distance").get<double>();
    s.served_demand = doc.at("served_demand").get<double>();
    s.penalty_cost = doc.at("penalty_cost").get<double>();
    s.objective = doc.at("objective").get<double>();
    if (doc.contains("feasible")) s.feasible = doc["feasible"].get<bool>();
    return s;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace asap
