#include "asap/instance.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

#include "asap/io.hpp"
#include "asap/rng.hpp"
#include "json.hpp"

namespace asap {

using nlohmann::json;

void GenerationConfig::validate() const {
  if (fleet_size < 1) throw ConfigError("fleet_size must be >= 1");
  if (capacity_raw <= 0.0) throw ConfigError("capacity_raw must be positive");
  if (max_raw_demand < 1) throw ConfigError("max_raw_demand must be >= 1");
  if (max_raw_demand > capacity_raw)
    throw ConfigError("max_raw_demand must not exceed capacity_raw");
  if (end_time_min <= 0.0 || end_time_max < end_time_min)
    throw ConfigError("end-time range must satisfy 0 < min <= max");
  if (depot_end_time <= 0.0) throw ConfigError("depot_end_time must be positive");
  if (speed <= 0.0) throw ConfigError("speed must be positive");
}

double Instance::distance(int i, int j) const {
  const int n = num_nodes();
  if (i < 0 || i >= n || j < 0 || j >= n) {
    throw std::out_of_range("node index out of range: (" + std::to_string(i) + ", " +
                            std::to_string(j) + ") with N=" + std::to_string(n));
  }
  const double dx = xs[i] - xs[j];
  const double dy = ys[i] - ys[j];
  return std::sqrt(dx * dx + dy * dy);
}

double Instance::total_demand() const {
  double total = 0.0;
  for (double d : demand) total += d;
  return total;
}

void Instance::validate() const {
  const size_t n = xs.size();
  if (n < 2) throw ValidationError("instance needs a depot and at least one customer");
  if (ys.size() != n || demand.size() != n || end_times.size() != n)
    throw ValidationError("node attribute arrays have inconsistent lengths");
  if (fleet_size < 1) throw ValidationError("fleet_size must be >= 1");
  if (capacity_raw <= 0.0) throw ValidationError("capacity_raw must be positive");
  if (speed <= 0.0) throw ValidationError("speed must be positive");
  for (size_t i = 0; i < n; ++i) {
    if (!(xs[i] >= 0.0 && xs[i] <= 1.0 && ys[i] >= 0.0 && ys[i] <= 1.0))
      throw ValidationError("node " + std::to_string(i) + ": coordinates outside [0,1]^2");
    if (!(end_times[i] > 0.0) || !std::isfinite(end_times[i]))
      throw ValidationError("node " + std::to_string(i) + ": end_time must be positive");
  }
  if (demand[0] != 0.0) throw ValidationError("depot demand must be 0");
  for (size_t i = 1; i < n; ++i) {
    if (!(demand[i] > 0.0 && demand[i] <= 1.0))
      throw ValidationError("node " + std::to_string(i) +
                            ": normalized demand must lie in (0, 1]");
  }
}

Instance generate_instance(int num_customers, uint64_t seed, const GenerationConfig& config) {
  if (num_customers < 1) throw ConfigError("num_customers must be >= 1");
  config.validate();

  const int n = num_customers + 1;
  Instance inst;
  inst.xs.resize(n);
  inst.ys.resize(n);
  inst.demand.resize(n);
  inst.end_times.resize(n);
  inst.fleet_size = config.fleet_size;
  inst.capacity_raw = config.capacity_raw;
  inst.speed = config.speed;
  inst.seed = seed;

  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    inst.xs[i] = rng.next_double();
    inst.ys[i] = rng.next_double();
  }
  inst.demand[0] = 0.0;
  for (int i = 1; i < n; ++i) {
    const auto raw = rng.uniform_int(1, config.max_raw_demand);
    inst.demand[i] = static_cast<double>(raw) / config.capacity_raw;
  }
  inst.end_times[0] = config.depot_end_time;
  for (int i = 1; i < n; ++i) {
    inst.end_times[i] = rng.uniform(config.end_time_min, config.end_time_max);
  }

  // Large instances are expected to oversubscribe the fleet; flag the ones
  // that do not, since the load-at-return penalty loses its bite there.
  if (num_customers >= 40 && inst.total_demand() <= static_cast<double>(inst.fleet_size)) {
    std::cerr << "warning: instance seed " << seed << " has total demand "
              << inst.total_demand() << " <= fleet capacity " << inst.fleet_size << "\n";
  }

  inst.validate();
  return inst;
}

void save_instance(const Instance& instance, const std::filesystem::path& path) {
  json nodes = json::array();
  for (int i = 0; i < instance.num_nodes(); ++i) {
    nodes.push_back({{"x", instance.xs[i]},
                     {"y", instance.ys[i]},
                     {"demand_raw", instance.demand[i] * instance.capacity_raw},
                     {"end_time", instance.end_times[i]}});
  }
  json doc = {{"version", 1},
              {"speed", instance.speed},
              {"capacity_raw", instance.capacity_raw},
              {"fleet_size", instance.fleet_size},
              {"nodes", std::move(nodes)}};
  if (instance.seed) doc["seed"] = *instance.seed;
  atomic_write_text(path, doc.dump(2) + "\n");
}

Instance load_instance(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  try {
    if (doc.at("version").get<int>() != 1)
      throw ParseError(path.string() + ": unsupported instance format version");
    Instance inst;
    inst.speed = doc.at("speed").get<double>();
    inst.capacity_raw = doc.at("capacity_raw").get<double>();
    inst.fleet_size = doc.at("fleet_size").get<int>();
    if (doc.contains("seed")) inst.seed = doc["seed"].get<uint64_t>();
    for (const auto& node : doc.at("nodes")) {
      inst.xs.push_back(node.at("x").get<double>());
      inst.ys.push_back(node.at("y").get<double>());
      const double raw = node.at("demand_raw").get<double>();
      inst.demand.push_back(raw / inst.capacity_raw);
      inst.end_times.push_back(node.at("end_time").get<double>());
    }
    inst.validate();
    return inst;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace asap
