#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "asap/errors.hpp"

namespace asap {

// Knobs for random instance generation. Defaults reproduce the standard
// training distribution: unit-square coordinates, raw demands in {1..10}
// against capacity 40, end-times in [50, 10000] seconds, five vehicles.
struct GenerationConfig {
  int fleet_size = 5;
  double capacity_raw = 40.0;
  int max_raw_demand = 10;
  double end_time_min = 50.0;
  double end_time_max = 10000.0;
  double depot_end_time = 10000.0;
  double speed = 0.014;  // distance units per second

  void validate() const;
};

// Static problem definition. Node 0 is the depot. Demands are stored
// normalized (raw / capacity_raw) so a full vehicle has load exactly 1.
// Immutable after construction; safe to share across threads.
struct Instance {
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<double> demand;     // normalized; demand[0] == 0
  std::vector<double> end_times;  // seconds
  int fleet_size = 5;
  double capacity_raw = 40.0;
  double speed = 0.014;
  std::optional<uint64_t> seed;

  int num_nodes() const { return static_cast<int>(xs.size()); }
  int num_customers() const { return num_nodes() - 1; }

  double distance(int i, int j) const;
  double total_demand() const;

  // Throws ValidationError if any structural invariant is broken.
  void validate() const;
};

// Deterministic generator: one seeded stream, drawing coordinates, then
// demands, then end-times, in that order.
Instance generate_instance(int num_customers, uint64_t seed,
                           const GenerationConfig& config = {});

void save_instance(const Instance& instance, const std::filesystem::path& path);
Instance load_instance(const std::filesystem::path& path);

}  // namespace asap
