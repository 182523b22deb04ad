#pragma once

#include <string>
#include <vector>

#include "asap/baselines.hpp"
#include "asap/instance.hpp"

namespace asap {

// Route map: depot as a square, customers as circles sized by demand and
// labelled with their end-times, one colored polyline per tour, total
// distance in the title.
std::string render_route_svg(const Instance& instance, const Solution& solution);

// Step-by-node grid of decoder logits; -inf cells are drawn dark, the
// chosen node of each step gets an outline.
std::string render_heatmap_svg(const std::vector<std::vector<double>>& step_logits,
                               const std::vector<int>& chosen);

}  // namespace asap
