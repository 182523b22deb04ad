#include "asap/svg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace asap {

namespace {

const char* kTourColors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e",
                             "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"};

std::string fmt(double v, int precision = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

// Five-anchor sequential colormap, t in [0, 1].
std::string heat_color(double t) {
  static const int anchors[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  std::ostringstream os;
  os << "rgb(" << static_cast<int>(anchors[i][0] + f * (anchors[i + 1][0] - anchors[i][0]))
     << "," << static_cast<int>(anchors[i][1] + f * (anchors[i + 1][1] - anchors[i][1])) << ","
     << static_cast<int>(anchors[i][2] + f * (anchors[i + 1][2] - anchors[i][2])) << ")";
  return os.str();
}

}  // namespace

std::string render_route_svg(const Instance& instance, const Solution& solution) {
  const double size = 720.0, margin = 50.0, top = 60.0;
  auto px = [&](double x) { return margin + x * size; };
  auto py = [&](double y) { return top + (1.0 - y) * size; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * margin
      << "\" height=\"" << size + top + margin << "\" font-family=\"sans-serif\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << margin << "\" y=\"30\" font-size=\"18\">" << solution.producer
      << " &#8212; total distance " << fmt(solution.total_distance, 3) << " (objective "
      << fmt(solution.objective, 3) << ")</text>\n";

  for (size_t k = 0; k < solution.tours.size(); ++k) {
    const auto& tour = solution.tours[k];
    const char* color = kTourColors[k % (sizeof(kTourColors) / sizeof(kTourColors[0]))];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (int node : tour) svg << fmt(px(instance.xs[node]), 1) << "," << fmt(py(instance.ys[node]), 1) << " ";
    svg << "\"/>\n";
  }

  for (int i = 1; i < instance.num_nodes(); ++i) {
    const double r = 3.0 + 24.0 * instance.demand[i];
    svg << "<circle cx=\"" << fmt(px(instance.xs[i]), 1) << "\" cy=\"" << fmt(py(instance.ys[i]), 1)
        << "\" r=\"" << fmt(r, 1) << "\" fill=\"#4477aa\" fill-opacity=\"0.8\"/>\n";
    svg << "<text x=\"" << fmt(px(instance.xs[i]) + r + 2, 1) << "\" y=\""
        << fmt(py(instance.ys[i]) + 4, 1) << "\" font-size=\"11\" fill=\"#333\">"
        << static_cast<long>(std::lround(instance.end_times[i])) << "</text>\n";
  }
  svg << "<rect x=\"" << fmt(px(instance.xs[0]) - 7, 1) << "\" y=\"" << fmt(py(instance.ys[0]) - 7, 1)
      << "\" width=\"14\" height=\"14\" fill=\"black\"/>\n";
  svg << "<text x=\"" << fmt(px(instance.xs[0]) + 10, 1) << "\" y=\""
      << fmt(py(instance.ys[0]) + 5, 1) << "\" font-size=\"12\">depot</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::string render_heatmap_svg(const std::vector<std::vector<double>>& step_logits,
                               const std::vector<int>& chosen) {
  const size_t steps = step_logits.size();
  const size_t nodes = steps ? step_logits[0].size() : 0;
  const double cell = std::min(40.0, 640.0 / std::max<size_t>(1, steps));
  const double cell_y = std::min(40.0, 560.0 / std::max<size_t>(1, nodes));
  const double left = 60.0, top = 50.0;

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& row : step_logits)
    for (double v : row)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  const double span = hi > lo ? hi - lo : 1.0;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + steps * cell + 40
      << "\" height=\"" << top + nodes * cell_y + 50 << "\" font-family=\"sans-serif\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"25\" font-size=\"16\">decoder attention scores (step "
         "&#215; node)</text>\n";

  for (size_t t = 0; t < steps; ++t) {
    for (size_t n = 0; n < nodes; ++n) {
      const double v = step_logits[t][n];
      const std::string color = std::isfinite(v) ? heat_color((v - lo) / span) : "#202020";
      svg << "<rect x=\"" << fmt(left + t * cell, 1) << "\" y=\"" << fmt(top + n * cell_y, 1)
          << "\" width=\"" << fmt(cell, 1) << "\" height=\"" << fmt(cell_y, 1) << "\" fill=\""
          << color << "\"";
      if (t < chosen.size() && chosen[t] == static_cast<int>(n))
        svg << " stroke=\"white\" stroke-width=\"2\"";
      svg << "/>\n";
    }
    svg << "<text x=\"" << fmt(left + t * cell + cell / 2 - 4, 1) << "\" y=\""
        << fmt(top + nodes * cell_y + 16, 1) << "\" font-size=\"10\">" << t << "</text>\n";
  }
  for (size_t n = 0; n < nodes; ++n) {
    svg << "<text x=\"" << fmt(left - 30, 1) << "\" y=\"" << fmt(top + n * cell_y + cell_y / 2 + 4, 1)
        << "\" font-size=\"10\">" << (n == 0 ? "depot" : "N" + std::to_string(n)) << "</text>\n";
  }
  svg << "<text x=\"" << fmt(left + steps * cell / 2 - 10, 1) << "\" y=\""
      << fmt(top + nodes * cell_y + 36, 1) << "\" font-size=\"12\">step</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace asap
