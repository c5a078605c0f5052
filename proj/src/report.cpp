#include "moerl/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "moerl/error.hpp"

namespace moerl {

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// white -> dark blue
std::string shade(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto r = static_cast<int>(std::lround(247 - t * (247 - 8)));
  const auto g = static_cast<int>(std::lround(251 - t * (251 - 48)));
  const auto b = static_cast<int>(std::lround(255 - t * (255 - 107)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

std::string format_number(double v) { return fmt("%.6f", v); }

double policy_agreement(const std::vector<PolicyDistribution>& a, const std::vector<PolicyDistribution>& b,
                        AgreementMetric metric) {
  if (a.size() != b.size()) throw ShapeError("agreement needs policies over the same states");
  if (a.empty()) throw UsageError("agreement over zero states");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (metric == AgreementMetric::argmax) {
      total += a[i].argmax() == b[i].argmax() ? 1.0 : 0.0;
    } else {
      double overlap = 0.0;
      for (int k = 0; k < kActionCount; ++k) overlap += std::min(a[i][k], b[i][k]);
      total += overlap;
    }
  }
  return total / static_cast<double>(a.size());
}

nn::Matrix agreement_matrix(const std::vector<std::vector<PolicyDistribution>>& policies, AgreementMetric metric) {
  const auto n = static_cast<Eigen::Index>(policies.size());
  nn::Matrix m = nn::Matrix::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      m(i, j) = m(j, i) = policy_agreement(policies[static_cast<std::size_t>(i)], policies[static_cast<std::size_t>(j)],
                                           metric);
    }
  }
  return m;
}

double ActionGrid::at_action(int action) const {
  return cells[static_cast<std::size_t>(kBinsPerDrug - 1 - action / kBinsPerDrug)]
              [static_cast<std::size_t>(action % kBinsPerDrug)];
}

double ActionGrid::sum() const {
  double s = 0.0;
  for (const auto& row : cells) {
    for (double v : row) s += v;
  }
  return s;
}

ActionGrid action_distribution(const std::vector<PolicyDistribution>& policy) {
  if (policy.empty()) throw UsageError("action distribution over zero states");
  std::array<std::size_t, kActionCount> counts{};
  for (const auto& p : policy) ++counts[static_cast<std::size_t>(p.argmax())];
  ActionGrid g;
  for (int a = 0; a < kActionCount; ++a) {
    g.cells[static_cast<std::size_t>(kBinsPerDrug - 1 - a / kBinsPerDrug)][static_cast<std::size_t>(a % kBinsPerDrug)] =
        static_cast<double>(counts[static_cast<std::size_t>(a)]) / static_cast<double>(policy.size());
  }
  return g;
}

nlohmann::json to_json(const ActionGrid& grid) { return grid.cells; }

ActionGrid action_grid_from_json(const nlohmann::json& j) {
  ActionGrid g;
  g.cells = j.get<decltype(g.cells)>();
  return g;
}

std::string action_grid_csv(const ActionGrid& grid) {
  std::ostringstream out;
  out << "iv_bin";
  for (int c = 0; c < kBinsPerDrug; ++c) out << ",vaso_" << c;
  out << '\n';
  for (int r = 0; r < kBinsPerDrug; ++r) {
    out << kBinsPerDrug - 1 - r;
    for (int c = 0; c < kBinsPerDrug; ++c) {
      out << ',' << format_number(grid.cells[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
    }
    out << '\n';
  }
  return out.str();
}

std::string action_grid_svg(const ActionGrid& grid, const std::string& title) {
  constexpr int cell = 60, left = 60, top = 40;
  double peak = 0.0;
  for (const auto& row : grid.cells) peak = std::max(peak, *std::max_element(row.begin(), row.end()));
  std::ostringstream out;
  const int w = left + cell * kBinsPerDrug + 20, h = top + cell * kBinsPerDrug + 50;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << escape(title) << "</text>\n";
  for (int r = 0; r < kBinsPerDrug; ++r) {
    for (int c = 0; c < kBinsPerDrug; ++c) {
      const double v = grid.cells[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      const int x = left + c * cell, y = top + r * cell;
      out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
          << shade(peak > 0 ? v / peak : 0.0) << "\" stroke=\"#999\"/>\n";
      out << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
          << (peak > 0 && v / peak > 0.6 ? "#fff" : "#000") << "\">" << fmt("%.3f", v) << "</text>\n";
    }
    out << "<text x=\"" << left - 8 << "\" y=\"" << top + r * cell + cell / 2 + 4 << "\" text-anchor=\"end\">"
        << kBinsPerDrug - 1 - r << "</text>\n";
  }
  for (int c = 0; c < kBinsPerDrug; ++c) {
    out << "<text x=\"" << left + c * cell + cell / 2 << "\" y=\"" << top + kBinsPerDrug * cell + 16
        << "\" text-anchor=\"middle\">" << c << "</text>\n";
  }
  out << "<text x=\"" << left + kBinsPerDrug * cell / 2 << "\" y=\"" << h - 8
      << "\" text-anchor=\"middle\">vasopressor bin</text>\n";
  out << "<text x=\"14\" y=\"" << top + kBinsPerDrug * cell / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << top + kBinsPerDrug * cell / 2 << ")\">IV fluid bin</text>\n";
  out << "</svg>\n";
  return out.str();
}

std::string bar_chart_svg(const std::vector<std::string>& labels, const std::vector<double>& values,
                          const std::string& title) {
  if (labels.size() != values.size()) throw ShapeError("bar chart labels and values differ in length");
  constexpr int bar = 44, left = 50, top = 40, height = 220;
  const double peak = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
  const int w = left + bar * static_cast<int>(values.size()) + 20, h = top + height + 110;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  out << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << escape(title) << "</text>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top + height << "\" x2=\"" << w - 10 << "\" y2=\"" << top + height
      << "\" stroke=\"#000\"/>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double bh = peak > 0 ? values[i] / peak * height : 0.0;
    const int x = left + static_cast<int>(i) * bar;
    out << "<rect x=\"" << x + 4 << "\" y=\"" << fmt("%.2f", top + height - bh) << "\" width=\"" << bar - 8
        << "\" height=\"" << fmt("%.2f", bh) << "\" fill=\"#3b6fb6\"/>\n";
    out << "<text x=\"" << x + bar / 2 << "\" y=\"" << fmt("%.2f", top + height - bh - 4)
        << "\" text-anchor=\"middle\">" << fmt("%g", values[i]) << "</text>\n";
    const int ly = top + height + 12;
    out << "<text x=\"" << x + bar / 2 << "\" y=\"" << ly << "\" text-anchor=\"end\" transform=\"rotate(-60 "
        << x + bar / 2 << ' ' << ly << ")\">" << escape(labels[i]) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string paired_histogram_svg(const std::vector<double>& edges, const std::vector<double>& first,
                                 const std::vector<double>& second, const std::string& first_name,
                                 const std::string& second_name, const std::string& title) {
  if (edges.size() != first.size() + 1 || first.size() != second.size()) {
    throw ShapeError("histogram edges must exceed the bin count by one");
  }
  constexpr int left = 50, top = 40, width = 480, height = 220;
  double peak = 0.0;
  for (std::size_t i = 0; i < first.size(); ++i) peak = std::max({peak, first[i], second[i]});
  const double lo = edges.front(), hi = edges.back();
  const auto xpos = [&](double e) { return left + (hi > lo ? (e - lo) / (hi - lo) : 0.0) * width; };
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + width + 20 << "\" height=\"" << top + height + 50
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  out << "<text x=\"" << left + width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << escape(title)
      << "</text>\n";
  const std::array<std::pair<const std::vector<double>*, const char*>, 2> series{{{&first, "#2a9d8f"}, {&second, "#e76f51"}}};
  for (const auto& [values, color] : series) {
    for (std::size_t i = 0; i < values->size(); ++i) {
      const double bh = peak > 0 ? (*values)[i] / peak * height : 0.0;
      out << "<rect x=\"" << fmt("%.2f", xpos(edges[i])) << "\" y=\"" << fmt("%.2f", top + height - bh)
          << "\" width=\"" << fmt("%.2f", xpos(edges[i + 1]) - xpos(edges[i])) << "\" height=\"" << fmt("%.2f", bh)
          << "\" fill=\"" << color << "\" fill-opacity=\"0.55\"/>\n";
    }
  }
  out << "<line x1=\"" << left << "\" y1=\"" << top + height << "\" x2=\"" << left + width << "\" y2=\"" << top + height
      << "\" stroke=\"#000\"/>\n";
  out << "<text x=\"" << left << "\" y=\"" << top + height + 14 << "\">" << fmt("%.2f", lo) << "</text>\n";
  out << "<text x=\"" << left + width << "\" y=\"" << top + height + 14 << "\" text-anchor=\"end\">" << fmt("%.2f", hi)
      << "</text>\n";
  out << "<rect x=\"" << left + 10 << "\" y=\"" << top << "\" width=\"10\" height=\"10\" fill=\"#2a9d8f\"/><text x=\""
      << left + 24 << "\" y=\"" << top + 9 << "\">" << escape(first_name) << "</text>\n";
  out << "<rect x=\"" << left + 10 << "\" y=\"" << top + 16 << "\" width=\"10\" height=\"10\" fill=\"#e76f51\"/><text x=\""
      << left + 24 << "\" y=\"" << top + 25 << "\">" << escape(second_name) << "</text>\n";
  out << "</svg>\n";
  return out.str();
}

}  // namespace moerl
