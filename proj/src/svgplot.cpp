// SPDX-License-Identifier: Apache-2.0
#include "moelab/svgplot.hpp"

#include <algorithm>
#include <fstream>

#include "moelab/common.hpp"
#include "moelab/metrics.hpp"

namespace moelab {

void write_line_plot(const std::filesystem::path& path, const std::string& title,
                     const std::string& x_label, const std::string& y_label,
                     const std::vector<PlotSeries>& series) {
  const double W = 640, H = 420, ml = 70, mr = 30, mt = 50, mb = 60;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if (first) {
        xmin = xmax = x;
        ymin = ymax = y;
        first = false;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

  static const char* colors[] = {"#2c7fb8", "#d95f02", "#1b9e77", "#7570b3", "#e7298a"};
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot write plot: " + path.string());
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  f << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-size='16'>" << title
    << "</text>\n";
  // axes
  f << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
    << "' stroke='black'/>\n";
  f << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
    << "' stroke='black'/>\n";
  f << "<text x='" << (ml + W - mr) / 2 << "' y='" << H - 18
    << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
  f << "<text x='18' y='" << (mt + H - mb) / 2 << "' text-anchor='middle' font-size='12' "
    << "transform='rotate(-90 18 " << (mt + H - mb) / 2 << ")'>" << y_label << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = ymin + (ymax - ymin) * i / 4.0;
    const double xv = xmin + (xmax - xmin) * i / 4.0;
    f << "<text x='" << ml - 8 << "' y='" << py(yv) + 4
      << "' text-anchor='end' font-size='10'>" << fmt_g(yv) << "</text>\n";
    f << "<text x='" << px(xv) << "' y='" << H - mb + 16
      << "' text-anchor='middle' font-size='10'>" << fmt_g(xv) << "</text>\n";
    f << "<line x1='" << ml << "' y1='" << py(yv) << "' x2='" << W - mr << "' y2='" << py(yv)
      << "' stroke='#dddddd'/>\n";
  }
  int ci = 0;
  for (const auto& s : series) {
    const char* color = colors[ci % 5];
    f << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
    for (const auto& [x, y] : s.points) f << px(x) << ',' << py(y) << ' ';
    f << "'/>\n";
    for (const auto& [x, y] : s.points)
      f << "<circle cx='" << px(x) << "' cy='" << py(y) << "' r='3' fill='" << color << "'/>\n";
    f << "<text x='" << W - mr - 8 << "' y='" << mt + 16 * ci
      << "' text-anchor='end' font-size='12' fill='" << color << "'>" << s.label << "</text>\n";
    ++ci;
  }
  f << "</svg>\n";
}

}  // namespace moelab
