#include "volssl/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace volssl::plot {

namespace {

const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
                          "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1f77b4", "#8c564b"};

std::string esc(const std::string& s) {
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

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string csv_num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string header(double w, double h, const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << ' ' << h
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
  return os.str();
}

struct Range {
  double lo = 0.0, hi = 1.0;
};

Range nice_range(double lo, double hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {};
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - (lo < 0 ? pad : 0.0), hi + pad};
}

void y_axis(std::ostringstream& os, double x0, double y0, double plot_h, const Range& r, const std::string& label) {
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y0 - plot_h << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = r.lo + (r.hi - r.lo) * i / 4.0;
    const double y = y0 - plot_h * i / 4.0;
    os << "<line x1=\"" << x0 - 4 << "\" y1=\"" << num(y) << "\" x2=\"" << x0 << "\" y2=\"" << num(y) << "\" stroke=\"black\"/>"
       << "<text x=\"" << x0 - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  os << "<text x=\"14\" y=\"" << num(y0 - plot_h / 2) << "\" transform=\"rotate(-90 14 " << num(y0 - plot_h / 2)
     << ")\" text-anchor=\"middle\">" << esc(label) << "</text>\n";
}

void legend(std::ostringstream& os, double x, double y, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double yy = y + 14.0 * static_cast<double>(i);
    os << "<rect x=\"" << x << "\" y=\"" << yy - 9 << "\" width=\"10\" height=\"10\" fill=\"" << kPalette[i % 12] << "\"/>"
       << "<text x=\"" << x + 14 << "\" y=\"" << yy << "\">" << esc(names[i]) << "</text>\n";
  }
}

}  // namespace

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& categories, const std::vector<BarSeries>& series,
                          const std::string& y_label) {
  for (const auto& s : series)
    if (s.values.size() != categories.size()) throw std::invalid_argument("bar chart series '" + s.name + "' length mismatch");
  double lo = 0.0, hi = 0.0;
  for (const auto& s : series)
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const Range r = nice_range(lo, hi);
  const double group_w = std::max(40.0, 14.0 * static_cast<double>(series.size()) + 16.0);
  const double x0 = 60, y0 = 300, plot_h = 250;
  const double plot_w = group_w * static_cast<double>(std::max<std::size_t>(1, categories.size()));
  const double w = x0 + plot_w + 160, h = 380;
  std::ostringstream os;
  os << header(w, h, title);
  y_axis(os, x0, y0, plot_h, r, y_label);
  auto ypos = [&](double v) { return y0 - plot_h * (v - r.lo) / (r.hi - r.lo); };
  const double base = ypos(std::clamp(0.0, r.lo, r.hi));
  os << "<line x1=\"" << x0 << "\" y1=\"" << num(base) << "\" x2=\"" << x0 + plot_w << "\" y2=\"" << num(base) << "\" stroke=\"black\"/>\n";
  const double bar_w = (group_w - 16.0) / static_cast<double>(std::max<std::size_t>(1, series.size()));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double gx = x0 + group_w * static_cast<double>(c) + 8.0;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = series[s].values[c];
      const double y = ypos(v);
      const double top = std::min(y, base), height = std::abs(base - y);
      const double bx = gx + bar_w * static_cast<double>(s);
      os << "<rect x=\"" << num(bx) << "\" y=\"" << num(top) << "\" width=\"" << num(bar_w - 1) << "\" height=\"" << num(height)
         << "\" fill=\"" << kPalette[s % 12] << "\"><title>" << esc(series[s].name) << ": " << num(v) << "</title></rect>\n";
      if (c < series[s].annotations.size() && !series[s].annotations[c].empty()) {
        os << "<text x=\"" << num(bx + bar_w / 2) << "\" y=\"" << num(top - 3) << "\" text-anchor=\"middle\">"
           << esc(series[s].annotations[c]) << "</text>\n";
      }
    }
    os << "<text x=\"" << num(gx + (group_w - 16.0) / 2) << "\" y=\"" << y0 + 16 << "\" text-anchor=\"end\" transform=\"rotate(-30 "
       << num(gx + (group_w - 16.0) / 2) << ' ' << y0 + 16 << ")\">" << esc(categories[c]) << "</text>\n";
  }
  std::vector<std::string> names;
  for (const auto& s : series) names.push_back(s.name);
  legend(os, x0 + plot_w + 20, 50, names);
  os << "</svg>\n";
  return os.str();
}

std::string bar_chart_csv(const std::vector<std::string>& categories, const std::vector<BarSeries>& series) {
  std::ostringstream os;
  os << "series,category,value,annotation\n";
  for (const auto& s : series)
    for (std::size_t c = 0; c < categories.size(); ++c)
      os << s.name << ',' << categories[c] << ',' << csv_num(s.values[c]) << ','
         << (c < s.annotations.size() ? s.annotations[c] : "") << '\n';
  return os.str();
}

std::string line_chart_svg(const std::string& title, const std::vector<LineSeries>& series, const std::string& x_label,
                           const std::string& y_label) {
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("line series '" + s.name + "' length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xlo = std::min(xlo, s.x[i]);
      xhi = std::max(xhi, s.x[i]);
      ylo = std::min(ylo, s.y[i]);
      yhi = std::max(yhi, s.y[i]);
    }
  }
  const Range xr = nice_range(xlo, xhi), yr = nice_range(ylo, yhi);
  const double x0 = 60, y0 = 300, plot_w = 420, plot_h = 250, w = x0 + plot_w + 170, h = 340;
  std::ostringstream os;
  os << header(w, h, title);
  y_axis(os, x0, y0, plot_h, yr, y_label);
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 + plot_w << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    os << "<text x=\"" << num(x0 + plot_w * i / 4.0) << "\" y=\"" << y0 + 14 << "\" text-anchor=\"middle\">" << num(v) << "</text>\n";
  }
  os << "<text x=\"" << x0 + plot_w / 2 << "\" y=\"" << y0 + 32 << "\" text-anchor=\"middle\">" << esc(x_label) << "</text>\n";
  std::vector<std::string> names;
  for (std::size_t s = 0; s < series.size(); ++s) {
    names.push_back(series[s].name);
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[s % 12] << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i) {
      os << num(x0 + plot_w * (series[s].x[i] - xr.lo) / (xr.hi - xr.lo)) << ','
         << num(y0 - plot_h * (series[s].y[i] - yr.lo) / (yr.hi - yr.lo)) << ' ';
    }
    os << "\"/>\n";
  }
  legend(os, x0 + plot_w + 20, 50, names);
  os << "</svg>\n";
  return os.str();
}

std::string line_chart_csv(const std::vector<LineSeries>& series) {
  std::ostringstream os;
  os << "series,x,y\n";
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) os << s.name << ',' << csv_num(s.x[i]) << ',' << csv_num(s.y[i]) << '\n';
  return os.str();
}

std::string heatmap_svg(const std::string& title, const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::vector<std::vector<double>>& values, double lo, double hi) {
  if (values.size() != rows.size()) throw std::invalid_argument("heatmap row count mismatch");
  const double cell = 26, x0 = 130, y0 = 50;
  const double w = x0 + cell * static_cast<double>(cols.size()) + 40, h = y0 + cell * static_cast<double>(rows.size()) + 50;
  std::ostringstream os;
  os << header(w, h, title);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (values[r].size() != cols.size()) throw std::invalid_argument("heatmap column count mismatch");
    const double y = y0 + cell * static_cast<double>(r);
    os << "<text x=\"" << x0 - 6 << "\" y=\"" << num(y + cell / 2 + 4) << "\" text-anchor=\"end\">" << esc(rows[r]) << "</text>\n";
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const double t = hi > lo ? std::clamp((values[r][c] - lo) / (hi - lo), 0.0, 1.0) : 1.0;
      const int red = static_cast<int>(255 - 200 * t), green = static_cast<int>(255 - 120 * t), blue = 255;
      char fill[16];
      std::snprintf(fill, sizeof(fill), "#%02x%02x%02x", red, green, blue);
      os << "<rect x=\"" << num(x0 + cell * static_cast<double>(c)) << "\" y=\"" << num(y) << "\" width=\"" << cell << "\" height=\"" << cell
         << "\" fill=\"" << fill << "\"><title>" << num(values[r][c]) << "</title></rect>\n";
    }
  }
  for (std::size_t c = 0; c < cols.size(); ++c) {
    os << "<text x=\"" << num(x0 + cell * (static_cast<double>(c) + 0.5)) << "\" y=\"" << num(y0 + cell * static_cast<double>(rows.size()) + 14)
       << "\" text-anchor=\"middle\">" << esc(cols[c]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string heatmap_csv(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::vector<std::vector<double>>& values) {
  std::ostringstream os;
  os << "row,col,value\n";
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) os << rows[r] << ',' << cols[c] << ',' << csv_num(values[r][c]) << '\n';
  return os.str();
}

void write_figure(const std::filesystem::path& stem, const std::string& svg, const std::string& csv) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  for (const auto& [ext, body] : {std::pair{".svg", &svg}, std::pair{".csv", &csv}}) {
    std::filesystem::path p = stem;
    p += ext;
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << *body;
  }
}

}  // namespace volssl::plot
