#include "mixtrain/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mixtrain {

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// Tick step of roughly `target` intervals over [lo, hi].
double nice_step(double lo, double hi, int target) {
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (raw <= m * mag) return m * mag;
  }
  return 10.0 * mag;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::runtime_error("missing column: " + name);
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("empty csv: " + file.string());
  t.header = split(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split(line));
  }
  return t;
}

Series downsample(const Series& s, std::size_t max_points) {
  if (s.points.size() <= max_points || max_points == 0) return s;
  Series out{s.label, {}};
  const double per = static_cast<double>(s.points.size()) / max_points;
  for (std::size_t b = 0; b < max_points; ++b) {
    const auto lo = static_cast<std::size_t>(b * per);
    const auto hi = std::min(s.points.size(), static_cast<std::size_t>((b + 1) * per));
    double x = 0, y = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      x += s.points[i].first;
      y += s.points[i].second;
    }
    const double n = static_cast<double>(hi - lo);
    if (n > 0) out.points.emplace_back(x / n, y / n);
  }
  return out;
}

std::string render_svg_plot(const std::string& title, const std::string& x_label,
                            const std::string& y_label, const std::vector<Series>& series) {
  constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = kW - kLeft - kRight;
  const double ph = kH - kTop - kBottom;
  const auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  const auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << escape(title) << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\""
     << kTop + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
     << kTop + ph << "\" stroke=\"black\"/>\n";

  const double xs = nice_step(x0, x1, 6);
  for (double t = std::ceil(x0 / xs) * xs; t <= x1 + 1e-9 * xs; t += xs) {
    os << "<line x1=\"" << px(t) << "\" y1=\"" << kTop + ph << "\" x2=\"" << px(t) << "\" y2=\""
       << kTop + ph + 5 << "\" stroke=\"black\"/>";
    os << "<text x=\"" << px(t) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">"
       << fmt(t) << "</text>\n";
  }
  const double ys = nice_step(y0, y1, 5);
  for (double t = std::ceil(y0 / ys) * ys; t <= y1 + 1e-9 * ys; t += ys) {
    os << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << py(t) << "\" x2=\"" << kLeft << "\" y2=\""
       << py(t) << "\" stroke=\"black\"/>";
    os << "<text x=\"" << kLeft - 8 << "\" y=\"" << py(t) + 4 << "\" text-anchor=\"end\">"
       << fmt(t) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\">"
     << escape(x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << kTop + ph / 2
     << ") rotate(-90)\" text-anchor=\"middle\">" << escape(y_label) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    os << "<polyline class=\"series\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[i].points) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    const double ly = kTop + 14.0 * i + 6;
    os << "<line x1=\"" << kLeft + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + pw + 30
       << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>";
    os << "<text class=\"legend\" x=\"" << kLeft + pw + 34 << "\" y=\"" << ly + 4 << "\">"
       << escape(series[i].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

ReportFiles write_report(const std::vector<std::filesystem::path>& runs,
                         const std::filesystem::path& out_dir) {
  if (runs.empty()) throw std::invalid_argument("report: need at least one run directory");
  std::filesystem::create_directories(out_dir);
  std::vector<Series> map_series, pseudo_series, easy_series;
  std::ofstream merged(out_dir / "merged.csv");
  bool header_written = false;

  for (const auto& run : runs) {
    const CsvTable t = read_csv(run / "stats.csv");
    const std::size_t c_it = t.column("iteration");
    const std::size_t c_map = t.column("map");
    const std::size_t c_pseudo = t.column("n_pseudo");
    const std::size_t c_easy = t.column("easy_ratio");
    std::string label = run.filename().string();
    if (label.empty()) label = run.parent_path().filename().string();

    Series m{label, {}}, p{label, {}}, e{label, {}};
    for (const auto& row : t.rows) {
      if (row.size() != t.header.size()) throw std::runtime_error("ragged row in " + run.string());
      const double it = std::stod(row[c_it]);
      if (!row[c_map].empty()) m.points.emplace_back(it, std::stod(row[c_map]));
      p.points.emplace_back(it, std::stod(row[c_pseudo]));
      e.points.emplace_back(it, std::stod(row[c_easy]));
    }
    // The initial evaluation of an untrained run lives in eval.csv only.
    const auto eval_file = run / "eval.csv";
    if (std::filesystem::exists(eval_file)) {
      const CsvTable ev = read_csv(eval_file);
      const std::size_t e_it = ev.column("iteration");
      const std::size_t e_map = ev.column("student_map");
      for (const auto& row : ev.rows) {
        const double it = std::stod(row[e_it]);
        const bool seen = std::any_of(m.points.begin(), m.points.end(),
                                      [&](const auto& pt) { return pt.first == it; });
        if (!seen) m.points.emplace_back(it, std::stod(row[e_map]));
      }
      std::sort(m.points.begin(), m.points.end());
    }
    map_series.push_back(std::move(m));
    pseudo_series.push_back(downsample(p, 200));
    easy_series.push_back(downsample(e, 200));

    if (!header_written) {
      merged << "run";
      for (const auto& h : t.header) merged << ',' << h;
      merged << '\n';
      header_written = true;
    }
    for (const auto& row : t.rows) {
      merged << label;
      for (const auto& v : row) merged << ',' << v;
      merged << '\n';
    }
  }

  ReportFiles files{out_dir / "map.svg", out_dir / "n_pseudo.svg", out_dir / "easy_ratio.svg",
                    out_dir / "merged.csv"};
  std::ofstream(files.map_svg) << render_svg_plot("Test mAP (clean annotations)", "iteration",
                                                  "mAP", map_series);
  std::ofstream(files.pseudo_svg) << render_svg_plot("Pseudo boxes per iteration", "iteration",
                                                     "n_pseudo", pseudo_series);
  std::ofstream(files.easy_svg) << render_svg_plot("Proportion of easy targets", "iteration",
                                                   "easy_ratio", easy_series);
  return files;
}

}  // namespace mixtrain
