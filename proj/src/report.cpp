#include "tinc/report.hpp"

#include <glob.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tinc/common.hpp"

namespace tinc::report {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 3) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

RunMetrics read_metrics(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read metrics file " + file.string());
  RunMetrics r;
  r.source = file.string();
  try {
    const auto j = nlohmann::json::parse(in);
    r.method = j.at("method").get<std::string>();
    r.seed = std::to_string(j.at("seed").get<std::uint64_t>());
    r.scan_auroc = j.at("scan_auroc").get<double>();
    r.scan_prauc = j.at("scan_prauc").get<double>();
    r.volume_auroc = j.at("volume_auroc").get<double>();
    r.volume_prauc = j.at("volume_prauc").get<double>();
    r.dv_spearman = j.at("dv_spearman").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed metrics file " + file.string() + ": " + e.what());
  }
  return r;
}

std::vector<std::filesystem::path> expand_inputs(const std::vector<std::string>& patterns) {
  std::set<std::filesystem::path> found;
  for (const auto& p : patterns) {
    if (std::filesystem::is_directory(p)) {
      for (const auto& e : std::filesystem::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().filename() == "metrics.json") found.insert(e.path());
      continue;
    }
    glob_t g{};
    if (::glob(p.c_str(), 0, nullptr, &g) == 0)
      for (std::size_t i = 0; i < g.gl_pathc; ++i) found.insert(g.gl_pathv[i]);
    ::globfree(&g);
  }
  if (found.empty()) throw ValidationError("no metrics files match the given inputs");
  return {found.begin(), found.end()};
}

std::vector<MethodRow> aggregate(const std::vector<RunMetrics>& runs) {
  std::map<std::string, std::vector<RunMetrics>> by_method;
  for (const auto& r : runs) by_method[r.method].push_back(r);
  std::vector<MethodRow> out;
  for (auto& [method, rs] : by_method) {
    std::sort(rs.begin(), rs.end(), [](const RunMetrics& a, const RunMetrics& b) {
      return a.seed.size() != b.seed.size() ? a.seed.size() < b.seed.size() : a.seed < b.seed;
    });
    MethodRow row{method, rs, {}};
    row.mean.method = method;
    row.mean.seed = "mean";
    const double k = static_cast<double>(rs.size());
    for (const auto& r : rs) {
      row.mean.scan_auroc += r.scan_auroc / k;
      row.mean.scan_prauc += r.scan_prauc / k;
      row.mean.volume_auroc += r.volume_auroc / k;
      row.mean.volume_prauc += r.volume_prauc / k;
      row.mean.dv_spearman += r.dv_spearman / k;
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::string to_csv(const std::vector<MethodRow>& rows) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  auto line = [&](const RunMetrics& r) {
    os << r.method << ',' << r.seed << ',' << num(r.scan_auroc) << ',' << num(r.scan_prauc) << ','
       << num(r.volume_auroc) << ',' << num(r.volume_prauc) << ',' << num(r.dv_spearman) << '\n';
  };
  for (const auto& row : rows)
    for (const auto& r : row.runs) line(r);
  for (const auto& row : rows) line(row.mean);
  return os.str();
}

std::vector<RunMetrics> parse_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) throw ValidationError("unexpected CSV header");
  std::vector<RunMetrics> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw ValidationError("bad CSV row: " + line);
    RunMetrics r;
    r.method = f[0];
    r.seed = f[1];
    r.scan_auroc = std::stod(f[2]);
    r.scan_prauc = std::stod(f[3]);
    r.volume_auroc = std::stod(f[4]);
    r.volume_prauc = std::stod(f[5]);
    r.dv_spearman = std::stod(f[6]);
    out.push_back(r);
  }
  return out;
}

std::string text_table(const std::vector<MethodRow>& rows) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-18s %5s  %-9s %-9s %-9s %-9s %-9s\n", "method", "runs", "scan_auc", "scan_pr",
                "vol_auc", "vol_pr", "dv_rho");
  os << buf;
  for (const auto& row : rows) {
    const auto& m = row.mean;
    std::snprintf(buf, sizeof(buf), "%-18s %5zu  %-9s %-9s %-9s %-9s %-9s\n", row.method.c_str(), row.runs.size(),
                  fixed(m.scan_auroc).c_str(), fixed(m.scan_prauc).c_str(), fixed(m.volume_auroc).c_str(),
                  fixed(m.volume_prauc).c_str(), fixed(m.dv_spearman).c_str());
    os << buf;
    for (const auto& r : row.runs) {
      std::snprintf(buf, sizeof(buf), "  seed %-16s %-9s %-9s %-9s %-9s %-9s\n", r.seed.c_str(),
                    fixed(r.scan_auroc).c_str(), fixed(r.scan_prauc).c_str(), fixed(r.volume_auroc).c_str(),
                    fixed(r.volume_prauc).c_str(), fixed(r.dv_spearman).c_str());
      os << buf;
    }
  }
  return os.str();
}

std::string svg_lines(const std::string& title, const std::string& y_label, const std::vector<Series>& series) {
  const double w = 640, h = 400, left = 60, right = 160, top = 40, bottom = 40;
  double ymin = INFINITY, ymax = -INFINITY;
  std::size_t xmax = 1;
  for (const auto& s : series) {
    for (double v : s.y)
      if (std::isfinite(v)) {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
      }
    xmax = std::max(xmax, s.y.size() > 1 ? s.y.size() - 1 : std::size_t{1});
  }
  if (!std::isfinite(ymin)) ymin = 0.0, ymax = 1.0;
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  auto px = [&](std::size_t i) { return left + (w - left - right) * static_cast<double>(i) / static_cast<double>(xmax); };
  auto py = [&](double v) { return top + (h - top - bottom) * (1.0 - (v - ymin) / (ymax - ymin)); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"24\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"4\" y=\"" << top - 8 << "\" font-size=\"11\">" << xml_escape(y_label) << "</text>\n";
  os << "<text x=\"4\" y=\"" << top + 4 << "\" font-size=\"10\">" << fixed(ymax, 4) << "</text>\n";
  os << "<text x=\"4\" y=\"" << h - bottom << "\" font-size=\"10\">" << fixed(ymin, 4) << "</text>\n";
  os << "<text x=\"" << w - right << "\" y=\"" << h - bottom + 16 << "\" font-size=\"10\">epoch " << xmax
     << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* c = colors[k % 7];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" points=\"";
    for (std::size_t i = 0; i < series[k].y.size(); ++i)
      if (std::isfinite(series[k].y[i])) os << fixed(px(i), 1) << ',' << fixed(py(series[k].y[i]), 1) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << w - right + 8 << "\" y=\"" << top + 14 * static_cast<double>(k + 1) << "\" font-size=\"11\" fill=\""
       << c << "\">" << xml_escape(series[k].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace tinc::report
