#pragma once

// Plot-ready data from finished runs: per-class AP time series, metric-vs-cost
// bar data, and small static SVG renderings of both.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecls/errors.hpp"
#include "ecls/harness.hpp"
#include "ecls/kvconfig.hpp"
#include "ecls/metrics.hpp"

namespace ecls {

struct LoadedRun {
  std::filesystem::path dir;
  RunConfig config;
  RunSummary stored;
  RunSummary recomputed;
  std::vector<EvalSnapshot> snapshots;
  TrainPresenceLog presence;
};

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("missing " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt " + p.string() + ": " + e.what());
  }
}

/// Reads a run directory and recomputes its summary from the logs.
inline LoadedRun load_run(const std::filesystem::path& dir) {
  LoadedRun r;
  r.dir = dir;
  r.config = RunConfig::from_kv(KeyValues::load(dir / "config.txt"));
  try {
    r.stored = summary_from_json(read_json(dir / "summary.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt " + (dir / "summary.json").string() + ": " + e.what());
  }
  std::ifstream in(dir / "snapshots.jsonl");
  if (!in) throw IoError("missing " + (dir / "snapshots.jsonl").string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      r.snapshots.push_back(snapshot_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw SchemaError(line_no, "snapshots.jsonl: " + std::string(e.what()));
    }
  }
  if (r.snapshots.empty()) throw IoError(dir.string() + ": snapshot log is empty");
  r.presence = presence_from_json(read_json(dir / "presence.json"));
  r.recomputed = r.stored;
  summarize(r.recomputed, r.snapshots, r.presence, r.config.forget_bins);
  return r;
}

/// Run directories under `root` (including root itself), sorted by path.
inline std::vector<std::filesystem::path> find_runs(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::exists(root)) throw IoError("no such directory " + root.string());
  if (std::filesystem::exists(root / "summary.json")) out.push_back(root);
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "summary.json" && e.path().parent_path() != root)
      out.push_back(e.path().parent_path());
  std::sort(out.begin(), out.end());
  return out;
}

inline bool summaries_match(const RunSummary& a, const RunSummary& b, double tol = 1e-12) {
  if (std::abs(a.fap - b.fap) > tol || std::abs(a.cap - b.cap) > tol || std::abs(a.f - b.f) > tol) return false;
  if (a.per_class_f.size() != b.per_class_f.size()) return false;
  for (const auto& [c, v] : a.per_class_f) {
    auto it = b.per_class_f.find(c);
    if (it == b.per_class_f.end() || std::abs(it->second - v) > tol) return false;
  }
  return true;
}

struct ReportResult {
  std::size_t runs = 0;
  std::size_t timeseries_rows = 0;
  std::size_t bar_rows = 0;
  std::vector<std::string> mismatched;  // runs whose stored summary disagrees with the logs
};

namespace detail {

inline std::string svg_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette[i % 10];
}

inline std::string timeseries_svg(const LoadedRun& run) {
  const double W = 640, H = 360, L = 50, B = 30, T = 20, R = 20;
  std::int64_t tmax = 1;
  for (const auto& s : run.snapshots) tmax = std::max(tmax, s.t);
  std::map<int, std::vector<std::pair<double, double>>> lines;
  for (const auto& s : run.snapshots)
    for (const auto& [c, ap] : s.per_class_ap) lines[c].emplace_back(static_cast<double>(s.t), ap);
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << L << "\" y=\"14\" font-size=\"12\">AP50 per class vs step, " << run.stored.method
    << " cost " << fmt(run.stored.annotation_cost) << "</text>\n";
  std::size_t i = 0;
  for (const auto& [c, pts] : lines) {
    o << "<polyline fill=\"none\" stroke=\"" << svg_color(i++) << "\" points=\"";
    for (const auto& [t, ap] : pts)
      o << L + (W - L - R) * t / static_cast<double>(tmax) << "," << (H - B) - (H - B - T) * ap << " ";
    o << "\"><title>class " << c << "</title></polyline>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::string bars_svg(const std::vector<std::tuple<std::string, double, double>>& fap_rows) {
  // fap_rows: (method, cost, mean FAP)
  std::vector<std::string> methods;
  std::vector<double> costs;
  for (const auto& [m, c, v] : fap_rows) {
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
    if (std::find(costs.begin(), costs.end(), c) == costs.end()) costs.push_back(c);
  }
  std::sort(costs.begin(), costs.end());
  const double W = 640, H = 360, L = 50, B = 40, T = 20;
  const double group = (W - L - 20) / std::max<std::size_t>(1, costs.size());
  const double bar = group * 0.8 / std::max<std::size_t>(1, methods.size());
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << L << "\" y=\"14\" font-size=\"12\">FAP vs annotation cost</text>\n";
  for (const auto& [m, c, v] : fap_rows) {
    const auto gi = std::find(costs.begin(), costs.end(), c) - costs.begin();
    const auto mi = std::find(methods.begin(), methods.end(), m) - methods.begin();
    const double x = L + gi * group + 0.1 * group + mi * bar;
    const double h = (H - B - T) * std::clamp(v, 0.0, 1.0);
    o << "<rect x=\"" << x << "\" y=\"" << H - B - h << "\" width=\"" << bar * 0.95 << "\" height=\"" << h
      << "\" fill=\"" << svg_color(static_cast<std::size_t>(mi)) << "\"><title>" << m << " " << fmt(c) << ": "
      << fmt(v) << "</title></rect>\n";
  }
  for (std::size_t gi = 0; gi < costs.size(); ++gi)
    o << "<text x=\"" << L + gi * group + 0.3 * group << "\" y=\"" << H - 20 << "\" font-size=\"11\">"
      << fmt(costs[gi] * 100) << "%</text>\n";
  for (std::size_t mi = 0; mi < methods.size(); ++mi)
    o << "<text x=\"" << W - 150 << "\" y=\"" << 30 + 14 * mi << "\" font-size=\"11\" fill=\"" << svg_color(mi)
      << "\">" << methods[mi] << "</text>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace detail

/// Writes timeseries.csv, bars.csv (metric, method, cost, mean, sd, n) and,
/// when `svg` is set, bars.svg plus one timeseries_<k>.svg per run.
inline ReportResult report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir,
                           bool svg = true) {
  if (run_dirs.empty()) throw IoError("report: no completed runs found");
  std::vector<LoadedRun> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));
  ReportResult res;
  res.runs = runs.size();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());

  std::string ts = "run,method,annotation_cost,seed,eval_index,t,class,ap\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    if (!summaries_match(r.stored, r.recomputed)) res.mismatched.push_back(r.dir.string());
    for (const auto& s : r.snapshots)
      for (const auto& [c, ap] : s.per_class_ap) {
        ts += std::to_string(i) + "," + r.stored.method + "," + fmt(r.stored.annotation_cost) + "," +
              std::to_string(r.stored.seed) + "," + std::to_string(s.eval_index) + "," + std::to_string(s.t) + "," +
              std::to_string(c) + "," + fmt(ap) + "\n";
        ++res.timeseries_rows;
      }
    if (svg) write_text(out_dir / ("timeseries_" + std::to_string(i) + ".svg"), detail::timeseries_svg(r));
  }
  write_text(out_dir / "timeseries.csv", ts);

  std::map<std::pair<std::string, double>, std::vector<const RunSummary*>> groups;
  for (const auto& r : runs) groups[{r.stored.method, r.stored.annotation_cost}].push_back(&r.stored);
  std::string bars = "metric,method,annotation_cost,mean,sd,n\n";
  std::vector<std::tuple<std::string, double, double>> fap_rows;
  for (const char* metric : {"FAP", "CAP", "F"})
    for (const auto& [key, members] : groups) {
      std::vector<double> v;
      for (const RunSummary* s : members)
        v.push_back(metric[0] == 'F' && metric[1] == 'A' ? s->fap : metric[0] == 'C' ? s->cap : s->f);
      double mean = 0, sd = 0;
      mean_sd(v, mean, sd);
      bars += std::string(metric) + "," + key.first + "," + fmt(key.second) + "," + fmt(mean) + "," + fmt(sd) + "," +
              std::to_string(v.size()) + "\n";
      ++res.bar_rows;
      if (std::string(metric) == "FAP") fap_rows.emplace_back(key.first, key.second, mean);
    }
  write_text(out_dir / "bars.csv", bars);
  if (svg) write_text(out_dir / "bars.svg", detail::bars_svg(fap_rows));
  return res;
}

}  // namespace ecls
