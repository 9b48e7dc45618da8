#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ecls/errors.hpp"
#include "ecls/harness.hpp"
#include "ecls/kvconfig.hpp"
#include "ecls/report.hpp"
#include "ecls/stream_io.hpp"
#include "ecls/stream_sim.hpp"
#include "ecls/testing/validation.hpp"

namespace {

ecls::KeyValues load_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
  ecls::KeyValues kv = path.empty() ? ecls::KeyValues{} : ecls::KeyValues::load(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ecls::ConfigError("--set expects key=value, got '" + o + "'");
    kv.set(ecls::trim(o.substr(0, eq)), ecls::trim(o.substr(eq + 1)));
  }
  return kv;
}

int gen_stream(const std::string& config, const std::vector<std::string>& overrides, const std::string& out,
               double cost) {
  const auto cfg = ecls::RunConfig::from_kv(load_with_overrides(config, overrides));
  cfg.stream.validate();
  const auto scenario = ecls::generate_scenario(cfg.stream);
  ecls::StreamState state(scenario, cfg.mask_seed);
  std::vector<ecls::FrameRecord> frames;
  while (auto b = state.next_batch(cost)) {
    for (auto& f : b->train_frames) frames.push_back(std::move(f));
    frames.push_back(std::move(b->test_frame));
  }
  ecls::write_stream(frames, out);
  std::cout << "wrote " << frames.size() << " frames to " << out << "\n";
  return 0;
}

int run(const std::string& config, const std::vector<std::string>& overrides, const std::string& out) {
  auto kv = load_with_overrides(config, overrides);
  if (!out.empty()) kv.set("output_dir", out);
  const auto cfg = ecls::RunConfig::from_kv(kv);
  const auto res = ecls::run_experiment(cfg);
  const auto& s = res.summary;
  std::cout << ecls::summary_csv_header() << "\n" << ecls::summary_csv_row(s) << "\n";
  std::cout << "steps " << s.steps << ", wall " << s.wall_seconds << " s, config " << s.config_hash << "\n";
  return 0;
}

int grid(const std::string& path, const std::string& out, int jobs) {
  auto spec = ecls::GridSpec::from_kv(ecls::KeyValues::load(path));
  if (jobs > 0) spec.jobs = jobs;
  const auto res = ecls::run_grid(spec, out);
  std::cout << "cell,n,failures,FAP,CAP,F\n";
  for (const auto& c : res.table)
    std::cout << c.cell << "," << c.n << "," << c.failures << "," << ecls::fmt(c.fap_mean) << "+-"
              << ecls::fmt(c.fap_sd) << "," << ecls::fmt(c.cap_mean) << "+-" << ecls::fmt(c.cap_sd) << ","
              << ecls::fmt(c.f_mean) << "+-" << ecls::fmt(c.f_sd) << "\n";
  return 0;
}

int report(const std::vector<std::string>& dirs, const std::string& out, bool no_svg) {
  std::vector<std::filesystem::path> runs;
  for (const auto& d : dirs)
    for (auto& r : ecls::find_runs(d)) runs.push_back(r);
  const auto res = ecls::report(runs, out, !no_svg);
  std::cout << res.runs << " runs, " << res.timeseries_rows << " time-series rows, " << res.bar_rows
            << " bar rows\n";
  for (const auto& m : res.mismatched) std::cerr << "summary does not match logs: " << m << "\n";
  return res.mismatched.empty() ? 0 : static_cast<int>(ecls::ExitCode::io);
}

int validate(bool quick) {
  bool ok = true;
  for (const auto& r : ecls::testing::run_validation(quick)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : static_cast<int>(ecls::ExitCode::numerical);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fast/slow complementary learners for label-efficient online continual detection"};
  app.footer(std::string("\n") + ecls::config_keys_help() +
             "\nGrid files take the run keys above plus comma-separated axes:\n"
             "  grid.methods grid.costs grid.ema grid.pl grid.augment grid.taus grid.lambdas\n"
             "  grid.policies grid.capacities grid.replay_sizes grid.seeds grid.jobs\n"
             "\nExit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.");
  app.require_subcommand(1);

  std::string config, out;
  std::vector<std::string> overrides;
  double cost = 1.0;
  auto* gen = app.add_subcommand("gen-stream", "Render a scenario to a JSONL frame stream");
  gen->add_option("config", config, "run/stream config file")->check(CLI::ExistingFile);
  gen->add_option("--set", overrides, "override a config key (key=value)");
  gen->add_option("-o,--out", out, "output JSONL path")->required();
  gen->add_option("--cost", cost, "annotation cost used to mark labeled frames");

  std::string run_config, run_out;
  std::vector<std::string> run_overrides;
  auto* runc = app.add_subcommand("run", "Run one experiment from a config file");
  runc->add_option("config", run_config, "run config file")->check(CLI::ExistingFile);
  runc->add_option("--set", run_overrides, "override a config key (key=value)");
  runc->add_option("-o,--out", run_out, "artifact directory (overrides output_dir)");

  std::string grid_file, grid_out;
  int jobs = 0;
  auto* gridc = app.add_subcommand("grid", "Run a grid of experiments and merge results");
  gridc->add_option("grid", grid_file, "grid file")->required()->check(CLI::ExistingFile);
  gridc->add_option("-o,--out", grid_out, "output directory")->required();
  gridc->add_option("-j,--jobs", jobs, "parallel runs");

  std::vector<std::string> report_dirs;
  std::string report_out;
  bool no_svg = false;
  auto* rep = app.add_subcommand("report", "Build plot-ready CSV/SVG from run artifacts");
  rep->add_option("dirs", report_dirs, "run or grid directories")->required();
  rep->add_option("-o,--out", report_out, "output directory")->required();
  rep->add_flag("--no-svg", no_svg, "skip SVG rendering");

  bool quick = false;
  auto* val = app.add_subcommand("validate", "Run the oracle and invariant self-checks");
  val->add_flag("--quick", quick, "fewer random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ecls::ExitCode::config);
  }

  try {
    if (*gen) return gen_stream(config, overrides, out, cost);
    if (*runc) return run(run_config, run_overrides, run_out);
    if (*gridc) return grid(grid_file, grid_out, jobs);
    if (*rep) return report(report_dirs, report_out, no_svg);
    if (*val) return validate(quick);
  } catch (const ecls::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return static_cast<int>(ecls::ExitCode::config);
  } catch (const ecls::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return static_cast<int>(ecls::ExitCode::numerical);
  } catch (const ecls::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return static_cast<int>(ecls::ExitCode::io);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return static_cast<int>(ecls::ExitCode::io);
  }
  return 0;
}
