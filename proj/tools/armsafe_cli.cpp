// armsafe: run scenarios, compare against the baseline planner, benchmark the
// shooting methods and run the self-checks.
//
// Exit codes: 0 success, 1 configuration or input error, 2 planner abort,
// 3 validation failure.

#include "armsafe/sim.hpp"
#include "armsafe/validate.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace armsafe;

namespace {

constexpr int kOk = 0, kConfig = 1, kAbort = 2, kValidation = 3;

const std::vector<std::string> kBaseline = {"planner.relaxation=false", "planner.Q_rep=0"};

/// A path to a scenario file, or the stem of a bundled one.
Scenario resolve(const std::string& arg, const std::vector<std::string>& overrides) {
  if (fs::exists(arg)) return load_scenario(arg, overrides);
  const bool bare = arg.find('/') == std::string::npos && fs::path(arg).extension().empty();
  if (bare && fs::exists(data_dir() / "scenarios" / (arg + ".yaml"))) return bundled_scenario(arg, overrides);
  throw ConfigError(arg + ": no such scenario file");
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
  if (!f) throw ConfigError(path.string() + ": cannot write");
}

struct Common {
  std::string out;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-o,--output", c.out, "Output directory");
  cmd->add_option("-s,--set", c.overrides, "Config override section.key=value (repeatable)");
  cmd->add_flag("-q,--quiet", c.quiet, "Print nothing on success");
}

int finish_run(RunOutput& out, const Common& c, const fs::path& dir) {
  if (!dir.empty()) {
    write_outputs(out, dir);
    out.report.log_dir = dir.string();
  }
  if (!c.quiet) std::cout << report_text(out.report);
  if (out.report.aborted) {
    std::cerr << "planner aborted: " << out.report.abort_message << "\n";
    return kAbort;
  }
  return kOk;
}

int cmd_run(const std::string& scenario, bool baseline, const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (baseline) ov.insert(ov.begin(), kBaseline.begin(), kBaseline.end());
  const Scenario sc = resolve(scenario, ov);
  RunOutput out = run(sc);
  return finish_run(out, c, c.out);
}

int cmd_compare(const std::vector<std::string>& scenarios, const Common& c) {
  // One scenario: proposed against the baseline on the same scene.
  // Two: the first against the second, which must describe the same scene.
  const Scenario a = resolve(scenarios[0], c.overrides);
  std::vector<std::string> ov_b = c.overrides;
  if (scenarios.size() == 1) ov_b.insert(ov_b.end(), kBaseline.begin(), kBaseline.end());
  const Scenario b = resolve(scenarios.size() == 1 ? scenarios[0] : scenarios[1], ov_b);
  if (scenario_fingerprint(a) != scenario_fingerprint(b))
    throw SimError("cannot compare runs of different scenes ('" + a.name + "' vs '" + b.name + "')");

  RunOutput ra = run(a), rb = run(b);
  const RunDelta d = compare_runs(ra.report, rb.report);
  const std::string table = compare_csv(ra.report, rb.report, d);
  const char* na = scenarios.size() == 1 ? "proposed" : "a";
  const char* nb = scenarios.size() == 1 ? "baseline" : "b";
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_outputs(ra, fs::path(c.out) / na);
    write_outputs(rb, fs::path(c.out) / nb);
    write_file(fs::path(c.out) / "compare.csv", table);
  }
  if (!c.quiet) std::cout << table;
  for (const RunOutput* r : {&ra, &rb})
    if (r->report.aborted) {
      std::cerr << "planner aborted in '" << r->report.scenario << "': " << r->report.abort_message << "\n";
      return kAbort;
    }
  return kOk;
}

std::vector<int> parse_horizons(const std::string& text) {
  std::vector<int> hs;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || v < 1) throw ConfigError("--horizons: '" + item + "' is not a positive integer");
    hs.push_back(v);
  }
  if (hs.empty()) throw ConfigError("--horizons: empty list");
  return hs;
}

int cmd_bench(const std::string& scenario, const std::string& horizons, const std::string& method,
              const Common& c) {
  const Scenario sc = resolve(scenario, c.overrides);
  std::vector<Shooting> methods;
  if (method == "both" || method == "multiple") methods.push_back(Shooting::multiple);
  if (method == "both" || method == "single") methods.push_back(Shooting::single);
  std::vector<BenchRow> rows;
  try {
    rows = bench(sc, parse_horizons(horizons), methods);
  } catch (const SimError& e) {
    std::cerr << e.what() << "\n";
    return kAbort;
  }
  const std::string table = bench_csv(rows);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_file(fs::path(c.out) / "bench.csv", table);
  }
  if (!c.quiet) std::cout << table;
  return kOk;
}

int cmd_validate(const ValidateOptions& opt, const Common& c) {
  const ValidationReport rep = validate(opt);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_file(fs::path(c.out) / "validate.txt", rep.text());
  }
  if (!c.quiet || !rep.ok()) std::cout << rep.text();
  return rep.ok() ? kOk : kValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Safety-aware planning and control of redundant manipulators"};
  app.require_subcommand(1, 1);

  Common run_c, cmp_c, bench_c, val_c;
  std::string run_scenario, bench_scenario, horizons = "10,30,50", method = "both";
  std::vector<std::string> cmp_scenarios;
  bool run_baseline = false;
  ValidateOptions vopt;

  CLI::App* run_cmd = app.add_subcommand("run", "Simulate one scenario");
  run_cmd->add_option("scenario", run_scenario, "Scenario file or bundled name")->required();
  run_cmd->add_flag("--baseline", run_baseline, "Use the baseline planner (no relaxation, no repulsion)");
  add_common(run_cmd, run_c);

  CLI::App* cmp_cmd = app.add_subcommand("compare", "Compare two runs of the same scene");
  cmp_cmd->add_option("scenarios", cmp_scenarios,
                      "One scenario (proposed vs baseline) or two variants of one scene")
      ->required()
      ->expected(1, 2);
  add_common(cmp_cmd, cmp_c);

  CLI::App* bench_cmd = app.add_subcommand("bench", "Planner solve times per shooting method and horizon");
  bench_cmd->add_option("scenario", bench_scenario, "Scenario file or bundled name")->default_val("bench");
  bench_cmd->add_option("--horizons", horizons, "Comma-separated horizons")->default_val("10,30,50");
  bench_cmd->add_option("--method", method, "multiple, single or both")
      ->check(CLI::IsMember({"multiple", "single", "both"}))
      ->default_val("both");
  add_common(bench_cmd, bench_c);

  CLI::App* val_cmd = app.add_subcommand("validate", "Model, geometry and solver self-checks");
  val_cmd->add_option("--samples", vopt.samples, "Random configurations per model")->check(CLI::PositiveNumber);
  val_cmd->add_option("--seed", vopt.seed, "Sampling seed");
  val_cmd->add_flag("--flip-gravity-sign", vopt.flip_gravity_sign, "Fault injection for testing the checks");
  add_common(val_cmd, val_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*run_cmd) return cmd_run(run_scenario, run_baseline, run_c);
    if (*cmp_cmd) return cmd_compare(cmp_scenarios, cmp_c);
    if (*bench_cmd) return cmd_bench(bench_scenario, horizons, method, bench_c);
    if (*val_cmd) return cmd_validate(vopt, val_c);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const SimError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kConfig;
}
