// ccmpc: run closed-loop rain scenarios and validate network descriptions.
//
//   ccmpc run --scenario 3.5:210 --controllers det,cc:0.9
//   ccmpc run --grid default --controllers det,cc:0.9,cc:0.8,cc:0.7
//   ccmpc validate --network data/astlingen.cfg --check-astlingen
//
// Exit codes: 0 ok, 1 validation mismatch, 2 invalid configuration,
// 3 solver failure (artifacts of the completed steps are still written).

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ccmpc/network_config.hpp"
#include "ccmpc/simulator.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace ccmpc;

namespace {

constexpr const char* kVersion = "0.1.0";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double to_number(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError(what + ": '" + s + "' is not a number");
  return v;
}

ControllerSpec parse_controller(const std::string& tok) {
  if (tok == "det") return ControllerSpec::deterministic();
  const auto parts = split(tok, ':');
  if (parts.size() < 2 || parts.size() > 3 || parts[0] != "cc")
    throw ConfigError("controller '" + tok + "' must be det or cc:<alpha>[:<gamma>]");
  const double a = to_number(parts[1], "alpha");
  const double g = parts.size() == 3 ? to_number(parts[2], "gamma") : a;
  for (double p : {a, g})
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("controller '" + tok + "': probability levels must lie in (0, 1)");
  return ControllerSpec::chance(a, g);
}

/// "default" or "I0:I1:dI,D0:D1:dD".
GridSpec parse_grid(const std::string& text) {
  GridSpec g;
  if (text == "default") return g;
  const auto axes = split(text, ',');
  if (axes.size() != 2) throw ConfigError("grid must be 'default' or 'I0:I1:dI,D0:D1:dD'");
  const auto i = split(axes[0], ':'), d = split(axes[1], ':');
  if (i.size() != 3 || d.size() != 3) throw ConfigError("grid must be 'default' or 'I0:I1:dI,D0:D1:dD'");
  g.intensity_min = to_number(i[0], "grid");
  g.intensity_max = to_number(i[1], "grid");
  g.intensity_step = to_number(i[2], "grid");
  g.duration_min = to_number(d[0], "grid");
  g.duration_max = to_number(d[1], "grid");
  g.duration_step = to_number(d[2], "grid");
  return g;
}

/// Re-samples the delay chains for a new step length, keeping travel times.
NetworkModel with_dt(const NetworkModel& m, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("--dt must be positive");
  auto elements = m.elements();
  for (auto& e : elements) {
    if (e.kind != ElementKind::delay_chain) continue;
    const double regs = e.chain_length * m.dt() / dt;
    const double r = std::round(regs);
    if (r < 1.0 || std::abs(regs - r) > 1e-9)
      throw ConfigError("--dt " + detail::format_number(dt) + " does not divide the travel time of " + e.id + " (" +
                        detail::format_number(e.chain_length * m.dt()) + " min)");
    e.chain_length = static_cast<int>(r);
  }
  return NetworkModel::build(m.catchments(), elements, dt, m.wwtp_control());
}

/// CSV content with the named columns blanked; used for the timing-free hash.
std::string blank_columns(const std::string& csv, const std::set<std::string>& names) {
  std::istringstream in(csv);
  std::string line, out;
  std::vector<bool> drop;
  bool header = true;
  while (std::getline(in, line)) {
    const auto cells = split(line, ',');
    if (header) {
      for (const auto& c : cells) drop.push_back(names.count(c) > 0);
      header = false;
      out += line + "\n";
      continue;
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      if (i >= drop.size() || !drop[i]) out += cells[i];
    }
    out += "\n";
  }
  return out;
}

const std::set<std::string> kTimingColumns = {"solve_s", "max_solve_s", "mean_solve_s", "max_time_diff_s",
                                              "mean_time_diff_s"};

class ArtifactWriter {
 public:
  explicit ArtifactWriter(fs::path root) : root_(std::move(root)) {}

  void write(const std::string& rel, const std::string& content, const std::string& timing_free) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << content;
    if (!f) throw std::runtime_error("write failed for " + p.string());
    entries_.push_back({{"path", rel},
                        {"bytes", content.size()},
                        {"sha256", sha256_hex(content)},
                        {"sha256_without_timing", sha256_hex(timing_free)}});
  }
  void write_csv(const std::string& rel, const std::string& content) {
    write(rel, content, blank_columns(content, kTimingColumns));
  }
  void write_json(const std::string& rel, const json& doc) {
    json stripped = doc;
    stripped.erase("timing");
    write(rel, doc.dump(2) + "\n", stripped.dump(2) + "\n");
  }

  const json& entries() const { return entries_; }
  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
  json entries_ = json::array();
};

json metrics_json(const Metrics& m, const NetworkModel& model) {
  json per_weir = json::object();
  for (std::size_t w = 0; w < model.weir_count(); ++w)
    per_weir[model.element(model.weirs()[w]).id] = m.overflow_per_weir[static_cast<Eigen::Index>(w)];
  return {{"steps", m.steps},
          {"overflow_total_m3", m.overflow_total},
          {"overflow_m3", per_weir},
          {"wwtp_volume_m3", m.wwtp_volume},
          {"rain_volume_m3", m.rain_volume},
          {"storage_change_m3", m.storage_change},
          {"in_transit_change_m3", m.in_transit_change},
          {"mass_balance_error", m.mass_balance_error},
          {"cost", m.cost},
          {"objective_sum", m.objective_sum},
          {"max_iterations", m.max_iterations},
          {"max_kkt_residual", m.max_residual},
          {"failed", m.failed}};
}

std::string versions_compiler() {
#if defined(__clang__)
  return std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  return std::string("gcc ") + __VERSION__;
#else
  return "unknown";
#endif
}

struct RunArgs {
  std::string network;
  std::string grid;
  std::vector<std::string> scenarios;
  std::string controllers = "det,cc:0.9";
  std::uint64_t seed = 1;
  bool plant_noise = false;
  std::string out;
  int horizon = 20;
  double dt = 0.0;
  unsigned threads = 0;
  double lead_in = 30.0;
  double tail = 300.0;
  int max_iter = 100;
  bool quiet = false;
};

int cmd_run(const RunArgs& a) {
  // Everything that can be rejected is checked before the output directory is touched.
  NetworkModel model = [&] {
    try {
      return load_network_file(a.network);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }();
  if (a.dt < 0.0) throw ConfigError("--dt must be positive");
  if (a.dt > 0.0 && a.dt != model.dt()) {
    try {
      model = with_dt(model, a.dt);
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
  }
  if (a.horizon < 1) throw ConfigError("--horizon must be at least 1");
  if (a.max_iter < 1) throw ConfigError("--max-iter must be at least 1");
  if (!(a.lead_in >= 0.0) || !(a.tail >= 0.0)) throw ConfigError("--lead-in and --tail must be non-negative");

  std::vector<RainScenario> scenarios;
  try {
    if (!a.grid.empty()) {
      GridSpec g = parse_grid(a.grid);
      g.lead_in = a.lead_in;
      g.tail = a.tail;
      scenarios = generate_scenario_grid(g);
    }
    for (const auto& s : a.scenarios) {
      const auto parts = split(s, ':');
      if (parts.size() != 2) throw ConfigError("--scenario expects I:D, got '" + s + "'");
      RainScenario sc;
      sc.intensity = to_number(parts[0], "intensity");
      sc.duration = to_number(parts[1], "duration");
      sc.start = a.lead_in;
      sc.tail = a.tail;
      sc.validate();
      scenarios.push_back(sc);
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (scenarios.empty()) throw ConfigError("nothing to run: give --grid or --scenario");
  {
    std::set<std::string> keys;
    for (const auto& sc : scenarios)
      if (!keys.insert(sc.key()).second) throw ConfigError("scenario " + sc.key() + " given twice");
  }

  std::vector<ControllerSpec> controllers;
  std::set<std::string> labels;
  for (const auto& tok : split(a.controllers, ',')) {
    controllers.push_back(parse_controller(tok));
    if (!labels.insert(controllers.back().label()).second) throw ConfigError("controller '" + tok + "' given twice");
  }
  if (controllers.empty()) throw ConfigError("--controllers is empty");

  RunOptions opt;
  opt.controller.horizon = a.horizon;
  opt.solver.max_iterations = a.max_iter;
  opt.plant_noise = a.plant_noise;
  opt.seed = a.seed;
  try {
    opt.controller.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  json inputs = {{"network", serialize_network(model)},
                 {"scenarios", json::array()},
                 {"controllers", json::array()},
                 {"seed", a.seed},
                 {"plant_noise", a.plant_noise},
                 {"horizon", a.horizon},
                 {"dt_min", model.dt()},
                 {"max_iterations", a.max_iter}};
  for (const auto& sc : scenarios)
    inputs["scenarios"].push_back(
        {{"intensity", sc.intensity}, {"duration", sc.duration}, {"lead_in", sc.start}, {"tail", sc.tail}});
  for (const auto& c : controllers) inputs["controllers"].push_back(c.label());

  ArtifactWriter out(a.out);
  fs::create_directories(out.root());

  std::size_t done = 0;
  const std::size_t total = scenarios.size() * controllers.size();
  const auto runs = run_grid(model, scenarios, controllers, opt, a.threads, [&](const GridRun& r) {
    ++done;
    if (!a.quiet)
      std::fprintf(stderr, "[%zu/%zu] %s %s overflow=%.1f m3 wwtp=%.1f m3%s\n", done, total,
                   r.metrics.scenario.c_str(), r.metrics.controller.c_str(), r.metrics.overflow_total,
                   r.metrics.wwtp_volume, r.trace.failed ? " FAILED" : "");
  });

  std::ostringstream metrics_csv;
  write_metrics_header(metrics_csv, model);
  json failures = json::array();
  for (const auto& r : runs) {
    const auto& sc = scenarios[r.scenario_index];
    const std::string stem = r.trace.scenario + "__" + r.trace.controller;
    std::ostringstream trace_csv;
    write_trace_csv(trace_csv, model, r.trace);
    out.write_csv("traces/" + stem + ".csv", trace_csv.str());
    if (!r.trace.flows.empty()) write_metrics_row(metrics_csv, sc, r.metrics);
    const auto& spec = controllers[r.controller_index];
    json summary = {{"scenario", r.trace.scenario},
                    {"intensity_um_s", sc.intensity},
                    {"duration_min", sc.duration},
                    {"controller", r.trace.controller},
                    {"alpha", spec.kind == ControllerKind::deterministic ? json(nullptr) : json(spec.alpha)},
                    {"gamma", spec.kind == ControllerKind::deterministic ? json(nullptr) : json(spec.gamma)},
                    {"seed", a.seed},
                    {"metrics", r.trace.flows.empty() ? json(nullptr) : metrics_json(r.metrics, model)},
                    {"error", r.trace.error},
                    {"timing",
                     {{"max_solve_s", r.metrics.max_solve_seconds}, {"mean_solve_s", r.metrics.mean_solve_seconds}}}};
    out.write_json("summaries/" + stem + ".json", summary);
    if (r.trace.failed) failures.push_back({{"run", stem}, {"error", r.trace.error}});
  }
  out.write_csv("metrics.csv", metrics_csv.str());

  // Every non-deterministic controller against the deterministic baseline.
  std::size_t baseline = controllers.size();
  for (std::size_t c = 0; c < controllers.size(); ++c)
    if (controllers[c].kind == ControllerKind::deterministic) baseline = c;
  if (baseline < controllers.size() && controllers.size() > 1) {
    std::ostringstream cmp;
    write_comparison_header(cmp);
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
      const auto& base = runs[s * controllers.size() + baseline];
      for (std::size_t c = 0; c < controllers.size(); ++c) {
        const auto& cand = runs[s * controllers.size() + c];
        if (c == baseline || base.trace.flows.empty() || cand.trace.flows.empty()) continue;
        write_comparison_row(cmp, scenarios[s], compare_runs(base.metrics, cand.metrics));
      }
    }
    out.write_csv("comparison.csv", cmp.str());
  }

  const std::string canonical_inputs = inputs.dump();
  json manifest = {{"tool", "ccmpc"},
                   {"version", kVersion},
                   {"versions",
                    {{"ccmpc", kVersion},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                     {"cli11", CLI11_VERSION},
                     {"compiler", versions_compiler()}}},
                   {"config_sha256", sha256_hex(canonical_inputs)},
                   {"seed", a.seed},
                   {"network_file", a.network},
                   {"inputs", inputs},
                   {"runs", total},
                   {"failed_runs", failures},
                   {"artifacts", out.entries()}};
  std::ofstream mf(out.root() / "manifest.json");
  mf << manifest.dump(2) << "\n";
  if (!mf) throw std::runtime_error("cannot write manifest");

  if (!failures.empty()) {
    for (const auto& f : failures)
      std::fprintf(stderr, "solver failure in %s: %s\n", f["run"].get<std::string>().c_str(),
                   f["error"].get<std::string>().c_str());
    return 3;
  }
  if (!a.quiet) std::fprintf(stderr, "wrote %zu artifacts to %s\n", out.entries().size(), out.root().c_str());
  return 0;
}

int cmd_validate(const std::string& path, bool check_astlingen) {
  json report = {{"network", path}};
  NetworkModel model = [&] {
    try {
      return load_network_file(path);
    } catch (const ParseError& e) {
      report["status"] = "parse_error";
      report["line"] = e.line();
      report["message"] = e.what();
      std::cout << report.dump(2) << "\n";
      throw ConfigError(path + ":" + std::to_string(e.line()) + ": " + e.what());
    } catch (const ValidationError& e) {
      report["status"] = "invalid";
      report["element"] = e.element();
      report["message"] = e.what();
      std::cout << report.dump(2) << "\n";
      throw ConfigError(path + ": " + e.what());
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }();
  report["dt_min"] = model.dt();
  report["tanks"] = model.tank_count();
  report["pipes"] = model.pipe_count();
  report["delay_chains"] = model.chain_count();
  report["catchments"] = model.catchment_count();
  int rc = 0;
  if (check_astlingen) {
    json issues = json::array();
    for (const auto& m : check_astlingen_routing(model)) issues.push_back({{"element", m.element}, {"detail", m.detail}});
    report["astlingen_routing"] = issues.empty() ? "match" : "mismatch";
    report["mismatches"] = issues;
    if (!issues.empty()) rc = 1;
  }
  report["status"] = rc == 0 ? "ok" : "mismatch";
  std::cout << report.dump(2) << "\n";
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chance-constrained and deterministic MPC for sewer networks with weirs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  const char* env_out = std::getenv("CCMPC_OUT_DIR");
  RunArgs ra;
  ra.network = CCMPC_DATA_DIR "/astlingen.cfg";
  ra.out = env_out && *env_out ? env_out : "ccmpc_out";

  auto* run = app.add_subcommand("run", "Simulate rain scenarios in closed loop and write traces and reports");
  run->add_option("--network", ra.network, "Network description")->capture_default_str();
  auto* grid = run->add_option("--grid", ra.grid, "'default' (0.5..6 um/s x 30..300 min) or 'I0:I1:dI,D0:D1:dD'");
  run->add_option("--scenario", ra.scenarios, "Single block rain I:D (um/s : min); repeatable");
  run->add_option("--controllers", ra.controllers, "Comma list of det and cc:<alpha>[:<gamma>]")->capture_default_str();
  run->add_option("--seed", ra.seed, "Seed of the plant-noise streams")->capture_default_str();
  run->add_flag("--plant-noise", ra.plant_noise, "Sample truncated-Gaussian plant rain around the nominal block");
  run->add_option("--out", ra.out, "Output directory (default from CCMPC_OUT_DIR, else ./ccmpc_out)")
      ->capture_default_str();
  run->add_option("--horizon", ra.horizon, "Prediction horizon [steps]")->capture_default_str();
  run->add_option("--dt", ra.dt, "Sample time [min]; delay chains are re-sampled to keep travel times");
  run->add_option("--threads", ra.threads, "Worker threads (0 = all cores)")->capture_default_str();
  run->add_option("--lead-in", ra.lead_in, "Dry time before the rain [min]")->capture_default_str();
  run->add_option("--tail", ra.tail, "Simulated time after the rain [min]")->capture_default_str();
  run->add_option("--max-iter", ra.max_iter, "Solver iteration limit")->capture_default_str();
  run->add_flag("--quiet", ra.quiet, "No progress output");
  (void)grid;

  std::string vpath = ra.network;
  bool check = false;
  auto* validate = app.add_subcommand("validate", "Load a network description and report on it");
  validate->add_option("--network", vpath, "Network description")->capture_default_str();
  validate->add_flag("--check-astlingen", check, "Compare the routing with the Astlingen reference");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(ra);
    return cmd_validate(vpath, check);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "ccmpc: invalid configuration: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ccmpc: %s\n", e.what());
    return 3;
  }
}
