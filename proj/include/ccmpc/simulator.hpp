#pragma once

// Closed-loop experiments: rain scenarios, receding-horizon runs against the
// plant, per-run metrics and controller comparisons.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ccmpc/controller.hpp"
#include "ccmpc/network.hpp"
#include "ccmpc/stochastics.hpp"

namespace ccmpc {

/// Block rain: `intensity` on every catchment (times `scaling`) from `start`
/// for `duration` minutes, dry otherwise. The run lasts start + duration + tail.
struct RainScenario {
  double intensity = 0.0;  ///< [um/s]
  double duration = 0.0;   ///< [min]
  double start = 30.0;     ///< dry lead-in [min]
  double tail = 300.0;     ///< simulated time after the rain ends [min]
  Eigen::VectorXd scaling;  ///< per catchment; empty means uniform 1

  double total_minutes() const noexcept { return start + duration + tail; }

  /// Stable identity, e.g. "I3.5_D210".
  std::string key() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "I%g_D%g", intensity, duration);
    return buf;
  }

  void validate() const {
    if (!(intensity >= 0.0) || !std::isfinite(intensity)) throw std::invalid_argument("rain intensity must be >= 0");
    if (!(duration > 0.0) || !std::isfinite(duration)) throw std::invalid_argument("rain duration must be positive");
    if (!(start >= 0.0) || !(tail >= 0.0)) throw std::invalid_argument("lead-in and tail must be non-negative");
    if (scaling.size() > 0 && (scaling.array() < 0.0).any())
      throw std::invalid_argument("catchment scaling must be non-negative");
  }
};

struct GridSpec {
  double intensity_min = 0.5, intensity_max = 6.0, intensity_step = 0.5;
  double duration_min = 30.0, duration_max = 300.0, duration_step = 30.0;
  double lead_in = 30.0;
  double tail = 300.0;
};

namespace detail {

inline std::vector<double> grid_axis(double lo, double hi, double step, const char* what) {
  if (!std::isfinite(lo) || !std::isfinite(hi) || !std::isfinite(step))
    throw std::invalid_argument(std::string(what) + " range must be finite");
  if (lo > hi) throw std::invalid_argument(std::string(what) + " range is inverted");
  if (!(step > 0.0)) throw std::invalid_argument(std::string(what) + " step must be positive");
  std::vector<double> out;
  const auto count = static_cast<long>(std::floor((hi - lo) / step + 1e-9)) + 1;
  for (long i = 0; i < count; ++i) out.push_back(lo + static_cast<double>(i) * step);
  return out;
}

}  // namespace detail

/// Intensity-major list of block-rain scenarios.
inline std::vector<RainScenario> generate_scenario_grid(const GridSpec& spec = {}) {
  const auto intensities =
      detail::grid_axis(spec.intensity_min, spec.intensity_max, spec.intensity_step, "intensity");
  const auto durations = detail::grid_axis(spec.duration_min, spec.duration_max, spec.duration_step, "duration");
  if (intensities.front() < 0.0) throw std::invalid_argument("intensity range must be non-negative");
  if (!(durations.front() > 0.0)) throw std::invalid_argument("duration range must be positive");
  std::vector<RainScenario> out;
  for (double i : intensities)
    for (double d : durations) {
      RainScenario s;
      s.intensity = i;
      s.duration = d;
      s.start = spec.lead_in;
      s.tail = spec.tail;
      s.validate();
      out.push_back(s);
    }
  return out;
}

struct ControllerSpec {
  ControllerKind kind = ControllerKind::deterministic;
  double alpha = 0.9;
  double gamma = 0.9;

  static ControllerSpec deterministic() { return {}; }
  static ControllerSpec chance(double alpha, double gamma) {
    return {ControllerKind::chance_constrained, alpha, gamma};
  }
  static ControllerSpec chance(double level) { return chance(level, level); }

  std::string label() const {
    if (kind == ControllerKind::deterministic) return "det";
    char buf[64];
    if (alpha == gamma) std::snprintf(buf, sizeof buf, "cc%g", alpha);
    else std::snprintf(buf, sizeof buf, "cc%g:%g", alpha, gamma);
    return buf;
  }
};

struct RunOptions {
  ControllerConfig controller;  ///< alpha / gamma are taken from the ControllerSpec
  SolverSettings solver;
  UncertaintyModel uncertainty;
  bool plant_noise = false;     ///< sample the plant rain instead of using the nominal block
  std::uint64_t seed = 1;
  bool zero_variance = false;   ///< feed the CC controller a variance-free forecast
  Eigen::VectorXd dry_weather;  ///< constant intensity per catchment [um/s]; empty means zero
};

/// Nominal intensity [um/s] per catchment (rows) and step (columns); each column
/// is the average over [k dt, (k+1) dt).
inline Eigen::MatrixXd nominal_intensity(const RainScenario& sc, const NetworkModel& model, Eigen::Index steps,
                                         const Eigen::VectorXd& dry_weather = {}) {
  sc.validate();
  const auto nc = static_cast<Eigen::Index>(model.catchment_count());
  if (sc.scaling.size() != 0 && sc.scaling.size() != nc) throw DimensionError("scaling needs one entry per catchment");
  if (dry_weather.size() != 0 && dry_weather.size() != nc)
    throw DimensionError("dry-weather flow needs one entry per catchment");
  const double dt = model.dt();
  Eigen::MatrixXd out(nc, steps);
  for (Eigen::Index k = 0; k < steps; ++k) {
    const double t0 = static_cast<double>(k) * dt, t1 = t0 + dt;
    const double overlap = std::max(0.0, std::min(t1, sc.start + sc.duration) - std::max(t0, sc.start));
    const double level = sc.intensity * overlap / dt;
    for (Eigen::Index c = 0; c < nc; ++c) {
      const double scale = sc.scaling.size() ? sc.scaling[c] : 1.0;
      out(c, k) = level * scale + (dry_weather.size() ? dry_weather[c] : 0.0);
    }
  }
  return out;
}

inline Eigen::Index scenario_steps(const RainScenario& sc, const NetworkModel& model) {
  return static_cast<Eigen::Index>(std::ceil(sc.total_minutes() / model.dt() - 1e-9));
}

/// Stream id of a scenario, derived from its intensity and duration only.
inline std::uint64_t scenario_stream(const RainScenario& sc) {
  const auto i = static_cast<std::uint64_t>(std::llround(sc.intensity * 1000.0));
  const auto d = static_cast<std::uint64_t>(std::llround(sc.duration * 1000.0));
  return (i << 32) ^ d;
}

/// Rain intensity the plant actually receives. With noise, each sample is a
/// Gaussian around the nominal value truncated to [0, mean + 3 sigma].
inline Eigen::MatrixXd realize_intensity(const Eigen::MatrixXd& nominal, const UncertaintyModel& um, bool noise,
                                         std::uint64_t seed, std::uint64_t stream) {
  if (!noise) return nominal;
  Eigen::MatrixXd out(nominal.rows(), nominal.cols());
  for (Eigen::Index c = 0; c < nominal.rows(); ++c) {
    auto rng = make_stream(seed, stream, static_cast<std::uint64_t>(c));
    for (Eigen::Index k = 0; k < nominal.cols(); ++k) {
      const double m = nominal(c, k), sd = um.sigma(m);
      out(c, k) = sample_truncated_gaussian(m, sd, 0.0, m + 3.0 * sd, rng);
    }
  }
  return out;
}

struct SimulationTrace {
  std::string scenario;
  std::string controller;
  RainScenario rain_scenario;
  ControllerConfig config;
  double dt = 0.0;
  std::vector<SystemState> states;       ///< steps + 1 entries
  std::vector<Eigen::VectorXd> commands;  ///< first control of each plan
  std::vector<FlowRecord> flows;          ///< plant flows (tank_outflow = applied control)
  std::vector<Eigen::VectorXd> rain;      ///< plant rain flow per catchment [m3/min]
  std::vector<double> objective;
  std::vector<double> solve_seconds;
  std::vector<int> iterations;
  std::vector<QpStatus> status;
  std::vector<KktResiduals> residuals;
  bool failed = false;
  std::string error;

  std::size_t steps() const noexcept { return flows.size(); }
};

/// Runs one receding-horizon simulation. A controller failure stops the run;
/// the steps completed so far are kept and `failed` is set.
inline SimulationTrace run_closed_loop(const NetworkModel& model, const ControllerSpec& spec,
                                       const RainScenario& sc, const RunOptions& opt = {}) {
  sc.validate();
  ControllerConfig cfg = opt.controller;
  cfg.alpha = spec.alpha;
  cfg.gamma = spec.gamma;
  const Eigen::Index N = cfg.horizon;
  const Eigen::Index steps = scenario_steps(sc, model);
  const auto nc = static_cast<Eigen::Index>(model.catchment_count());

  // Enough columns for the last forecast window.
  const Eigen::MatrixXd nominal = nominal_intensity(sc, model, steps + N, opt.dry_weather);
  const Eigen::MatrixXd actual =
      realize_intensity(nominal, opt.uncertainty, opt.plant_noise, opt.seed, scenario_stream(sc));

  Controller ctl(model, spec.kind, cfg, opt.solver);
  SimulationTrace tr;
  tr.scenario = sc.key();
  tr.controller = spec.label();
  tr.rain_scenario = sc;
  tr.config = cfg;
  tr.dt = model.dt();
  tr.states.push_back(model.zero_state());
  Eigen::VectorXd u_prev = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.tank_count()));

  for (Eigen::Index k = 0; k < steps; ++k) {
    Forecast fc;
    if (spec.kind == ControllerKind::deterministic) {
      fc = make_deterministic_forecast(actual.middleCols(k, N), model);
    } else {
      fc = make_forecast(nominal.middleCols(k, N), model, opt.uncertainty);
      if (opt.zero_variance) fc.variance.setZero();
    }
    const SystemState& x = tr.states.back();
    ControlPlan plan = ctl.plan(x, fc, u_prev);
    Eigen::VectorXd u;
    try {
      u = extract_first_control(plan, model);
    } catch (const ControllerError& e) {
      tr.failed = true;
      tr.error = "step " + std::to_string(k) + ": " + e.what();
      break;
    }
    Eigen::VectorXd w(nc);
    for (Eigen::Index c = 0; c < nc; ++c)
      w[c] = rain_to_flow(actual(c, k), model.catchments()[static_cast<std::size_t>(c)].area);
    PlantStep ps = plant_step(model, x, u, w);

    tr.commands.push_back(u);
    tr.rain.push_back(w);
    tr.objective.push_back(plan.objective);
    tr.solve_seconds.push_back(plan.solution.solve_seconds);
    tr.iterations.push_back(plan.solution.iterations);
    tr.status.push_back(plan.status);
    tr.residuals.push_back(plan.solution.residuals);
    u_prev = ps.flows.tank_outflow;
    tr.flows.push_back(std::move(ps.flows));
    tr.states.push_back(std::move(ps.next));
  }
  return tr;
}

struct Metrics {
  std::string scenario;
  std::string controller;
  std::size_t steps = 0;
  Eigen::VectorXd overflow_per_weir;  ///< [m3], by weir ordinal
  double overflow_total = 0.0;        ///< [m3]
  double wwtp_volume = 0.0;           ///< [m3]
  double rain_volume = 0.0;           ///< [m3]
  double storage_change = 0.0;        ///< tank volume, final minus initial [m3]
  double in_transit_change = 0.0;     ///< dt * delay registers, final minus initial [m3]
  double mass_balance_error = 0.0;    ///< |residual| / max(1, rain volume)
  double max_solve_seconds = 0.0;
  double mean_solve_seconds = 0.0;
  double cost = 0.0;            ///< closed-loop stage cost of the applied trajectory
  double objective_sum = 0.0;   ///< sum of optimal QP objectives
  int max_iterations = 0;
  double max_residual = 0.0;    ///< largest KKT residual over all solves
  bool failed = false;
};

inline Metrics compute_metrics(const NetworkModel& model, const SimulationTrace& tr) {
  if (tr.flows.empty()) throw std::invalid_argument("compute_metrics: empty trace");
  if (tr.states.size() != tr.flows.size() + 1) throw std::invalid_argument("compute_metrics: inconsistent trace");
  const double dt = model.dt();
  const auto nw = static_cast<Eigen::Index>(model.weir_count());
  const auto wwtp = static_cast<Eigen::Index>(model.wwtp_tank());
  Metrics m;
  m.scenario = tr.scenario;
  m.controller = tr.controller;
  m.steps = tr.flows.size();
  m.failed = tr.failed;
  m.overflow_per_weir = Eigen::VectorXd::Zero(nw);

  Eigen::VectorXd W(nw);
  for (Eigen::Index w = 0; w < nw; ++w) W[w] = tr.config.w_for(model.element(model.weirs()[static_cast<std::size_t>(w)]).id);
  Eigen::VectorXd R(static_cast<Eigen::Index>(model.tank_count()));
  for (Eigen::Index t = 0; t < R.size(); ++t) R[t] = tr.config.r_for(model.element(model.tanks()[static_cast<std::size_t>(t)]).id);

  Eigen::VectorXd u_prev = Eigen::VectorXd::Zero(R.size());
  for (std::size_t k = 0; k < tr.flows.size(); ++k) {
    const auto& f = tr.flows[k];
    m.overflow_per_weir += dt * f.weir_overflow;
    m.wwtp_volume += dt * f.tank_outflow[wwtp];
    m.rain_volume += dt * tr.rain[k].sum();
    const Eigen::VectorXd du = f.tank_outflow - u_prev;
    m.cost += (R.array() * du.array().square()).sum() + tr.config.wwtp_weight * f.tank_outflow[wwtp] +
              tr.config.environment_weight * f.weir_overflow.sum() + dt * W.dot(f.weir_overflow);
    u_prev = f.tank_outflow;
  }
  m.overflow_total = m.overflow_per_weir.sum();
  m.storage_change = tr.states.back().volumes.sum() - tr.states.front().volumes.sum();
  m.in_transit_change = dt * (tr.states.back().delays.sum() - tr.states.front().delays.sum());
  const double residual = m.rain_volume - m.storage_change - m.wwtp_volume - m.overflow_total - m.in_transit_change;
  m.mass_balance_error = std::abs(residual) / std::max(1.0, m.rain_volume);

  for (std::size_t k = 0; k < tr.solve_seconds.size(); ++k) {
    m.max_solve_seconds = std::max(m.max_solve_seconds, tr.solve_seconds[k]);
    m.mean_solve_seconds += tr.solve_seconds[k];
    m.objective_sum += tr.objective[k];
    m.max_iterations = std::max(m.max_iterations, tr.iterations[k]);
    m.max_residual = std::max(m.max_residual, tr.residuals[k].max());
  }
  if (!tr.solve_seconds.empty()) m.mean_solve_seconds /= static_cast<double>(tr.solve_seconds.size());
  return m;
}

/// Chance-constrained run against the deterministic baseline on one scenario.
/// Overflow, WWTP and cost differences are CC minus baseline (percent of the
/// baseline); solve-time differences are baseline minus CC.
struct ComparisonReport {
  std::string scenario;
  std::string baseline, candidate;
  double overflow_baseline = 0.0, overflow_candidate = 0.0, overflow_diff = 0.0, overflow_pct = 0.0;
  double wwtp_baseline = 0.0, wwtp_candidate = 0.0, wwtp_diff = 0.0, wwtp_pct = 0.0;
  double cost_baseline = 0.0, cost_candidate = 0.0, cost_diff = 0.0, cost_pct = 0.0;
  double max_time_diff = 0.0;   ///< baseline - candidate [s]
  double mean_time_diff = 0.0;  ///< baseline - candidate [s]
};

/// Percent change of `b` relative to `a`; 0 when both are zero, NaN when only `a` is.
inline double percent_change(double a, double b) {
  if (a == 0.0) return b == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
  return 100.0 * (b - a) / std::abs(a);
}

inline ComparisonReport compare_runs(const Metrics& baseline, const Metrics& candidate) {
  if (baseline.scenario != candidate.scenario)
    throw std::invalid_argument("compare_runs: scenario mismatch (" + baseline.scenario + " vs " +
                                candidate.scenario + ")");
  ComparisonReport r;
  r.scenario = baseline.scenario;
  r.baseline = baseline.controller;
  r.candidate = candidate.controller;
  r.overflow_baseline = baseline.overflow_total;
  r.overflow_candidate = candidate.overflow_total;
  r.overflow_diff = candidate.overflow_total - baseline.overflow_total;
  r.overflow_pct = percent_change(baseline.overflow_total, candidate.overflow_total);
  r.wwtp_baseline = baseline.wwtp_volume;
  r.wwtp_candidate = candidate.wwtp_volume;
  r.wwtp_diff = candidate.wwtp_volume - baseline.wwtp_volume;
  r.wwtp_pct = percent_change(baseline.wwtp_volume, candidate.wwtp_volume);
  r.cost_baseline = baseline.cost;
  r.cost_candidate = candidate.cost;
  r.cost_diff = candidate.cost - baseline.cost;
  r.cost_pct = percent_change(baseline.cost, candidate.cost);
  r.max_time_diff = baseline.max_solve_seconds - candidate.max_solve_seconds;
  r.mean_time_diff = baseline.mean_solve_seconds - candidate.mean_solve_seconds;
  return r;
}

struct GridRun {
  std::size_t scenario_index = 0;
  std::size_t controller_index = 0;
  SimulationTrace trace;
  Metrics metrics;
};

/// Runs every (scenario, controller) pair on `threads` workers (0 = hardware
/// concurrency). Results come back ordered by scenario, then controller, no
/// matter which worker ran them. `progress` is called under a lock.
inline std::vector<GridRun> run_grid(const NetworkModel& model, const std::vector<RainScenario>& scenarios,
                                     const std::vector<ControllerSpec>& controllers, const RunOptions& opt,
                                     unsigned threads = 0,
                                     const std::function<void(const GridRun&)>& progress = {}) {
  const std::size_t total = scenarios.size() * controllers.size();
  std::vector<GridRun> out(total);
  if (total == 0) return out;
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, total));

  std::atomic<std::size_t> next{0};
  std::mutex lock;
  auto worker = [&] {
    for (std::size_t job = next++; job < total; job = next++) {
      GridRun& r = out[job];
      r.scenario_index = job / controllers.size();
      r.controller_index = job % controllers.size();
      r.trace = run_closed_loop(model, controllers[r.controller_index], scenarios[r.scenario_index], opt);
      if (!r.trace.flows.empty()) r.metrics = compute_metrics(model, r.trace);
      else {
        r.metrics.scenario = r.trace.scenario;
        r.metrics.controller = r.trace.controller;
        r.metrics.failed = true;
      }
      if (progress) {
        std::lock_guard<std::mutex> g(lock);
        progress(r);
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return out;
}

// ---- CSV export -----------------------------------------------------------

namespace detail {

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

/// One row per step: time, volumes, applied controls, weir flows, rain, solver data.
inline void write_trace_csv(std::ostream& out, const NetworkModel& model, const SimulationTrace& tr) {
  out << "step,time_min";
  for (auto e : model.tanks()) out << ",V_" << model.element(e).id;
  for (auto e : model.tanks()) out << ",u_" << model.element(e).id;
  for (auto e : model.weirs()) out << ",qw_" << model.element(e).id;
  for (auto e : model.weirs()) out << ",switch_" << model.element(e).id;
  for (const auto& c : model.catchments()) out << ",rain_" << c.id;
  out << ",wwtp_flow,overflow_flow,objective,solve_s,iterations,status,kkt_max\n";
  const auto wwtp = static_cast<Eigen::Index>(model.wwtp_tank());
  for (std::size_t k = 0; k < tr.flows.size(); ++k) {
    const auto& f = tr.flows[k];
    out << k << "," << detail::num(static_cast<double>(k) * tr.dt);
    for (Eigen::Index t = 0; t < tr.states[k].volumes.size(); ++t) out << "," << detail::num(tr.states[k].volumes[t]);
    for (Eigen::Index t = 0; t < f.tank_outflow.size(); ++t) out << "," << detail::num(f.tank_outflow[t]);
    for (Eigen::Index w = 0; w < f.weir_overflow.size(); ++w) out << "," << detail::num(f.weir_overflow[w]);
    for (Eigen::Index w = 0; w < f.switching.size(); ++w) out << "," << detail::num(f.switching[w]);
    for (Eigen::Index c = 0; c < tr.rain[k].size(); ++c) out << "," << detail::num(tr.rain[k][c]);
    out << "," << detail::num(f.tank_outflow[wwtp]) << "," << detail::num(f.weir_overflow.sum()) << ","
        << detail::num(tr.objective[k]) << "," << detail::num(tr.solve_seconds[k]) << "," << tr.iterations[k] << ","
        << to_string(tr.status[k]) << "," << detail::num(tr.residuals[k].max()) << "\n";
  }
}

inline void write_metrics_header(std::ostream& out, const NetworkModel& model) {
  out << "scenario,intensity,duration,controller,steps,overflow_total";
  for (auto e : model.weirs()) out << ",overflow_" << model.element(e).id;
  out << ",wwtp_volume,rain_volume,storage_change,in_transit_change,mass_balance_error,max_solve_s,mean_solve_s,"
         "cost,objective_sum,max_iterations,max_kkt,failed\n";
}

inline void write_metrics_row(std::ostream& out, const RainScenario& sc, const Metrics& m) {
  out << m.scenario << "," << detail::num(sc.intensity) << "," << detail::num(sc.duration) << "," << m.controller
      << "," << m.steps << "," << detail::num(m.overflow_total);
  for (Eigen::Index w = 0; w < m.overflow_per_weir.size(); ++w) out << "," << detail::num(m.overflow_per_weir[w]);
  out << "," << detail::num(m.wwtp_volume) << "," << detail::num(m.rain_volume) << ","
      << detail::num(m.storage_change) << "," << detail::num(m.in_transit_change) << ","
      << detail::num(m.mass_balance_error) << "," << detail::num(m.max_solve_seconds) << ","
      << detail::num(m.mean_solve_seconds) << "," << detail::num(m.cost) << "," << detail::num(m.objective_sum) << ","
      << m.max_iterations << "," << detail::num(m.max_residual) << "," << (m.failed ? 1 : 0) << "\n";
}

inline void write_comparison_header(std::ostream& out) {
  out << "scenario,intensity,duration,baseline,candidate,overflow_baseline,overflow_candidate,overflow_diff,"
         "overflow_pct,wwtp_baseline,wwtp_candidate,wwtp_diff,wwtp_pct,cost_baseline,cost_candidate,cost_diff,"
         "cost_pct,max_time_diff_s,mean_time_diff_s\n";
}

inline void write_comparison_row(std::ostream& out, const RainScenario& sc, const ComparisonReport& r) {
  out << r.scenario << "," << detail::num(sc.intensity) << "," << detail::num(sc.duration) << "," << r.baseline << ","
      << r.candidate << "," << detail::num(r.overflow_baseline) << "," << detail::num(r.overflow_candidate) << ","
      << detail::num(r.overflow_diff) << "," << detail::num(r.overflow_pct) << "," << detail::num(r.wwtp_baseline)
      << "," << detail::num(r.wwtp_candidate) << "," << detail::num(r.wwtp_diff) << "," << detail::num(r.wwtp_pct)
      << "," << detail::num(r.cost_baseline) << "," << detail::num(r.cost_candidate) << ","
      << detail::num(r.cost_diff) << "," << detail::num(r.cost_pct) << "," << detail::num(r.max_time_diff) << ","
      << detail::num(r.mean_time_diff) << "\n";
}

}  // namespace ccmpc
