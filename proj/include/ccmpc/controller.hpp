#pragma once

// Deterministic MPC and chance-constrained MPC for weir networks, compiled to
// standard-form QPs over the stacked decision vector (u, qw, s, c).
//
// Decision layout (k = 0..N-1):
//   u   index k * tanks + t              control of tank ordinal t
//   qw  index N*tanks + k * weirs + w    overflow of weir ordinal w
//   s   one per tightened non-weir row   (chance-constrained only)
//   c   one per switching row            (chance-constrained only)

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccmpc/errors.hpp"
#include "ccmpc/network.hpp"
#include "ccmpc/qp.hpp"
#include "ccmpc/qpsolver.hpp"
#include "ccmpc/stochastics.hpp"

namespace ccmpc {

struct ControllerConfig {
  Eigen::Index horizon = 20;
  double move_weight = 0.01;                      ///< R on (u_k - u_{k-1})^2
  std::map<std::string, double> move_weight_for;  ///< per-tank override of R
  double wwtp_weight = -1.0;                      ///< on the WWTP control flow
  double environment_weight = 2.0;                ///< on the summed weir flow
  /// Weights on accumulated overflow volume, by element id.
  std::map<std::string, double> overflow_weight = {
      {"T1", 1000.0},  {"T2", 5000.0},  {"T3", 5000.0},  {"T4", 5000.0}, {"T5", 5000.0},
      {"T6", 10000.0}, {"p7", 10000.0}, {"p8", 10000.0}, {"p9", 15000.0}, {"p10", 5000.0}};
  double default_overflow_weight = 5000.0;  ///< for weirs missing from the map
  double slack_weight = 100.0;              ///< W_s
  double switching_weight = 100.0;          ///< W_c
  double alpha = 0.9;                       ///< level of non-weir constraints
  double gamma = 0.9;                       ///< level of weir switching constraints
  std::map<std::string, double> alpha_for, gamma_for;  ///< per-element overrides
  double regularization = 1e-8;  ///< diagonal on qw, s, c

  double r_for(const std::string& id) const {
    auto it = move_weight_for.find(id);
    return it == move_weight_for.end() ? move_weight : it->second;
  }
  double w_for(const std::string& id) const {
    auto it = overflow_weight.find(id);
    return it == overflow_weight.end() ? default_overflow_weight : it->second;
  }
  double alpha_of(const std::string& id) const {
    auto it = alpha_for.find(id);
    return it == alpha_for.end() ? alpha : it->second;
  }
  double gamma_of(const std::string& id) const {
    auto it = gamma_for.find(id);
    return it == gamma_for.end() ? gamma : it->second;
  }

  /// Throws std::invalid_argument on out-of-range settings.
  void validate() const {
    if (horizon < 1) throw std::invalid_argument("horizon must be at least one step");
    auto level = [](double p, const char* what) {
      if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument(std::string(what) + " must lie in (0, 1)");
    };
    level(alpha, "alpha");
    level(gamma, "gamma");
    for (auto& [id, p] : alpha_for) level(p, "alpha");
    for (auto& [id, p] : gamma_for) level(p, "gamma");
    if (!(move_weight >= 0.0)) throw std::invalid_argument("move weight must be non-negative");
    for (auto& [id, r] : move_weight_for)
      if (!(r >= 0.0)) throw std::invalid_argument("move weight must be non-negative");
    if (!(slack_weight > 0.0) || !(switching_weight > 0.0))
      throw std::invalid_argument("slack weights must be positive");
    if (!(regularization >= 0.0)) throw std::invalid_argument("regularization must be non-negative");
  }
};

/// Affine map d -> linear * d + offset over the (u, qw) part of the decision vector.
struct AffineTrajectory {
  Eigen::MatrixXd linear;
  Eigen::VectorXd offset;

  Eigen::VectorXd operator()(const Eigen::VectorXd& d) const { return linear * d + offset; }
};

/// Expected network quantities over the horizon as affine functions of (u, qw).
/// Row index is step * width + ordinal, as in VarianceTrajectories.
struct PredictionOperator {
  Eigen::Index horizon = 0;
  AffineTrajectory volume;        ///< (N+1) x tanks, post-overflow
  AffineTrajectory delay;         ///< (N+1) x registers
  AffineTrajectory inflow;        ///< N x elements
  AffineTrajectory pipe_outflow;  ///< N x pipes

  Eigen::Index inputs() const noexcept { return volume.linear.cols(); }
};

namespace detail {

/// Expectation model of the network with controls and weir flows as inputs.
template <class Val, class Control, class Weir, class Rain, class V0, class D0>
void expectation_recursion(const NetworkModel& model, Eigen::Index horizon, const Val& zero, Control control,
                           Weir weir, Rain rain, V0 v0, D0 d0, std::vector<std::vector<Val>>& volume,
                           std::vector<std::vector<Val>>& delay, std::vector<std::vector<Val>>& inflow,
                           std::vector<std::vector<Val>>& pipe_outflow) {
  const std::size_t nt = model.tank_count(), nr = model.register_count(), ne = model.element_count(),
                    np = model.pipe_count();
  const auto n = static_cast<std::size_t>(horizon);
  const double dt = model.dt();
  volume.assign(n + 1, std::vector<Val>(nt, zero));
  delay.assign(n + 1, std::vector<Val>(nr, zero));
  inflow.assign(n, std::vector<Val>(ne, zero));
  pipe_outflow.assign(n, std::vector<Val>(np, zero));
  for (std::size_t t = 0; t < nt; ++t) volume[0][t] = v0(t);
  for (std::size_t r = 0; r < nr; ++r) delay[0][r] = d0(r);

  for (std::size_t k = 0; k < n; ++k) {
    for (auto i : model.topological_order()) {
      const auto& r = model.routing(i);
      Val q = zero;
      if (r.rain) q = q + rain(*r.rain, k);
      for (auto t : r.controls) q = q + control(k, t);
      for (auto t : r.tank_outflows) q = q + control(k, t);
      for (auto p : r.pipe_outflows) q = q + pipe_outflow[k][p];
      for (auto c : r.delay_outflows) q = q + delay[k][model.chain_tail(c)];
      inflow[k][i] = q;
      if (model.element(i).kind == ElementKind::weir_pipe)
        pipe_outflow[k][model.ordinal(i)] = q - weir(k, model.weir_ordinal(i));
    }
    for (std::size_t t = 0; t < nt; ++t) {
      const std::size_t e = model.tanks()[t];
      volume[k + 1][t] = volume[k][t] + dt * (inflow[k][e] - control(k, t) - weir(k, model.weir_ordinal(e)));
    }
    for (std::size_t c = 0; c < model.chain_count(); ++c) {
      const std::size_t head = model.register_offset(c), tail = model.chain_tail(c);
      for (std::size_t j = tail; j > head; --j) delay[k + 1][j] = delay[k][j - 1];
      delay[k + 1][head] = inflow[k][model.chains()[c]];
    }
  }
}

template <class Val>
Eigen::Index stacked_rows(const std::vector<std::vector<Val>>& block) {
  Eigen::Index n = 0;
  for (const auto& step : block) n += static_cast<Eigen::Index>(step.size());
  return n;
}

inline void check_forecast(const NetworkModel& model, const Forecast& forecast, Eigen::Index horizon) {
  if (static_cast<std::size_t>(forecast.catchments()) != model.catchment_count())
    throw DimensionError("forecast needs one row per catchment");
  if (forecast.steps() < horizon) throw DimensionError("forecast shorter than the horizon");
  if (forecast.variance.rows() != forecast.mean.rows() || forecast.variance.cols() != forecast.mean.cols())
    throw DimensionError("forecast mean and variance differ in shape");
}

inline void check_state(const NetworkModel& model, const SystemState& x0) {
  if (static_cast<std::size_t>(x0.volumes.size()) != model.tank_count() ||
      static_cast<std::size_t>(x0.delays.size()) != model.register_count())
    throw DimensionError("state does not match the network");
}

}  // namespace detail

/// Linear part of the prediction; depends only on (model, N) and can be reused.
inline PredictionOperator build_prediction_linear(const NetworkModel& model, Eigen::Index horizon) {
  if (horizon < 1) throw DimensionError("horizon must be at least one step");
  const auto nt = static_cast<Eigen::Index>(model.tank_count());
  const auto nw = static_cast<Eigen::Index>(model.weir_count());
  const Eigen::Index width = horizon * (nt + nw);
  using Row = Eigen::RowVectorXd;
  const Row zero = Row::Zero(width);
  auto unit = [&](Eigen::Index j) {
    Row r = zero;
    r[j] = 1.0;
    return r;
  };

  std::vector<std::vector<Row>> vol, del, in, pout;
  detail::expectation_recursion<Row>(
      model, horizon, zero,
      [&](std::size_t k, std::size_t t) { return unit(static_cast<Eigen::Index>(k) * nt + static_cast<Eigen::Index>(t)); },
      [&](std::size_t k, std::size_t w) {
        return unit(horizon * nt + static_cast<Eigen::Index>(k) * nw + static_cast<Eigen::Index>(w));
      },
      [&](std::size_t, std::size_t) { return zero; }, [&](std::size_t) { return zero; },
      [&](std::size_t) { return zero; }, vol, del, in, pout);

  auto stack = [&](const std::vector<std::vector<Row>>& block) {
    AffineTrajectory a;
    a.linear.resize(detail::stacked_rows(block), width);
    Eigen::Index pos = 0;
    for (const auto& step : block)
      for (const auto& r : step) a.linear.row(pos++) = r;
    a.offset = Eigen::VectorXd::Zero(a.linear.rows());
    return a;
  };
  PredictionOperator op;
  op.horizon = horizon;
  op.volume = stack(vol);
  op.delay = stack(del);
  op.inflow = stack(in);
  op.pipe_outflow = stack(pout);
  return op;
}

/// Fills the offsets (zero-input free response) for a state and forecast.
inline void set_prediction_offsets(PredictionOperator& op, const NetworkModel& model, const SystemState& x0,
                                   const Forecast& forecast) {
  detail::check_state(model, x0);
  detail::check_forecast(model, forecast, op.horizon);
  std::vector<std::vector<double>> vol, del, in, pout;
  detail::expectation_recursion<double>(
      model, op.horizon, 0.0, [](std::size_t, std::size_t) { return 0.0; },
      [](std::size_t, std::size_t) { return 0.0; },
      [&](std::size_t c, std::size_t k) {
        return forecast.mean(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k));
      },
      [&](std::size_t t) { return x0.volumes[static_cast<Eigen::Index>(t)]; },
      [&](std::size_t r) { return x0.delays[static_cast<Eigen::Index>(r)]; }, vol, del, in, pout);
  auto fill = [](Eigen::VectorXd& out, const std::vector<std::vector<double>>& block) {
    Eigen::Index pos = 0;
    for (const auto& step : block)
      for (double v : step) out[pos++] = v;
  };
  fill(op.volume.offset, vol);
  fill(op.delay.offset, del);
  fill(op.inflow.offset, in);
  fill(op.pipe_outflow.offset, pout);
}

inline PredictionOperator build_prediction(const NetworkModel& model, const SystemState& x0, const Forecast& forecast,
                                           Eigen::Index horizon) {
  PredictionOperator op = build_prediction_linear(model, horizon);
  set_prediction_offsets(op, model, x0, forecast);
  return op;
}

namespace detail {

/// Accumulates rows "coef * d <= rhs" with an optional slack column.
class RowBuilder {
 public:
  RowBuilder(Eigen::Index cols) : cols_(cols) {}

  Eigen::Index add(const Eigen::RowVectorXd& coef_uq, double rhs, RowTag tag, Eigen::Index slack_col = -1,
                   double slack_coef = 0.0) {
    rows_.push_back(coef_uq);
    rhs_.push_back(rhs);
    tags_.push_back(tag);
    slack_.emplace_back(slack_col, slack_coef);
    return static_cast<Eigen::Index>(rows_.size()) - 1;
  }

  void finish(QpProblem& qp) const {
    const auto m = static_cast<Eigen::Index>(rows_.size());
    qp.A = Eigen::MatrixXd::Zero(m, cols_);
    qp.b.resize(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      const auto rs = static_cast<std::size_t>(r);
      qp.A.row(r).head(rows_[rs].size()) = rows_[rs];
      if (slack_[rs].first >= 0) qp.A(r, slack_[rs].first) = slack_[rs].second;
      qp.b[r] = rhs_[rs];
    }
    qp.tags = tags_;
  }

 private:
  Eigen::Index cols_;
  std::vector<Eigen::RowVectorXd> rows_;
  std::vector<double> rhs_;
  std::vector<RowTag> tags_;
  std::vector<std::pair<Eigen::Index, double>> slack_;
};

/// Cost terms shared by both controllers, written into the (u, qw) block.
inline void shared_cost(QpProblem& qp, const NetworkModel& model, const ControllerConfig& cfg,
                        const Eigen::VectorXd& u_prev) {
  const Eigen::Index N = cfg.horizon;
  const auto nt = static_cast<Eigen::Index>(model.tank_count());
  const auto nw = static_cast<Eigen::Index>(model.weir_count());
  const double dt = model.dt();
  const Eigen::Index qw0 = N * nt;

  for (Eigen::Index t = 0; t < nt; ++t) {
    const double R = cfg.r_for(model.element(model.tanks()[static_cast<std::size_t>(t)]).id);
    for (Eigen::Index k = 0; k < N; ++k) {
      const Eigen::Index i = k * nt + t;
      // R (u_k - u_{k-1})^2 with u_{-1} = previously applied control
      qp.H(i, i) += 2.0 * R;
      if (k > 0) {
        const Eigen::Index j = i - nt;
        qp.H(j, j) += 2.0 * R;
        qp.H(i, j) -= 2.0 * R;
        qp.H(j, i) -= 2.0 * R;
      }
    }
    qp.f[t] -= 2.0 * R * u_prev[t];
    qp.constant += R * u_prev[t] * u_prev[t];
  }
  for (Eigen::Index k = 0; k < N; ++k) qp.f[k * nt + static_cast<Eigen::Index>(model.wwtp_tank())] += cfg.wwtp_weight;

  for (Eigen::Index w = 0; w < nw; ++w) {
    const double W = cfg.w_for(model.element(model.weirs()[static_cast<std::size_t>(w)]).id);
    for (Eigen::Index k = 0; k < N; ++k) {
      const Eigen::Index i = qw0 + k * nw + w;
      // accumulated volume dt * sum_{j<=k} qw_j summed over k = 0..N-1
      qp.f[i] += cfg.environment_weight + dt * static_cast<double>(N - k) * W;
      qp.H(i, i) += cfg.regularization;
    }
  }
}

inline void check_controller_inputs(const NetworkModel& model, const SystemState& x0, const Forecast& forecast,
                                    const Eigen::VectorXd& u_prev, const ControllerConfig& cfg) {
  cfg.validate();
  check_state(model, x0);
  check_forecast(model, forecast, cfg.horizon);
  if (static_cast<std::size_t>(u_prev.size()) != model.tank_count())
    throw DimensionError("previous control needs one entry per tank");
}

inline void control_bounds(QpProblem& qp, const NetworkModel& model, Eigen::Index N) {
  const auto nt = static_cast<Eigen::Index>(model.tank_count());
  for (Eigen::Index k = 0; k < N; ++k)
    for (Eigen::Index t = 0; t < nt; ++t) {
      qp.lower[k * nt + t] = 0.0;
      qp.upper[k * nt + t] = model.element(model.tanks()[static_cast<std::size_t>(t)]).control_cap;
    }
  const Eigen::Index nw = static_cast<Eigen::Index>(model.weir_count());
  for (Eigen::Index i = N * nt; i < N * (nt + nw); ++i) qp.lower[i] = 0.0;
}

}  // namespace detail

/// Deterministic MPC: expectations treated as certain, overflow as a penalized
/// decision variable bounded below by the predicted excess.
inline QpProblem assemble_deterministic_qp(const NetworkModel& model, const PredictionOperator& pred,
                                           const Eigen::VectorXd& u_prev, const ControllerConfig& cfg) {
  if (pred.horizon != cfg.horizon) throw DimensionError("prediction horizon differs from the configuration");
  const Eigen::Index N = cfg.horizon;
  const auto nt = static_cast<Eigen::Index>(model.tank_count());
  const auto nw = static_cast<Eigen::Index>(model.weir_count());
  const auto np = static_cast<Eigen::Index>(model.pipe_count());
  const Eigen::Index n = N * (nt + nw);

  QpProblem qp;
  qp.H = Eigen::MatrixXd::Zero(n, n);
  qp.f = Eigen::VectorXd::Zero(n);
  qp.lower = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
  qp.upper = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  qp.layout.u = {0, N * nt};
  qp.layout.qw = {N * nt, N * nw};
  qp.layout.s = {n, 0};
  qp.layout.c = {n, 0};
  detail::shared_cost(qp, model, cfg, u_prev);
  detail::control_bounds(qp, model, N);

  detail::RowBuilder rows(n);
  const auto& V = pred.volume;
  for (Eigen::Index k = 0; k < N; ++k) {
    for (Eigen::Index t = 0; t < nt; ++t) {
      const auto e = model.tanks()[static_cast<std::size_t>(t)];
      const auto& spec = model.element(e);
      const Eigen::Index next = (k + 1) * nt + t, now = k * nt + t;
      rows.add(-V.linear.row(next), V.offset[next], {RowKind::volume_lower, e, k});
      rows.add(V.linear.row(next), spec.capacity - V.offset[next], {RowKind::volume_upper, e, k});
      Eigen::RowVectorXd cuo = -spec.beta * V.linear.row(now);
      cuo[now] += 1.0;
      rows.add(cuo, spec.beta * V.offset[now], {RowKind::outflow_upper, e, k});
    }
    for (Eigen::Index p = 0; p < np; ++p) {
      const auto e = model.pipes()[static_cast<std::size_t>(p)];
      const Eigen::Index i = k * np + p;
      const auto& Q = pred.pipe_outflow;
      rows.add(-Q.linear.row(i), Q.offset[i], {RowKind::pipe_lower, e, k});
      rows.add(Q.linear.row(i), model.element(e).pipe_capacity - Q.offset[i], {RowKind::pipe_upper, e, k});
    }
  }
  rows.finish(qp);
  return qp;
}

inline QpProblem assemble_deterministic_qp(const NetworkModel& model, const SystemState& x0, const Forecast& forecast,
                                           const Eigen::VectorXd& u_prev, const ControllerConfig& cfg) {
  detail::check_controller_inputs(model, x0, forecast, u_prev, cfg);
  return assemble_deterministic_qp(model, build_prediction(model, x0, forecast, cfg.horizon), u_prev, cfg);
}

/// Chance-constrained MPC. Non-weir constraints are tightened by sigma * z(alpha)
/// with a capped slack s; weir switching functions are kept below the capacity
/// tightened by sigma * z(gamma), violations paid through c >= 0. The untightened
/// overflow definition rows stay in place.
inline QpProblem assemble_ccmpc_qp(const NetworkModel& model, const PredictionOperator& pred,
                                   const VarianceTrajectories& var, const Eigen::VectorXd& u_prev,
                                   const ControllerConfig& cfg) {
  if (pred.horizon != cfg.horizon) throw DimensionError("prediction horizon differs from the configuration");
  const Eigen::Index N = cfg.horizon;
  const auto nt = static_cast<Eigen::Index>(model.tank_count());
  const auto nw = static_cast<Eigen::Index>(model.weir_count());
  const auto np = static_cast<Eigen::Index>(model.pipe_count());
  if (var.volume.rows() < N + 1 || var.inflow.rows() < N || var.volume.cols() != nt ||
      var.inflow.cols() != static_cast<Eigen::Index>(model.element_count()))
    throw DimensionError("variance trajectories do not cover the horizon");

  const Eigen::Index n_uq = N * (nt + nw);
  const Eigen::Index n_s = N * (2 * nt + np);
  const Eigen::Index n_c = N * (nt + np);
  const Eigen::Index n = n_uq + n_s + n_c;

  QpProblem qp;
  qp.H = Eigen::MatrixXd::Zero(n, n);
  qp.f = Eigen::VectorXd::Zero(n);
  qp.lower = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
  qp.upper = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  qp.layout.u = {0, N * nt};
  qp.layout.qw = {N * nt, N * nw};
  qp.layout.s = {n_uq, n_s};
  qp.layout.c = {n_uq + n_s, n_c};
  detail::shared_cost(qp, model, cfg, u_prev);
  detail::control_bounds(qp, model, N);

  Eigen::Index next_s = n_uq, next_c = n_uq + n_s;
  auto new_s = [&](double cap) {
    const Eigen::Index j = next_s++;
    qp.f[j] = cfg.slack_weight;
    qp.H(j, j) = cfg.regularization;
    qp.lower[j] = 0.0;
    qp.upper[j] = std::max(0.0, cap);
    return j;
  };
  auto new_c = [&]() {
    const Eigen::Index j = next_c++;
    qp.f[j] = cfg.switching_weight;
    qp.H(j, j) = cfg.regularization;
    qp.lower[j] = 0.0;
    return j;
  };

  detail::RowBuilder rows(n);
  const auto& V = pred.volume;
  const double dt = model.dt();
  for (Eigen::Index k = 0; k < N; ++k) {
    for (Eigen::Index t = 0; t < nt; ++t) {
      const auto e = model.tanks()[static_cast<std::size_t>(t)];
      const auto& spec = model.element(e);
      const double za = normal_quantile(cfg.alpha_of(spec.id));
      const double zg = normal_quantile(cfg.gamma_of(spec.id));
      const Eigen::Index next = (k + 1) * nt + t, now = k * nt + t;
      const double sd_next = std::sqrt(std::max(0.0, var.volume(k + 1, t)));
      const double sd_now = std::sqrt(std::max(0.0, var.volume(k, t)));

      const double lv = sd_next * za;
      rows.add(-V.linear.row(next), V.offset[next] - lv, {RowKind::volume_lower, e, k}, new_s(lv), -1.0);
      rows.add(V.linear.row(next), spec.capacity - V.offset[next], {RowKind::volume_upper, e, k});

      // pre-overflow volume V_{k+1} + dt * qw_k against the tightened capacity
      Eigen::RowVectorXd pre = V.linear.row(next);
      pre[N * nt + k * nw + static_cast<Eigen::Index>(model.weir_ordinal(e))] += dt;
      rows.add(pre, spec.capacity - sd_next * zg - V.offset[next], {RowKind::volume_switching, e, k}, new_c(), -1.0);

      const double cu = spec.beta * sd_now * za;
      Eigen::RowVectorXd cuo = -spec.beta * V.linear.row(now);
      cuo[now] += 1.0;
      rows.add(cuo, spec.beta * V.offset[now] - cu, {RowKind::outflow_upper, e, k}, new_s(cu), -1.0);
    }
    for (Eigen::Index p = 0; p < np; ++p) {
      const auto e = model.pipes()[static_cast<std::size_t>(p)];
      const auto& spec = model.element(e);
      const double za = normal_quantile(cfg.alpha_of(spec.id));
      const double zg = normal_quantile(cfg.gamma_of(spec.id));
      const Eigen::Index i = k * np + p;
      const Eigen::Index ie = k * static_cast<Eigen::Index>(model.element_count()) + static_cast<Eigen::Index>(e);
      const double sd = std::sqrt(std::max(0.0, var.inflow(k, static_cast<Eigen::Index>(e))));
      const auto& Q = pred.pipe_outflow;

      const double pl = sd * za;
      rows.add(-Q.linear.row(i), Q.offset[i] - pl, {RowKind::pipe_lower, e, k}, new_s(pl), -1.0);
      rows.add(Q.linear.row(i), spec.pipe_capacity - Q.offset[i], {RowKind::pipe_upper, e, k});
      rows.add(pred.inflow.linear.row(ie), spec.pipe_capacity - sd * zg - pred.inflow.offset[ie],
               {RowKind::pipe_switching, e, k}, new_c(), -1.0);
    }
  }
  rows.finish(qp);
  return qp;
}

inline QpProblem assemble_ccmpc_qp(const NetworkModel& model, const SystemState& x0,
                                   const Eigen::VectorXd& initial_volume_var, const Forecast& forecast,
                                   const Eigen::VectorXd& u_prev, const ControllerConfig& cfg) {
  detail::check_controller_inputs(model, x0, forecast, u_prev, cfg);
  if (!forecast.variance.allFinite() || (forecast.variance.array() < 0.0).any())
    throw std::invalid_argument("forecast variance must be finite and non-negative");
  Forecast window = forecast;
  window.mean = forecast.mean.leftCols(cfg.horizon);
  window.variance = forecast.variance.leftCols(cfg.horizon);
  const auto var = propagate_variances(model, initial_volume_var, window);
  return assemble_ccmpc_qp(model, build_prediction(model, x0, forecast, cfg.horizon), var, u_prev, cfg);
}

struct ControlPlan {
  Eigen::MatrixXd u;   ///< N x tanks
  Eigen::MatrixXd qw;  ///< N x weirs
  Eigen::VectorXd s, c;
  double objective = std::numeric_limits<double>::quiet_NaN();
  QpStatus status = QpStatus::max_iter;
  QpSolution solution;
};

/// Raised when a plan cannot be turned into a control.
class ControllerError : public std::runtime_error {
 public:
  ControllerError(const std::string& msg, QpStatus status, KktResiduals residuals)
      : std::runtime_error(msg), status_(status), residuals_(residuals) {}
  QpStatus status() const noexcept { return status_; }
  const KktResiduals& residuals() const noexcept { return residuals_; }

 private:
  QpStatus status_;
  KktResiduals residuals_;
};

inline ControlPlan make_plan(const QpProblem& qp, QpSolution sol, std::size_t tanks, std::size_t weirs) {
  ControlPlan plan;
  const auto nt = static_cast<Eigen::Index>(tanks), nw = static_cast<Eigen::Index>(weirs);
  const Eigen::Index N = nt > 0 ? qp.layout.u.size / nt : 0;
  plan.u.resize(N, nt);
  plan.qw.resize(N, nw);
  for (Eigen::Index k = 0; k < N; ++k) {
    for (Eigen::Index t = 0; t < nt; ++t) plan.u(k, t) = sol.primal[qp.layout.u.offset + k * nt + t];
    for (Eigen::Index w = 0; w < nw; ++w) plan.qw(k, w) = sol.primal[qp.layout.qw.offset + k * nw + w];
  }
  plan.s = sol.primal.segment(qp.layout.s.offset, qp.layout.s.size);
  plan.c = sol.primal.segment(qp.layout.c.offset, qp.layout.c.size);
  plan.objective = sol.objective;
  plan.status = sol.status;
  plan.solution = std::move(sol);
  return plan;
}

/// First-step control, clipped to [0, control cap]. Accepts optimal plans and
/// iteration-limited plans whose primal residual is within `feasibility_tol`.
inline Eigen::VectorXd extract_first_control(const ControlPlan& plan, const NetworkModel& model,
                                             double feasibility_tol = 1e-6) {
  const auto& r = plan.solution.residuals;
  const bool usable =
      plan.status == QpStatus::optimal || (plan.status == QpStatus::max_iter && r.primal <= feasibility_tol);
  if (!usable)
    throw ControllerError(std::string("controller QP not solved (") + to_string(plan.status) + ")", plan.status, r);
  if (plan.u.rows() < 1 || static_cast<std::size_t>(plan.u.cols()) != model.tank_count())
    throw DimensionError("plan does not match the network");
  Eigen::VectorXd u(plan.u.cols());
  for (Eigen::Index t = 0; t < u.size(); ++t) {
    const double cap = model.element(model.tanks()[static_cast<std::size_t>(t)]).control_cap;
    const double v = plan.u(0, t);
    if (!std::isfinite(v))
      throw ControllerError("controller produced a non-finite control", plan.status, r);
    u[t] = std::clamp(v, 0.0, cap);
  }
  return u;
}

enum class ControllerKind { deterministic, chance_constrained };

/// Receding-horizon controller holding the reusable prediction structure.
class Controller {
 public:
  Controller(const NetworkModel& model, ControllerKind kind, ControllerConfig cfg, SolverSettings settings = {})
      : model_(&model), kind_(kind), cfg_(std::move(cfg)), settings_(settings) {
    cfg_.validate();
    pred_ = build_prediction_linear(model, cfg_.horizon);
  }

  ControllerKind kind() const noexcept { return kind_; }
  const ControllerConfig& config() const noexcept { return cfg_; }

  /// Builds the QP for the current state. Volume variances default to zero
  /// (the state is measured).
  QpProblem assemble(const SystemState& x0, const Forecast& forecast, const Eigen::VectorXd& u_prev,
                     const Eigen::VectorXd* initial_volume_var = nullptr) {
    detail::check_controller_inputs(*model_, x0, forecast, u_prev, cfg_);
    set_prediction_offsets(pred_, *model_, x0, forecast);
    if (kind_ == ControllerKind::deterministic) return assemble_deterministic_qp(*model_, pred_, u_prev, cfg_);
    Forecast window = forecast;
    window.mean = forecast.mean.leftCols(cfg_.horizon);
    window.variance = forecast.variance.leftCols(cfg_.horizon);
    const Eigen::VectorXd v0 = initial_volume_var
                                   ? *initial_volume_var
                                   : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model_->tank_count()));
    return assemble_ccmpc_qp(*model_, pred_, propagate_variances(*model_, v0, window), u_prev, cfg_);
  }

  ControlPlan plan(const SystemState& x0, const Forecast& forecast, const Eigen::VectorXd& u_prev,
                   const Eigen::VectorXd* initial_volume_var = nullptr) {
    const QpProblem qp = assemble(x0, forecast, u_prev, initial_volume_var);
    return make_plan(qp, solve(qp, settings_), model_->tank_count(), model_->weir_count());
  }

 private:
  const NetworkModel* model_;
  ControllerKind kind_;
  ControllerConfig cfg_;
  SolverSettings settings_;
  PredictionOperator pred_;
};

}  // namespace ccmpc
