#pragma once

// Probabilistic machinery for the chance-constrained controller: normal
// quantiles, rain forecasts with their uncertainty, truncated-Gaussian
// sampling of realized inflows, and the variance propagation through the
// linear network model.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>

#include "ccmpc/errors.hpp"
#include "ccmpc/network.hpp"

namespace ccmpc {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double normal_pdf(double z) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return inv_sqrt_2pi * std::exp(-0.5 * z * z);
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation (relative error ~1e-9) followed by one
/// Halley step against the erfc-based CDF, which brings the result to full
/// double precision over (1e-300, 1 - 1e-16).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_quantile: probability must lie in (0, 1)");

  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }

  // Halley refinement; the residual is taken on the smaller tail for accuracy.
  const double e = (x <= 0.0) ? normal_cdf(x) - p : (1.0 - p) - normal_cdf(-x);
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

/// Rain forecast over a horizon: one row per catchment, one column per step.
struct Forecast {
  Eigen::MatrixXd mean;      ///< expected inflow [m3/min]
  Eigen::MatrixXd variance;  ///< inflow variance [(m3/min)^2]

  Eigen::Index steps() const noexcept { return mean.cols(); }
  Eigen::Index catchments() const noexcept { return mean.rows(); }
};

/// Forecast standard deviation as a function of the expected intensity:
/// sigma = relative * expected + absolute, in um/s.
struct UncertaintyModel {
  double relative = 1.0 / 3.0;
  double absolute = 0.01;

  double sigma(double intensity) const { return relative * intensity + absolute; }
};

/// Converts a nominal intensity trajectory [um/s] (catchment x step) into a
/// forecast with the given uncertainty model.
inline Forecast make_forecast(const Eigen::MatrixXd& nominal_intensity, const NetworkModel& model,
                              const UncertaintyModel& uncertainty = {}) {
  if (static_cast<std::size_t>(nominal_intensity.rows()) != model.catchment_count())
    throw DimensionError("forecast needs one row per catchment");
  Forecast f;
  f.mean.resize(nominal_intensity.rows(), nominal_intensity.cols());
  f.variance.resize(nominal_intensity.rows(), nominal_intensity.cols());
  for (Eigen::Index c = 0; c < nominal_intensity.rows(); ++c) {
    const double area = model.catchments()[static_cast<std::size_t>(c)].area;
    for (Eigen::Index k = 0; k < nominal_intensity.cols(); ++k) {
      const double intensity = nominal_intensity(c, k);
      f.mean(c, k) = rain_to_flow(intensity, area);
      const double sd = rain_to_flow(uncertainty.sigma(intensity), area);
      f.variance(c, k) = sd * sd;
    }
  }
  return f;
}

/// Perfect-knowledge forecast: the nominal trajectory with zero variance.
inline Forecast make_deterministic_forecast(const Eigen::MatrixXd& nominal_intensity, const NetworkModel& model) {
  Forecast f = make_forecast(nominal_intensity, model, {0.0, 0.0});
  f.variance.setZero();
  return f;
}

/// Uniform double in [0, 1) from the top 53 bits; platform independent.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Independent, reproducible stream for (seed, a, b), e.g. (run seed, scenario, catchment).
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

/// One draw from N(mean, sigma^2) truncated to [lo, hi] by inverse-CDF sampling.
inline double sample_truncated_gaussian(double mean, double sigma, double lo, double hi, std::mt19937_64& rng) {
  if (!(lo < hi)) throw std::invalid_argument("sample_truncated_gaussian: requires lo < hi");
  if (!(sigma >= 0.0)) throw std::invalid_argument("sample_truncated_gaussian: sigma must be non-negative");
  const double u = uniform01(rng);
  if (sigma == 0.0) return std::clamp(mean, lo, hi);

  const double za = (lo - mean) / sigma;
  const double zb = (hi - mean) / sigma;
  double z;
  if (za > 0.0) {
    // Entirely in the upper tail: work with survival probabilities.
    const double qa = normal_cdf(-za);
    const double qb = normal_cdf(-zb);
    const double q = std::clamp(qa - u * (qa - qb), std::numeric_limits<double>::min(), 1.0);
    z = q >= 1.0 ? za : -normal_quantile(q);
  } else {
    const double pa = normal_cdf(za);
    const double pb = normal_cdf(zb);
    const double p = std::clamp(pa + u * (pb - pa), std::numeric_limits<double>::min(), 1.0 - 0x1.0p-53);
    z = normal_quantile(p);
  }
  return std::clamp(mean + sigma * z, lo, hi);
}

/// Variances of the network quantities over a horizon of N steps.
/// Row k of each matrix is sample k; columns follow the model's ordinals.
struct VarianceTrajectories {
  Eigen::MatrixXd volume;        ///< (N+1) x tanks
  Eigen::MatrixXd delay;         ///< (N+1) x registers
  Eigen::MatrixXd inflow;        ///< N x elements
  Eigen::MatrixXd pipe_outflow;  ///< N x pipes

  Eigen::Index horizon() const noexcept { return inflow.rows(); }

  /// Stacked vector: volume, delay, inflow, pipe_outflow, each row-major by step.
  Eigen::VectorXd flatten() const {
    Eigen::VectorXd out(volume.size() + delay.size() + inflow.size() + pipe_outflow.size());
    Eigen::Index pos = 0;
    for (const Eigen::MatrixXd* m : {&volume, &delay, &inflow, &pipe_outflow})
      for (Eigen::Index k = 0; k < m->rows(); ++k)
        for (Eigen::Index j = 0; j < m->cols(); ++j) out[pos++] = (*m)(k, j);
    return out;
  }
};

namespace detail {

/// Runs the variance recursion over any value type supporting +, scalar *.
/// `Row` is double for the scalar path or a coefficient row for the stacked operator.
template <class Row, class RainTerm, class InitialVolume>
void variance_recursion(const NetworkModel& model, Eigen::Index horizon, const Row& zero, RainTerm rain_term,
                        InitialVolume initial_volume, std::vector<std::vector<Row>>& volume,
                        std::vector<std::vector<Row>>& delay, std::vector<std::vector<Row>>& inflow,
                        std::vector<std::vector<Row>>& pipe_outflow) {
  const std::size_t nt = model.tank_count(), nr = model.register_count(), ne = model.element_count(),
                    np = model.pipe_count();
  const auto n = static_cast<std::size_t>(horizon);
  const double dt2 = model.dt() * model.dt();
  volume.assign(n + 1, std::vector<Row>(nt, zero));
  delay.assign(n + 1, std::vector<Row>(nr, zero));
  inflow.assign(n, std::vector<Row>(ne, zero));
  pipe_outflow.assign(n, std::vector<Row>(np, zero));
  for (std::size_t t = 0; t < nt; ++t) volume[0][t] = initial_volume(t);

  for (std::size_t k = 0; k < n; ++k) {
    for (auto i : model.topological_order()) {
      const auto& r = model.routing(i);
      Row v = zero;
      if (r.rain) v = v + rain_term(*r.rain, k);
      for (auto p : r.pipe_outflows) v = v + pipe_outflow[k][p];
      for (auto c : r.delay_outflows) v = v + delay[k][model.chain_tail(c)];
      inflow[k][i] = v;
      if (model.element(i).kind == ElementKind::weir_pipe) pipe_outflow[k][model.ordinal(i)] = v;
    }
    for (std::size_t t = 0; t < nt; ++t) volume[k + 1][t] = volume[k][t] + dt2 * inflow[k][model.tanks()[t]];
    for (std::size_t c = 0; c < model.chain_count(); ++c) {
      const std::size_t head = model.register_offset(c), tail = model.chain_tail(c);
      for (std::size_t j = tail; j > head; --j) delay[k + 1][j] = delay[k][j - 1];
      delay[k + 1][head] = inflow[k][model.chains()[c]];
    }
  }
}

}  // namespace detail

/// Propagates initial tank-volume variances and rain variances through the
/// linear network. Controls and weir flows are decision variables and carry
/// no variance; weir clipping is ignored. Delay registers start certain.
inline VarianceTrajectories propagate_variances(const NetworkModel& model, const Eigen::VectorXd& initial_volume_var,
                                                const Forecast& forecast) {
  if (static_cast<std::size_t>(initial_volume_var.size()) != model.tank_count())
    throw DimensionError("propagate_variances: one initial variance per tank expected");
  if (static_cast<std::size_t>(forecast.catchments()) != model.catchment_count() ||
      forecast.variance.cols() != forecast.steps())
    throw DimensionError("propagate_variances: forecast does not match the network");

  std::vector<std::vector<double>> vol, del, in, pout;
  detail::variance_recursion<double>(
      model, forecast.steps(), 0.0,
      [&](std::size_t c, std::size_t k) {
        return forecast.variance(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k));
      },
      [&](std::size_t t) { return initial_volume_var[static_cast<Eigen::Index>(t)]; }, vol, del, in, pout);

  auto to_matrix = [](const std::vector<std::vector<double>>& rows, std::size_t cols) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t j = 0; j < cols; ++j) m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = rows[k][j];
    return m;
  };
  VarianceTrajectories out;
  out.volume = to_matrix(vol, model.tank_count());
  out.delay = to_matrix(del, model.register_count());
  out.inflow = to_matrix(in, model.element_count());
  out.pipe_outflow = to_matrix(pout, model.pipe_count());
  return out;
}

/// Linear map from (initial tank variances, rain variances) to every propagated
/// variance: flatten() == initial * sigma2_V0 + rain * vec(sigma2_w), where
/// vec stacks the rain variances step-major (index k * catchments + c).
struct VarianceOperator {
  Eigen::MatrixXd initial;  ///< outputs x tanks
  Eigen::MatrixXd rain;     ///< outputs x (N * catchments)

  Eigen::VectorXd apply(const Eigen::VectorXd& initial_volume_var, const Eigen::MatrixXd& rain_var) const {
    Eigen::VectorXd w(rain.cols());
    const Eigen::Index nc = rain_var.rows();
    for (Eigen::Index k = 0; k < rain_var.cols(); ++k)
      for (Eigen::Index c = 0; c < nc; ++c) w[k * nc + c] = rain_var(c, k);
    return initial * initial_volume_var + rain * w;
  }
};

inline VarianceOperator build_variance_operator(const NetworkModel& model, Eigen::Index horizon) {
  const auto nt = static_cast<Eigen::Index>(model.tank_count());
  const auto nc = static_cast<Eigen::Index>(model.catchment_count());
  const Eigen::Index width = nt + nc * horizon;
  using Row = Eigen::RowVectorXd;
  const Row zero = Row::Zero(width);

  std::vector<std::vector<Row>> vol, del, in, pout;
  detail::variance_recursion<Row>(
      model, horizon, zero,
      [&](std::size_t c, std::size_t k) {
        Row r = zero;
        r[nt + static_cast<Eigen::Index>(k) * nc + static_cast<Eigen::Index>(c)] = 1.0;
        return r;
      },
      [&](std::size_t t) {
        Row r = zero;
        r[static_cast<Eigen::Index>(t)] = 1.0;
        return r;
      },
      vol, del, in, pout);

  Eigen::Index rows = 0;
  for (const auto* block : {&vol, &del, &in, &pout})
    for (const auto& step : *block) rows += static_cast<Eigen::Index>(step.size());
  Eigen::MatrixXd stacked(rows, width);
  Eigen::Index pos = 0;
  for (const auto* block : {&vol, &del, &in, &pout})
    for (const auto& step : *block)
      for (const auto& r : step) stacked.row(pos++) = r;

  return {stacked.leftCols(nt), stacked.rightCols(nc * horizon)};
}

}  // namespace ccmpc
