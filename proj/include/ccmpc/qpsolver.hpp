#pragma once

// Primal-dual interior-point solver (Mehrotra predictor-corrector) for the
// dense QPs in qp.hpp.
//
// All inequalities, general rows and finite bounds alike, are handled as
// G d + s = h with s >= 0 and multipliers z >= 0. Each iteration solves the
// normal equations (H + G' W G) dx = r with W = z / s.
//
// Block structure: a variable whose Hessian row is diagonal and which appears
// in at most one row of A (and never shares that row with another such
// variable) contributes a diagonal block to the normal matrix. Those variables
// are eliminated by a Schur complement, leaving a dense Cholesky over the
// remaining coupled variables only. Slack-type variables of the controller
// QPs all fall in this class.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ccmpc/qp.hpp"

namespace ccmpc {

struct SolverSettings {
  int max_iterations = 100;
  double eps_abs = 1e-8;   ///< primal, scaled dual and complementarity tolerance
  double eps_rel = 1e-12;  ///< duality gap relative to (1 + |objective|)
  /// Iterations allowed after the gap has come within eps_abs * (1 + |f|_inf)
  /// but not yet within eps_rel. If they do not close it, that pair is accepted:
  /// degenerate problems can stall there with diverging multipliers.
  int gap_iterations = 12;
  double regularization = 1e-12;  ///< first diagonal shift tried when a factorization fails
  double infeasibility_threshold = 1e12;
  bool verbose = false;  ///< per-iteration log on stderr
};

enum class QpStatus { optimal, infeasible, max_iter };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::infeasible: return "infeasible";
    case QpStatus::max_iter: return "max_iter";
  }
  return "?";
}

/// KKT residuals: primal infeasibility (inf-norm of constraint violation),
/// dual residual (inf-norm of the Lagrangian gradient and of any negative
/// multiplier, divided by 1 + |f|_inf), and the largest |multiplier * slack|.
/// Row slacks b - A d are summed column by column in ascending order, the same
/// order the solver uses, so both see identical rounding.
struct KktResiduals {
  double primal = 0.0;
  double dual = 0.0;
  double complementarity = 0.0;

  double max() const noexcept { return std::max({primal, dual, complementarity}); }
};

struct QpSolution {
  Eigen::VectorXd primal;
  Eigen::VectorXd dual;        ///< multipliers of A d <= b
  Eigen::VectorXd dual_lower;  ///< multipliers of d >= lower (zero where unbounded)
  Eigen::VectorXd dual_upper;  ///< multipliers of d <= upper
  double objective = std::numeric_limits<double>::quiet_NaN();
  QpStatus status = QpStatus::max_iter;
  int iterations = 0;
  double solve_seconds = 0.0;
  KktResiduals residuals;
  /// For infeasible problems: non-negative weights y on (rows, lower, upper)
  /// with G'y ~ 0 and h'y < 0. Empty otherwise.
  Eigen::VectorXd certificate;
};

/// Residuals of (problem, solution) evaluated directly from their definition.
inline KktResiduals kkt_residuals(const QpProblem& qp, const QpSolution& sol) {
  qp.check_dimensions();
  const Eigen::Index n = qp.variables(), m = qp.rows();
  if (sol.primal.size() != n || sol.dual.size() != m || sol.dual_lower.size() != n || sol.dual_upper.size() != n)
    throw std::invalid_argument("kkt_residuals: solution does not match the problem");
  const auto& d = sol.primal;
  KktResiduals r;

  Eigen::VectorXd grad = qp.H * d + qp.f;
  if (m > 0) grad.noalias() += qp.A.transpose() * sol.dual;
  grad -= sol.dual_lower;
  grad += sol.dual_upper;
  double dual = grad.lpNorm<Eigen::Infinity>();
  if (m > 0) dual = std::max(dual, -sol.dual.minCoeff());
  if (n > 0) dual = std::max({dual, -sol.dual_lower.minCoeff(), -sol.dual_upper.minCoeff()});
  // Dual and complementarity are relative to the cost scale: multipliers of
  // active constraints can reach |f| times the problem conditioning, and their
  // products with rounding-level slacks are not resolvable in absolute terms.
  const double scale = 1.0 + (n > 0 ? qp.f.lpNorm<Eigen::Infinity>() : 0.0);
  r.dual = dual / scale;
  for (Eigen::Index i = 0; i < m; ++i) {
    double ad = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (qp.A(i, j) != 0.0) ad += qp.A(i, j) * d[j];
    const double slack = qp.b[i] - ad;
    r.primal = std::max(r.primal, -slack);
    r.complementarity = std::max(r.complementarity, std::abs(sol.dual[i] * slack));
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    if (std::isfinite(qp.lower[j])) {
      r.primal = std::max(r.primal, qp.lower[j] - d[j]);
      r.complementarity = std::max(r.complementarity, std::abs(sol.dual_lower[j] * (d[j] - qp.lower[j])));
    } else if (sol.dual_lower[j] != 0.0) {
      r.dual = std::max(r.dual, std::abs(sol.dual_lower[j]));
    }
    if (std::isfinite(qp.upper[j])) {
      r.primal = std::max(r.primal, d[j] - qp.upper[j]);
      r.complementarity = std::max(r.complementarity, std::abs(sol.dual_upper[j] * (qp.upper[j] - d[j])));
    } else if (sol.dual_upper[j] != 0.0) {
      r.dual = std::max(r.dual, std::abs(sol.dual_upper[j]));
    }
  }
  r.complementarity /= scale;
  return r;
}

namespace detail {

/// Inequality system G d <= h built from (A, b, lower, upper) without forming G.
class InequalitySystem {
 public:
  explicit InequalitySystem(const QpProblem& qp) : n_(qp.variables()), m_(qp.rows()) {
    // two column-wise passes (A is column-major)
    row_start_.assign(static_cast<std::size_t>(m_) + 1, 0);
    for (Eigen::Index j = 0; j < n_; ++j)
      for (Eigen::Index r = 0; r < m_; ++r)
        if (qp.A(r, j) != 0.0) ++row_start_[static_cast<std::size_t>(r) + 1];
    for (std::size_t r = 0; r < static_cast<std::size_t>(m_); ++r) row_start_[r + 1] += row_start_[r];
    cols_.resize(static_cast<std::size_t>(row_start_.back()));
    vals_.resize(cols_.size());
    std::vector<Eigen::Index> fill(row_start_.begin(), row_start_.end() - 1);
    for (Eigen::Index j = 0; j < n_; ++j)
      for (Eigen::Index r = 0; r < m_; ++r) {
        const double a = qp.A(r, j);
        if (a == 0.0) continue;
        const auto k = static_cast<std::size_t>(fill[static_cast<std::size_t>(r)]++);
        cols_[k] = j;
        vals_[k] = a;
      }
    for (Eigen::Index j = 0; j < n_; ++j) {
      if (std::isfinite(qp.lower[j])) lower_idx_.push_back(j);
      if (std::isfinite(qp.upper[j])) upper_idx_.push_back(j);
    }
    h_.resize(size());
    h_.head(m_) = qp.b;
    for (std::size_t i = 0; i < lower_idx_.size(); ++i) h_[m_ + static_cast<Eigen::Index>(i)] = -qp.lower[lower_idx_[i]];
    const Eigen::Index uo = m_ + static_cast<Eigen::Index>(lower_idx_.size());
    for (std::size_t i = 0; i < upper_idx_.size(); ++i) h_[uo + static_cast<Eigen::Index>(i)] = qp.upper[upper_idx_[i]];
  }

  Eigen::Index size() const noexcept {
    return m_ + static_cast<Eigen::Index>(lower_idx_.size() + upper_idx_.size());
  }
  Eigen::Index rows() const noexcept { return m_; }
  const Eigen::VectorXd& h() const noexcept { return h_; }
  const std::vector<Eigen::Index>& lower_idx() const noexcept { return lower_idx_; }
  const std::vector<Eigen::Index>& upper_idx() const noexcept { return upper_idx_; }
  Eigen::Index row_begin(Eigen::Index r) const { return row_start_[static_cast<std::size_t>(r)]; }
  Eigen::Index row_end(Eigen::Index r) const { return row_start_[static_cast<std::size_t>(r) + 1]; }
  Eigen::Index col(Eigen::Index k) const { return cols_[static_cast<std::size_t>(k)]; }
  double val(Eigen::Index k) const { return vals_[static_cast<std::size_t>(k)]; }

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(size());
    for (Eigen::Index r = 0; r < m_; ++r) {
      double acc = 0.0;
      for (Eigen::Index k = row_begin(r); k < row_end(r); ++k) acc += val(k) * x[col(k)];
      out[r] = acc;
    }
    Eigen::Index pos = m_;
    for (auto j : lower_idx_) out[pos++] = -x[j];
    for (auto j : upper_idx_) out[pos++] = x[j];
    return out;
  }

  Eigen::VectorXd apply_transpose(const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n_);
    for (Eigen::Index r = 0; r < m_; ++r) {
      const double vr = v[r];
      if (vr == 0.0) continue;
      for (Eigen::Index k = row_begin(r); k < row_end(r); ++k) out[col(k)] += val(k) * vr;
    }
    Eigen::Index pos = m_;
    for (auto j : lower_idx_) out[j] -= v[pos++];
    for (auto j : upper_idx_) out[j] += v[pos++];
    return out;
  }

 private:
  Eigen::Index n_, m_;
  std::vector<Eigen::Index> row_start_, cols_;
  std::vector<double> vals_;
  std::vector<Eigen::Index> lower_idx_, upper_idx_;
  Eigen::VectorXd h_;
};

/// Solves (H + G' W G) x = r, eliminating separable variables first.
class NormalSolver {
 public:
  NormalSolver(const QpProblem& qp, const InequalitySystem& g) : g_(g), n_(qp.variables()) {
    const Eigen::Index m = g.rows();
    std::vector<int> col_count(static_cast<std::size_t>(n_), 0);
    std::vector<Eigen::Index> col_row(static_cast<std::size_t>(n_), -1);
    std::vector<double> col_val(static_cast<std::size_t>(n_), 0.0);
    for (Eigen::Index r = 0; r < m; ++r)
      for (Eigen::Index k = g.row_begin(r); k < g.row_end(r); ++k) {
        const auto j = static_cast<std::size_t>(g.col(k));
        ++col_count[j];
        col_row[j] = r;
        col_val[j] = g.val(k);
      }

    row_sep_.assign(static_cast<std::size_t>(m), -1);
    sep_row_.assign(static_cast<std::size_t>(n_), -1);
    sep_a_.assign(static_cast<std::size_t>(n_), 0.0);
    is_sep_.assign(static_cast<std::size_t>(n_), false);
    for (Eigen::Index j = 0; j < n_; ++j) {
      const auto js = static_cast<std::size_t>(j);
      if (col_count[js] > 1) continue;
      bool diagonal = true;
      for (Eigen::Index i = 0; i < n_ && diagonal; ++i)
        if (i != j && qp.H(i, j) != 0.0) diagonal = false;  // H is symmetric
      if (!diagonal) continue;
      if (col_count[js] == 1) {
        const auto r = static_cast<std::size_t>(col_row[js]);
        if (row_sep_[r] >= 0) continue;
        row_sep_[r] = j;
        sep_row_[js] = col_row[js];
        sep_a_[js] = col_val[js];
      }
      is_sep_[js] = true;
    }
    coupled_index_.assign(static_cast<std::size_t>(n_), -1);
    for (Eigen::Index j = 0; j < n_; ++j)
      if (!is_sep_[static_cast<std::size_t>(j)]) {
        coupled_index_[static_cast<std::size_t>(j)] = static_cast<Eigen::Index>(coupled_.size());
        coupled_.push_back(j);
      }
    const auto nc = static_cast<Eigen::Index>(coupled_.size());
    h_cc_.resize(nc, nc);
    for (Eigen::Index a = 0; a < nc; ++a)
      for (Eigen::Index b = 0; b < nc; ++b) h_cc_(a, b) = qp.H(coupled_[static_cast<std::size_t>(a)], coupled_[static_cast<std::size_t>(b)]);
    h_diag_ = qp.H.diagonal();
    // Coupled part of each row, with rows that agree up to sign sharing one
    // pattern (the volume bounds of a tank at a step all read the same
    // prediction row), so each pattern's outer product is formed once.
    std::map<std::vector<std::pair<Eigen::Index, double>>, std::size_t> seen;
    cc_start_.assign(1, 0);
    row_group_.assign(static_cast<std::size_t>(m), -1);
    for (Eigen::Index r = 0; r < m; ++r) {
      std::vector<std::pair<Eigen::Index, double>> entries;
      for (Eigen::Index k = g.row_begin(r); k < g.row_end(r); ++k) {
        const Eigen::Index ca = coupled_index_[static_cast<std::size_t>(g.col(k))];
        if (ca >= 0) entries.emplace_back(ca, g.val(k));
      }
      if (entries.empty()) continue;
      std::sort(entries.begin(), entries.end());
      std::vector<std::pair<Eigen::Index, double>> merged;
      for (const auto& e : entries) {
        if (!merged.empty() && merged.back().first == e.first) merged.back().second += e.second;
        else merged.push_back(e);
      }
      if (merged.front().second < 0.0)
        for (auto& e : merged) e.second = -e.second;
      auto [it, inserted] = seen.emplace(merged, cc_start_.size() - 1);
      if (inserted) {
        for (const auto& [ca, v] : merged) {
          cc_idx_.push_back(ca);
          cc_val_.push_back(v);
        }
        cc_start_.push_back(cc_idx_.size());
      }
      row_group_[static_cast<std::size_t>(r)] = static_cast<Eigen::Index>(it->second);
    }
    group_w_.resize(static_cast<Eigen::Index>(cc_start_.size() - 1));
  }

  Eigen::Index coupled_count() const noexcept { return static_cast<Eigen::Index>(coupled_.size()); }
  const Eigen::MatrixXd& coupled_hessian() const noexcept { return h_cc_; }
  bool separable(Eigen::Index j) const { return is_sep_[static_cast<std::size_t>(j)]; }

  /// H * x using the block structure (H_cs = 0, H_ss diagonal).
  Eigen::VectorXd hessian_times(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(n_);
    Eigen::VectorXd xc(coupled_count());
    for (Eigen::Index a = 0; a < coupled_count(); ++a) xc[a] = x[coupled_[static_cast<std::size_t>(a)]];
    const Eigen::VectorXd hc = h_cc_ * xc;
    for (Eigen::Index j = 0; j < n_; ++j) out[j] = h_diag_[j] * x[j];
    for (Eigen::Index a = 0; a < coupled_count(); ++a) out[coupled_[static_cast<std::size_t>(a)]] = hc[a];
    return out;
  }

  /// Factorizes for the weights W (one per inequality of g). Returns false if
  /// no diagonal shift up to 1e-2 * scale made the matrix positive definite.
  bool factorize(const Eigen::VectorXd& w, double first_shift) {
    const Eigen::Index m = g_.rows();
    bound_w_ = Eigen::VectorXd::Zero(n_);
    Eigen::Index pos = m;
    for (auto j : g_.lower_idx()) bound_w_[j] += w[pos++];
    for (auto j : g_.upper_idx()) bound_w_[j] += w[pos++];

    sep_d_ = Eigen::VectorXd::Zero(n_);
    raw_w_ = w.head(m);
    row_w_.resize(m);
    for (Eigen::Index r = 0; r < m; ++r) row_w_[r] = w[r];
    const double tiny = std::numeric_limits<double>::min();
    for (Eigen::Index j = 0; j < n_; ++j) {
      const auto js = static_cast<std::size_t>(j);
      if (!is_sep_[js]) continue;
      const double own = h_diag_[j] + bound_w_[j];
      double d = own;
      if (sep_row_[js] >= 0) {
        const Eigen::Index r = sep_row_[js];
        const double a = sep_a_[js];
        d += w[r] * a * a;
        // W_r - (W_r a)^2 / d, written without cancellation
        row_w_[r] = d > tiny ? w[r] * own / d : 0.0;
      }
      sep_d_[j] = std::max(d, tiny);
    }

    const Eigen::Index nc = coupled_count();
    // member storage: a fresh 0.8 MB matrix per iteration costs as much as the LLT
    Eigen::MatrixXd& normal = normal_;
    normal = h_cc_;
    for (Eigen::Index a = 0; a < nc; ++a) normal(a, a) += bound_w_[coupled_[static_cast<std::size_t>(a)]];

    group_w_.setZero();
    for (Eigen::Index r = 0; r < m; ++r)
      if (row_group_[static_cast<std::size_t>(r)] >= 0) group_w_[row_group_[static_cast<std::size_t>(r)]] += row_w_[r];
    for (Eigen::Index grp = 0; grp < group_w_.size(); ++grp) {
      const double wg = group_w_[grp];
      if (wg == 0.0) continue;
      // entries are in ascending order, so k >= l stays in the lower triangle
      const std::size_t b0 = cc_start_[static_cast<std::size_t>(grp)], b1 = cc_start_[static_cast<std::size_t>(grp) + 1];
      for (std::size_t l = b0; l < b1; ++l) {
        const double vl = wg * cc_val_[l];
        double* col = normal.col(cc_idx_[l]).data();
        for (std::size_t k = l; k < b1; ++k) col[cc_idx_[k]] += vl * cc_val_[k];
      }
    }
    if (nc == 0) return true;

    const double scale = std::max(1.0, normal.diagonal().cwiseAbs().maxCoeff());
    double shift = 0.0;
    for (int attempt = 0; attempt < 12; ++attempt) {
      llt_.compute(normal);
      if (llt_.info() == Eigen::Success) return true;
      const double next = shift == 0.0 ? first_shift * scale : shift * 100.0;
      if (next > 1e-2 * scale) break;
      normal.diagonal().array() += next - shift;
      shift = next;
    }
    return false;
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    const Eigen::Index nc = coupled_count();
    Eigen::VectorXd rc(nc);
    for (Eigen::Index a = 0; a < nc; ++a) rc[a] = rhs[coupled_[static_cast<std::size_t>(a)]];
    for (Eigen::Index j = 0; j < n_; ++j) {
      const auto js = static_cast<std::size_t>(j);
      if (!is_sep_[js] || sep_row_[js] < 0) continue;
      const Eigen::Index r = sep_row_[js];
      const double coef = g_row_weight(r) * sep_a_[js] * rhs[j] / sep_d_[j];
      if (coef == 0.0) continue;
      for (Eigen::Index k = g_.row_begin(r); k < g_.row_end(r); ++k) {
        const Eigen::Index ca = coupled_index_[static_cast<std::size_t>(g_.col(k))];
        if (ca >= 0) rc[ca] -= g_.val(k) * coef;
      }
    }
    Eigen::VectorXd xc = nc > 0 ? Eigen::VectorXd(llt_.solve(rc)) : Eigen::VectorXd();
    Eigen::VectorXd x(n_);
    for (Eigen::Index a = 0; a < nc; ++a) x[coupled_[static_cast<std::size_t>(a)]] = xc[a];
    for (Eigen::Index j = 0; j < n_; ++j) {
      const auto js = static_cast<std::size_t>(j);
      if (!is_sep_[js]) continue;
      double r = rhs[j];
      if (sep_row_[js] >= 0) {
        const Eigen::Index row = sep_row_[js];
        double ax = 0.0;
        for (Eigen::Index k = g_.row_begin(row); k < g_.row_end(row); ++k) {
          const Eigen::Index ca = coupled_index_[static_cast<std::size_t>(g_.col(k))];
          if (ca >= 0) ax += g_.val(k) * xc[ca];
        }
        r -= g_row_weight(row) * sep_a_[js] * ax;
      }
      x[j] = r / sep_d_[j];
    }
    return x;
  }

 private:
  // weight of row r before the Schur reduction
  double g_row_weight(Eigen::Index r) const { return raw_w_[r]; }

  const InequalitySystem& g_;
  Eigen::Index n_;
  std::vector<Eigen::Index> row_sep_, sep_row_, coupled_index_, coupled_;
  std::vector<double> sep_a_;
  std::vector<bool> is_sep_;
  Eigen::MatrixXd h_cc_;
  Eigen::VectorXd h_diag_, bound_w_, sep_d_, row_w_, raw_w_;
  Eigen::MatrixXd normal_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  std::vector<std::size_t> cc_start_;  // distinct coupled row patterns (CSR)
  std::vector<Eigen::Index> cc_idx_;
  std::vector<double> cc_val_;
  std::vector<Eigen::Index> row_group_;  // pattern of each row, -1 if none
  Eigen::VectorXd group_w_;
};

inline double max_step(const Eigen::VectorXd& v, const Eigen::VectorXd& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (dv[i] < 0.0) alpha = std::min(alpha, -v[i] / dv[i]);
  return alpha;
}

}  // namespace detail

/// Solves a convex QP. Throws std::invalid_argument on malformed input (NaN
/// data, mismatched dimensions, non-symmetric or indefinite H). Infeasibility
/// and iteration limits are reported through the status.
inline QpSolution solve(const QpProblem& qp, const SolverSettings& settings = {},
                        const Eigen::VectorXd* warm_start = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  qp.check_dimensions();
  if (settings.max_iterations < 1 || !(settings.eps_abs > 0.0) || !(settings.eps_rel > 0.0))
    throw std::invalid_argument("solve: invalid solver settings");
  if (!qp.H.allFinite() || !qp.f.allFinite() || !qp.A.allFinite() || !qp.b.allFinite() || qp.lower.hasNaN() ||
      qp.upper.hasNaN())
    throw std::invalid_argument("solve: problem data contains NaN or infinite entries");
  // Slack products overflow long before; absent constraints are dropped rows or infinite bounds.
  constexpr double huge = 1e20;
  auto too_big = [&](const Eigen::VectorXd& v) { return (v.array().isFinite() && v.array().abs() >= huge).any(); };
  if (too_big(qp.b) || too_big(qp.lower) || too_big(qp.upper))
    throw std::invalid_argument("solve: finite right-hand sides and bounds must stay below 1e20 in magnitude");
  const Eigen::Index n = qp.variables();
  const double h_scale = std::max(1.0, n > 0 ? qp.H.cwiseAbs().maxCoeff() : 0.0);
  if (n > 0 && (qp.H - qp.H.transpose()).cwiseAbs().maxCoeff() > 1e-12 * h_scale)
    throw std::invalid_argument("solve: H is not symmetric");

  QpSolution sol;
  sol.primal = Eigen::VectorXd::Zero(n);
  sol.dual = Eigen::VectorXd::Zero(qp.rows());
  sol.dual_lower = Eigen::VectorXd::Zero(n);
  sol.dual_upper = Eigen::VectorXd::Zero(n);
  std::optional<KktResiduals> confirmed;  // residuals of the accepted pair, already evaluated
  auto finish = [&](QpSolution& s) -> QpSolution& {
    s.objective = qp.objective(s.primal);
    s.residuals = confirmed ? *confirmed : kkt_residuals(qp, s);
    s.solve_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return s;
  };

  for (Eigen::Index j = 0; j < n; ++j)
    if (qp.lower[j] > qp.upper[j]) {
      sol.status = QpStatus::infeasible;
      return finish(sol);
    }

  detail::InequalitySystem g(qp);
  detail::NormalSolver normal(qp, g);

  // Convexity: H_cc positive semidefinite and the separable diagonal non-negative.
  {
    const double tol = -1e-10 * h_scale;
    for (Eigen::Index j = 0; j < n; ++j)
      if (normal.separable(j) && qp.H(j, j) < tol) throw std::invalid_argument("solve: H is not positive semidefinite");
    if (normal.coupled_count() > 0) {
      Eigen::MatrixXd shifted = normal.coupled_hessian();
      shifted.diagonal().array() -= tol;
      if (Eigen::LLT<Eigen::MatrixXd>(shifted).info() != Eigen::Success)
        throw std::invalid_argument("solve: H is not positive semidefinite");
    }
  }

  const Eigen::Index M = g.size();
  const Eigen::VectorXd& h = g.h();
  const double f_norm = n > 0 ? qp.f.lpNorm<Eigen::Infinity>() : 0.0;

  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd s, z;

  if (M == 0) {
    if (!normal.factorize(Eigen::VectorXd(), settings.regularization))
      throw std::invalid_argument("solve: unconstrained problem with singular H");
    x = normal.solve(-qp.f);
    sol.primal = x;
    sol.iterations = 1;
    finish(sol);
    sol.status = sol.residuals.dual <= settings.eps_abs ? QpStatus::optimal : QpStatus::max_iter;
    return sol;
  }

  if (warm_start && warm_start->size() == n && warm_start->allFinite()) {
    x = *warm_start;
    s = (h - g.apply(x)).cwiseMax(1.0);
    z = Eigen::VectorXd::Ones(M);
  } else {
    // Least-squares start: minimize 1/2 x'Hx + f'x + 1/2 |Gx - h|^2, then shift
    // s = h - Gx and z = Gx - h into the positive orthant.
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(M);
    if (!normal.factorize(ones, settings.regularization))
      throw std::invalid_argument("solve: normal matrix could not be factorized");
    x = normal.solve(-qp.f + g.apply_transpose(h));
    s = h - g.apply(x);
    z = -s;
    const double sp = -s.minCoeff();
    if (sp >= -1e-8) s.array() += 1.0 + std::max(sp, 0.0);
    const double zp = -z.minCoeff();
    if (zp >= -1e-8) z.array() += 1.0 + std::max(zp, 0.0);
  }

  auto pack = [&](const Eigen::VectorXd& xv, const Eigen::VectorXd& zv) {
    sol.primal = xv;
    sol.dual = zv.head(qp.rows());
    Eigen::Index pos = qp.rows();
    for (auto j : g.lower_idx()) sol.dual_lower[j] = zv[pos++];
    for (auto j : g.upper_idx()) sol.dual_upper[j] = zv[pos++];
  };

  // Newton system
  //   H dx + G'dz = r1,   G dx + ds = r2,   Z ds + S dz = r3
  // solved through the normal equations, then refined on the unreduced
  // residuals (large weights z/s cost accuracy near degenerate solutions).
  Eigen::VectorXd w;
  constexpr double refine_tol = 1e-14;
  auto newton = [&](const Eigen::VectorXd& r1, const Eigen::VectorXd& r2, const Eigen::VectorXd& r3,
                    Eigen::VectorXd& dx, Eigen::VectorXd& ds, Eigen::VectorXd& dz) {
    auto reduced = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                       Eigen::VectorXd& px, Eigen::VectorXd& ps, Eigen::VectorXd& pz) {
      const Eigen::VectorXd t = (c - z.cwiseProduct(b)).cwiseQuotient(s);
      px = normal.solve(a - g.apply_transpose(t));
      ps = b - g.apply(px);
      pz = (c - z.cwiseProduct(ps)).cwiseQuotient(s);
    };
    reduced(r1, r2, r3, dx, ds, dz);
    const double scale = 1.0 + std::max({r1.lpNorm<Eigen::Infinity>(), r2.lpNorm<Eigen::Infinity>(),
                                         r3.lpNorm<Eigen::Infinity>()});
    double last = std::numeric_limits<double>::infinity();
    for (int refine = 0; refine < 30; ++refine) {
      const Eigen::VectorXd e1 = r1 - normal.hessian_times(dx) - g.apply_transpose(dz);
      const Eigen::VectorXd e2 = r2 - g.apply(dx) - ds;
      const Eigen::VectorXd e3 = r3 - z.cwiseProduct(ds) - s.cwiseProduct(dz);
      const double err = std::max({e1.lpNorm<Eigen::Infinity>(), e2.lpNorm<Eigen::Infinity>(),
                                   e3.lpNorm<Eigen::Infinity>()});
      if (!(err > refine_tol * scale) || !(err < 0.9 * last)) break;
      last = err;
      Eigen::VectorXd cx, cs, cz;
      reduced(e1, e2, e3, cx, cs, cz);
      dx += cx;
      ds += cs;
      dz += cz;
    }
  };

  const double res_scale = 1.0 + f_norm;
  struct Measures {
    double primal, dual, comp, gap, pobj;
    double merit() const { return std::max({primal, dual, comp}); }
  };
  auto measure = [&](const Eigen::VectorXd& xv, const Eigen::VectorXd& zv) {
    const Eigen::VectorXd slack = h - g.apply(xv);
    const Eigen::VectorXd hx = normal.hessian_times(xv);
    Measures r;
    r.primal = std::max(0.0, -slack.minCoeff());
    r.dual = (hx + qp.f + g.apply_transpose(zv)).lpNorm<Eigen::Infinity>() / res_scale;
    r.comp = zv.cwiseProduct(slack).cwiseAbs().maxCoeff() / res_scale;
    r.gap = std::abs(zv.dot(slack));
    r.pobj = 0.5 * xv.dot(hx) + qp.f.dot(xv);
    return r;
  };

  // Best (x, z) pair by the largest scaled residual, returned if the method stalls.
  double best_merit = std::numeric_limits<double>::infinity();
  double best_dual = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_x = x, best_z = z, dual_z = z;

  // Latest pair that passed the gap test with the eps_abs * (1 + |f|) allowance.
  struct Accepted {
    Eigen::VectorXd x, z;
    KktResiduals residuals;
    double gap;
  };
  std::optional<Accepted> loose;
  int since_loose = 0;

  constexpr double eta = 0.99;
  int short_steps = 0;
  for (int iter = 0; iter < settings.max_iterations; ++iter) {
    const Eigen::VectorXd gx = g.apply(x);
    const Eigen::VectorXd rp = gx + s - h;
    const Eigen::VectorXd rd = normal.hessian_times(x) + qp.f + g.apply_transpose(z);
    const double mu = s.dot(z) / static_cast<double>(M);
    sol.iterations = iter;

    // Termination on the true (not slack-based) residuals. Near degenerate
    // solutions the primal iterates keep converging after the multipliers have
    // lost accuracy, so the current x is also paired with the most dual
    // feasible z seen so far.
    const Measures cur = measure(x, z);
    bool fresh_dual = false;
    // (the latest one among those dual feasible to well below eps_abs)
    if (cur.dual < best_dual || cur.dual <= 1e-3 * settings.eps_abs) {
      best_dual = std::min(best_dual, cur.dual);
      dual_z = z;
      fresh_dual = true;
    }
    // and with that z cleared on constraints the current x leaves inactive
    Eigen::VectorXd clean_z;
    std::vector<const Eigen::VectorXd*> candidates{&z};
    if (cur.primal <= settings.eps_abs) {
      if (!fresh_dual) candidates.push_back(&dual_z);
      clean_z = dual_z;
      for (Eigen::Index i = 0; i < M; ++i)
        if (h[i] - gx[i] > clean_z[i]) clean_z[i] = 0.0;
      candidates.push_back(&clean_z);
    }
    bool done = false;
    for (const Eigen::VectorXd* zc : candidates) {
      const Measures mc = zc == &z ? cur : measure(x, *zc);
      if (settings.verbose && zc != &z)
        std::fprintf(stderr, "    candidate %s: pinf %.1e dinf %.1e cinf %.1e gap %.1e\n", zc == &dual_z ? "best-dual" : "cleaned",
                     mc.primal, mc.dual, mc.comp, mc.gap);
      if (mc.merit() < best_merit) {
        best_merit = mc.merit();
        best_x = x;
        best_z = *zc;
      }
      if (mc.merit() > settings.eps_abs) continue;
      const double strict_gap = settings.eps_rel * (1.0 + std::abs(mc.pobj + qp.constant));
      const bool strict = mc.gap <= strict_gap;
      if (!strict && !(mc.gap <= strict_gap + settings.eps_abs * res_scale)) continue;
      // Confirm with the reported residuals (evaluated independently of the iteration).
      pack(x, *zc);
      const KktResiduals r = kkt_residuals(qp, sol);
      if (r.max() > settings.eps_abs) continue;
      if (strict) {
        if (zc != &z) z = *zc;
        confirmed = r;
        done = true;
        break;
      }
      if (!loose || mc.gap < loose->gap) loose = Accepted{x, *zc, r, mc.gap};
    }
    if (done) {
      sol.status = QpStatus::optimal;
      break;
    }
    if (loose && ++since_loose > settings.gap_iterations) break;
    const double primal_inf = cur.primal, dual_inf = cur.dual, compl_inf = cur.comp, pobj = cur.pobj;
    const double gap = s.dot(z);

    if (settings.verbose)
      std::fprintf(stderr, "%3d pobj %+.12e pinf %.1e dinf %.1e cinf %.1e gap %.1e mu %.1e |z| %.1e min s %.1e\n", iter,
                   pobj + qp.constant, primal_inf, dual_inf, compl_inf, gap, mu, z.lpNorm<Eigen::Infinity>(),
                   s.minCoeff());

    // Divergent multipliers: infeasible if z/|z| is a Farkas ray, G'y = 0 and h'y < 0.
    const double z_norm = z.lpNorm<Eigen::Infinity>();
    if (z_norm > settings.infeasibility_threshold * res_scale) {
      const Eigen::VectorXd y = z / z_norm;
      const double ray = g.apply_transpose(y).lpNorm<Eigen::Infinity>();
      const double hy = h.dot(y);
      if (ray <= 1e-6 && hy < -1e-6 * (1.0 + h.lpNorm<Eigen::Infinity>())) {
        sol.status = QpStatus::infeasible;
        sol.certificate = y;
        break;
      }
    }

    w = z.cwiseQuotient(s);
    if (!normal.factorize(w, settings.regularization)) {
      if (settings.verbose) std::fprintf(stderr, "    factorization failed\n");
      break;
    }

    // Predictor (affine scaling) direction.
    Eigen::VectorXd dx, ds, dz;
    newton(-rd, -rp, -s.cwiseProduct(z), dx, ds, dz);
    const double alpha_aff = std::min(detail::max_step(s, ds), detail::max_step(z, dz));
    const double mu_aff = (s + alpha_aff * ds).dot(z + alpha_aff * dz) / static_cast<double>(M);
    const double sigma = std::pow(std::clamp(mu_aff / mu, 0.0, 1.0), 3);

    // Corrector with centering.
    const Eigen::VectorXd r3 =
        -(s.cwiseProduct(z) + ds.cwiseProduct(dz) - Eigen::VectorXd::Constant(M, sigma * mu));
    newton(-rd, -rp, r3, dx, ds, dz);

    const double alpha = std::min(1.0, eta * std::min(detail::max_step(s, ds), detail::max_step(z, dz)));
    if (settings.verbose) std::fprintf(stderr, "    step %.3e sigma %.2e\n", alpha, sigma);
    if (!(alpha > 1e-14)) break;
    // Blocked steps with exploding multipliers: no further progress possible.
    short_steps = alpha < 1e-4 ? short_steps + 1 : 0;
    if (short_steps >= 5) break;
    x += alpha * dx;
    s += alpha * ds;
    z += alpha * dz;
    sol.iterations = iter + 1;
  }

  if (sol.status == QpStatus::max_iter && loose) {
    sol.status = QpStatus::optimal;
    x = loose->x;
    z = loose->z;
    confirmed = loose->residuals;
  } else if (sol.status == QpStatus::max_iter) {
    x = best_x;
    z = best_z;
  }
  pack(x, z);
  return finish(sol);
}

}  // namespace ccmpc
