#pragma once

// Standard-form convex QP:
//
//   minimize    1/2 d'Hd + f'd + constant
//   subject to  A d <= b,   lower <= d <= upper
//
// plus a plain-text dump format used to cross-check problems outside the
// library. Bounds may be +-infinity.

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace ccmpc {

/// Where each variable block starts inside the decision vector.
struct QpLayout {
  struct Block {
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
  };
  Block u, qw, s, c;

  Eigen::Index total() const noexcept { return u.size + qw.size + s.size + c.size; }
};

/// What a constraint row encodes; used to look rows up in tests and reports.
enum class RowKind {
  volume_lower,       ///< tank volume stays non-negative (optionally tightened with s)
  volume_upper,       ///< tank volume after overflow stays below capacity
  volume_switching,   ///< pre-overflow volume below tightened capacity (+ c)
  outflow_upper,      ///< control below beta * volume (optionally tightened with s)
  pipe_lower,         ///< pipe outflow non-negative (optionally tightened with s)
  pipe_upper,         ///< pipe outflow below capacity
  pipe_switching,     ///< pipe inflow below tightened capacity (+ c)
  generic,
};

inline const char* to_string(RowKind k) {
  switch (k) {
    case RowKind::volume_lower: return "volume_lower";
    case RowKind::volume_upper: return "volume_upper";
    case RowKind::volume_switching: return "volume_switching";
    case RowKind::outflow_upper: return "outflow_upper";
    case RowKind::pipe_lower: return "pipe_lower";
    case RowKind::pipe_upper: return "pipe_upper";
    case RowKind::pipe_switching: return "pipe_switching";
    case RowKind::generic: return "generic";
  }
  return "?";
}

struct RowTag {
  RowKind kind = RowKind::generic;
  std::size_t element = 0;
  Eigen::Index step = 0;
};

struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd f;
  double constant = 0.0;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  QpLayout layout;
  std::vector<RowTag> tags;  ///< one per row of A, may be empty

  Eigen::Index variables() const noexcept { return f.size(); }
  Eigen::Index rows() const noexcept { return b.size(); }

  double objective(const Eigen::VectorXd& d) const { return 0.5 * d.dot(H * d) + f.dot(d) + constant; }

  /// Throws std::invalid_argument when the pieces do not fit together.
  void check_dimensions() const {
    const Eigen::Index n = f.size();
    if (H.rows() != n || H.cols() != n) throw std::invalid_argument("QpProblem: H must be n x n");
    if (A.cols() != n && A.rows() > 0) throw std::invalid_argument("QpProblem: A must have n columns");
    if (A.rows() != b.size()) throw std::invalid_argument("QpProblem: A and b row counts differ");
    if (lower.size() != n || upper.size() != n) throw std::invalid_argument("QpProblem: bounds must have n entries");
    if (!tags.empty() && static_cast<Eigen::Index>(tags.size()) != b.size())
      throw std::invalid_argument("QpProblem: one tag per row expected");
  }

  /// Index of the first row with the given tag, or -1.
  Eigen::Index find_row(RowKind kind, std::size_t element, Eigen::Index step) const {
    for (std::size_t r = 0; r < tags.size(); ++r)
      if (tags[r].kind == kind && tags[r].element == element && tags[r].step == step) return static_cast<Eigen::Index>(r);
    return -1;
  }
};

namespace detail {

inline void write_vector(std::ostream& out, const Eigen::VectorXd& v) {
  char buf[40];
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isinf(v[i])) std::snprintf(buf, sizeof buf, "%s", v[i] > 0 ? "inf" : "-inf");
    else std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    out << (i ? " " : "") << buf;
  }
  out << "\n";
}

inline double read_number(std::istream& in) {
  std::string tok;
  if (!(in >> tok)) throw std::runtime_error("qp dump: unexpected end of input");
  if (tok == "inf") return std::numeric_limits<double>::infinity();
  if (tok == "-inf") return -std::numeric_limits<double>::infinity();
  // strtod rather than stod: subnormals set ERANGE but are still exact
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size() || std::isnan(v)) throw std::runtime_error("qp dump: bad number '" + tok + "'");
  return v;
}

inline void expect(std::istream& in, const std::string& word) {
  std::string tok;
  if (!(in >> tok) || tok != word) throw std::runtime_error("qp dump: expected '" + word + "', got '" + tok + "'");
}

}  // namespace detail

/// Dense text dump:
///
///   ccmpc-qp 1
///   n <n> m <m>
///   constant <c>
///   layout <u.off> <u.size> <qw.off> <qw.size> <s.off> <s.size> <c.off> <c.size>
///   H        (n lines of n numbers)
///   f        (1 line)
///   A        (m lines of n numbers)
///   b / lower / upper   (1 line each)
///
/// Numbers use %.17g so a dump/load cycle is exact.
inline void dump_qp(std::ostream& out, const QpProblem& qp) {
  qp.check_dimensions();
  const Eigen::Index n = qp.variables(), m = qp.rows();
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", qp.constant);
  out << "ccmpc-qp 1\n" << "n " << n << " m " << m << "\n" << "constant " << buf << "\n";
  const auto& l = qp.layout;
  out << "layout " << l.u.offset << " " << l.u.size << " " << l.qw.offset << " " << l.qw.size << " " << l.s.offset
      << " " << l.s.size << " " << l.c.offset << " " << l.c.size << "\n";
  out << "H\n";
  for (Eigen::Index i = 0; i < n; ++i) detail::write_vector(out, qp.H.row(i).transpose());
  out << "f\n";
  detail::write_vector(out, qp.f);
  out << "A\n";
  for (Eigen::Index i = 0; i < m; ++i) detail::write_vector(out, qp.A.row(i).transpose());
  out << "b\n";
  detail::write_vector(out, qp.b);
  out << "lower\n";
  detail::write_vector(out, qp.lower);
  out << "upper\n";
  detail::write_vector(out, qp.upper);
}

inline QpProblem load_qp(std::istream& in) {
  detail::expect(in, "ccmpc-qp");
  detail::expect(in, "1");
  Eigen::Index n = 0, m = 0;
  detail::expect(in, "n");
  in >> n;
  detail::expect(in, "m");
  in >> m;
  if (!in || n < 0 || m < 0) throw std::runtime_error("qp dump: bad dimensions");
  QpProblem qp;
  detail::expect(in, "constant");
  qp.constant = detail::read_number(in);
  detail::expect(in, "layout");
  for (auto* block : {&qp.layout.u, &qp.layout.qw, &qp.layout.s, &qp.layout.c}) in >> block->offset >> block->size;
  detail::expect(in, "H");
  qp.H.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) qp.H(i, j) = detail::read_number(in);
  detail::expect(in, "f");
  qp.f.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) qp.f[i] = detail::read_number(in);
  detail::expect(in, "A");
  qp.A.resize(m, n);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) qp.A(i, j) = detail::read_number(in);
  for (auto [name, vec, size] : {std::tuple{"b", &qp.b, m}, std::tuple{"lower", &qp.lower, n},
                                 std::tuple{"upper", &qp.upper, n}}) {
    detail::expect(in, name);
    vec->resize(size);
    for (Eigen::Index i = 0; i < size; ++i) (*vec)[i] = detail::read_number(in);
  }
  return qp;
}

inline void dump_qp_file(const std::string& path, const QpProblem& qp) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  dump_qp(out, qp);
}

inline QpProblem load_qp_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return load_qp(in);
}

}  // namespace ccmpc
