#pragma once

// Text format for network descriptions.
//
//   # comment
//   dt_min = 5
//   wwtp_control = u1
//
//   [catchment w2]
//   area = 200000
//
//   [tank T2]
//   capacity = 1500        # m3
//   beta = 0.05            # 1/min
//   control = u2
//   control_cap = 10       # m3/min
//   inflows = [w2]
//
//   [pipe p7]
//   capacity = 25          # m3/min
//   inflows = [w7]
//
//   [delay T4:10]
//   length = 1             # registers of dt_min each
//   inflows = [p7]
//
// Inflow tokens name a catchment (rain), a control (u*), or an element whose
// outflow is routed in. Blank lines and '#' comments are ignored.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ccmpc/errors.hpp"
#include "ccmpc/network.hpp"

namespace ccmpc {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline double parse_number(std::string_view text, int line, const std::string& key) {
  double v = 0.0;
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ParseError(line, "'" + key + "' expects a number, got '" + std::string(text) + "'");
  return v;
}

inline std::vector<std::string> parse_list(std::string_view text, int line) {
  if (text.size() < 2 || text.front() != '[' || text.back() != ']')
    throw ParseError(line, "inflows must be a bracketed list like [a, b]");
  std::vector<std::string> out;
  auto body = text.substr(1, text.size() - 2);
  while (!trim(body).empty()) {
    const auto comma = body.find(',');
    auto item = trim(body.substr(0, comma));
    if (item.empty()) throw ParseError(line, "empty entry in inflow list");
    out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    body = body.substr(comma + 1);
  }
  return out;
}

inline std::string format_number(double v) {
  // Shortest representation that round-trips.
  char buf[64];
  const double a = std::abs(v);
  const auto res = (a == 0.0 || (a >= 1e-4 && a < 1e15))
                       ? std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed)
                       : std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Parses and validates a network description.
inline NetworkModel load_network(std::string_view text) {
  double dt = 0.0;
  bool have_dt = false;
  std::string wwtp;
  std::vector<Catchment> catchments;
  std::vector<ElementSpec> elements;
  std::vector<std::map<std::string, int>> seen_keys;

  enum class Section { header, catchment, element } section = Section::header;
  int line_no = 0;
  int last_line = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  bool any_content = false;

  auto require = [&](bool ok, const std::string& id, const std::string& key) {
    if (!ok) throw ValidationError(id, "missing parameter '" + key + "'");
  };
  auto finish_section = [&]() {
    if (section == Section::catchment) {
      require(seen_keys.back().count("area") > 0, catchments.back().id, "area");
    } else if (section == Section::element) {
      const auto& e = elements.back();
      const auto& keys = seen_keys.back();
      if (e.kind == ElementKind::tank)
        for (const char* k : {"capacity", "beta", "control", "control_cap"}) require(keys.count(k) > 0, e.id, k);
      if (e.kind == ElementKind::weir_pipe) require(keys.count("capacity") > 0, e.id, "capacity");
      require(keys.count("inflows") > 0, e.id, "inflows");
    }
  };

  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    any_content = true;
    last_line = line_no;

    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(line_no, "unterminated section header");
      finish_section();
      auto inner = detail::trim(line.substr(1, line.size() - 2));
      const auto space = inner.find_first_of(" \t");
      if (space == std::string_view::npos) throw ParseError(line_no, "section header needs a kind and an id");
      const auto kind = inner.substr(0, space);
      const std::string id{detail::trim(inner.substr(space))};
      seen_keys.emplace_back();
      if (kind == "catchment") {
        section = Section::catchment;
        catchments.push_back({id, 0.0});
        continue;
      }
      ElementSpec e;
      e.id = id;
      if (kind == "tank") e.kind = ElementKind::tank;
      else if (kind == "pipe") e.kind = ElementKind::weir_pipe;
      else if (kind == "delay") e.kind = ElementKind::delay_chain;
      else throw ParseError(line_no, "unknown section kind '" + std::string(kind) + "'");
      section = Section::element;
      elements.push_back(std::move(e));
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected 'key = value'");
    const std::string key{detail::trim(line.substr(0, eq))};
    const auto value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ParseError(line_no, "expected 'key = value'");

    if (section == Section::header) {
      if (key == "dt_min") {
        dt = detail::parse_number(value, line_no, key);
        have_dt = true;
      } else if (key == "wwtp_control") {
        wwtp = std::string(value);
      } else {
        throw ParseError(line_no, "unknown top-level key '" + key + "'");
      }
      continue;
    }

    if (seen_keys.back()[key]++ > 0) throw ParseError(line_no, "duplicate key '" + key + "'");
    if (section == Section::catchment) {
      if (key != "area") throw ParseError(line_no, "unknown catchment key '" + key + "'");
      catchments.back().area = detail::parse_number(value, line_no, key);
      continue;
    }

    auto& e = elements.back();
    if (key == "inflows") {
      e.inflows = detail::parse_list(value, line_no);
    } else if (e.kind == ElementKind::tank && key == "capacity") {
      e.capacity = detail::parse_number(value, line_no, key);
    } else if (e.kind == ElementKind::tank && key == "beta") {
      e.beta = detail::parse_number(value, line_no, key);
    } else if (e.kind == ElementKind::tank && key == "control") {
      e.control = std::string(value);
    } else if (e.kind == ElementKind::tank && key == "control_cap") {
      e.control_cap = detail::parse_number(value, line_no, key);
    } else if (e.kind == ElementKind::weir_pipe && key == "capacity") {
      e.pipe_capacity = detail::parse_number(value, line_no, key);
    } else if (e.kind == ElementKind::delay_chain && key == "length") {
      const double len = detail::parse_number(value, line_no, key);
      if (len != static_cast<int>(len)) throw ParseError(line_no, "delay length must be an integer");
      e.chain_length = static_cast<int>(len);
    } else {
      throw ParseError(line_no, "key '" + key + "' is not valid for " + to_string(e.kind) + " '" + e.id + "'");
    }
  }

  if (!any_content) throw ParseError(line_no == 0 ? 1 : line_no, "empty network description");
  finish_section();
  if (!have_dt) throw ParseError(last_line, "missing top-level 'dt_min'");
  if (wwtp.empty()) throw ParseError(last_line, "missing top-level 'wwtp_control'");
  return NetworkModel::build(std::move(catchments), std::move(elements), dt, std::move(wwtp));
}

inline NetworkModel load_network_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open network file '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return load_network(buf.str());
}

/// Canonical text form. load_network(serialize_network(m)) reproduces m exactly.
inline std::string serialize_network(const NetworkModel& model) {
  using detail::format_number;
  std::ostringstream out;
  out << "dt_min = " << format_number(model.dt()) << "\n";
  out << "wwtp_control = " << model.wwtp_control() << "\n";
  for (const auto& c : model.catchments()) {
    out << "\n[catchment " << c.id << "]\n";
    out << "area = " << format_number(c.area) << "\n";
  }
  for (const auto& e : model.elements()) {
    out << "\n[" << to_string(e.kind) << " " << e.id << "]\n";
    switch (e.kind) {
      case ElementKind::tank:
        out << "capacity = " << format_number(e.capacity) << "\n";
        out << "beta = " << format_number(e.beta) << "\n";
        out << "control = " << e.control << "\n";
        out << "control_cap = " << format_number(e.control_cap) << "\n";
        break;
      case ElementKind::weir_pipe:
        out << "capacity = " << format_number(e.pipe_capacity) << "\n";
        break;
      case ElementKind::delay_chain:
        out << "length = " << e.chain_length << "\n";
        break;
    }
    out << "inflows = [";
    for (std::size_t i = 0; i < e.inflows.size(); ++i) out << (i ? ", " : "") << e.inflows[i];
    out << "]\n";
  }
  return out.str();
}

/// Routing of the linear Astlingen model: element id -> inflow tokens.
inline const std::map<std::string, std::vector<std::string>>& astlingen_reference_routing() {
  static const std::map<std::string, std::vector<std::string>> table = {
      {"T1", {"T1:5"}},
      {"T2", {"w2"}},
      {"T3", {"w3", "T3:5"}},
      {"T4", {"w4", "T4:5"}},
      {"T5", {"w5"}},
      {"T6", {"w6", "T6:5"}},
      {"T3:5", {"T3:10"}},
      {"T3:10", {"T3:15"}},
      {"T3:15", {"u6", "p8"}},
      {"T4:5", {"T4:10"}},
      {"T4:10", {"p7"}},
      {"p7", {"w7"}},
      {"p8", {"w8"}},
      {"p9", {"w9"}},
      {"p10", {"w10"}},
      {"T1:5", {"u2", "T1:10"}},
      {"T1:10", {"w1", "u3", "u4", "T1:15"}},
      {"T1:15", {"u5", "T1:20"}},
      {"T1:20", {"p10"}},
      {"T6:5", {"T6:10"}},
      {"T6:10", {"T6:15"}},
      {"T6:15", {"p9"}},
  };
  return table;
}

struct RoutingMismatch {
  std::string element;
  std::string detail;
};

/// Compares a model against the reference Astlingen routing. Tank controls are
/// expected to be named u<n> for tank T<n>; tank-outflow tokens T<n> are
/// accepted as the same flow as u<n>.
inline std::vector<RoutingMismatch> check_astlingen_routing(const NetworkModel& model) {
  std::vector<RoutingMismatch> issues;
  const auto& ref = astlingen_reference_routing();

  auto canonical = [&](const std::string& token) {
    for (auto t : model.tanks()) {
      const auto& e = model.element(t);
      if (token == e.control) return "u" + e.id.substr(1);
      if (token == e.id) return "u" + e.id.substr(1);
    }
    return token;
  };
  auto normalized = [&](std::vector<std::string> tokens) {
    for (auto& t : tokens) t = canonical(t);
    std::sort(tokens.begin(), tokens.end());
    return tokens;
  };
  auto join = [](const std::vector<std::string>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
    return s + "]";
  };

  for (const auto& [id, expected] : ref) {
    auto idx = model.find(id);
    if (!idx) {
      issues.push_back({id, "element missing"});
      continue;
    }
    const auto have = normalized(model.element(*idx).inflows);
    auto want = expected;
    std::sort(want.begin(), want.end());
    if (have != want) issues.push_back({id, "inflows " + join(have) + " expected " + join(want)});
  }
  for (const auto& e : model.elements())
    if (!ref.count(e.id)) issues.push_back({e.id, "element not in the reference network"});
  if (canonical(model.wwtp_control()) != "u1")
    issues.push_back({"T1", "treatment plant must be fed by u1"});
  return issues;
}

}  // namespace ccmpc
