#pragma once

// Sewer network data model and the ground-truth plant.
//
// A network is a set of elements (storage tanks, pipes with a weir, and delay
// chains) connected by flows. Each element's inflow is the sum of its routed
// sources: rain from a catchment, tank control flows, and outflows of other
// elements. Tanks and pipes spill to the environment over a weir when their
// capacity is exceeded.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "ccmpc/errors.hpp"

namespace ccmpc {

enum class ElementKind { tank, weir_pipe, delay_chain };

inline const char* to_string(ElementKind kind) {
  switch (kind) {
    case ElementKind::tank: return "tank";
    case ElementKind::weir_pipe: return "pipe";
    case ElementKind::delay_chain: return "delay";
  }
  return "?";
}

struct ElementSpec {
  std::string id;
  ElementKind kind = ElementKind::tank;
  double capacity = 0.0;       ///< tank volume limit [m3]
  double pipe_capacity = 0.0;  ///< pipe outflow limit [m3/min]
  double beta = 0.0;           ///< tank volume-flow coefficient [1/min]
  double control_cap = 0.0;    ///< tank control flow limit [m3/min]
  std::string control;         ///< name of the tank's control flow, e.g. "u3"
  int chain_length = 1;        ///< delay registers, each one sample long
  std::vector<std::string> inflows;  ///< source tokens as declared
};

struct Catchment {
  std::string id;
  double area = 0.0;  ///< [m2]
};

/// Resolved inflow sources of one element. Tank-side sources are tank ordinals,
/// pipe and delay sources are pipe / chain ordinals, rain is a catchment index.
struct Routing {
  std::vector<std::size_t> controls;
  std::vector<std::size_t> tank_outflows;
  std::vector<std::size_t> pipe_outflows;
  std::vector<std::size_t> delay_outflows;
  std::optional<std::size_t> rain;
};

struct SystemState {
  Eigen::VectorXd volumes;  ///< per tank [m3]
  Eigen::VectorXd delays;   ///< per delay register [m3/min]
};

/// All flows of one sample [m3/min]. Weir quantities are indexed by weir ordinal.
struct FlowRecord {
  Eigen::VectorXd inflow;         ///< per element
  Eigen::VectorXd tank_outflow;   ///< per tank (= applied control)
  Eigen::VectorXd pipe_outflow;   ///< per pipe
  Eigen::VectorXd delay_outflow;  ///< per chain
  Eigen::VectorXd weir_overflow;  ///< per weir
  /// Switching function value per weir: pre-overflow volume minus capacity for
  /// tanks [m3], inflow minus pipe capacity for pipes [m3/min].
  Eigen::VectorXd switching;
};

/// Immutable, validated network. Construct through NetworkModel::build or load_network.
class NetworkModel {
 public:
  static NetworkModel build(std::vector<Catchment> catchments, std::vector<ElementSpec> elements,
                            double dt_min, std::string wwtp_control);

  const std::vector<ElementSpec>& elements() const noexcept { return elements_; }
  const std::vector<Catchment>& catchments() const noexcept { return catchments_; }
  const ElementSpec& element(std::size_t i) const { return elements_.at(i); }
  const Routing& routing(std::size_t i) const { return routing_.at(i); }
  double dt() const noexcept { return dt_; }
  const std::string& wwtp_control() const noexcept { return wwtp_control_; }

  std::size_t element_count() const noexcept { return elements_.size(); }
  std::size_t catchment_count() const noexcept { return catchments_.size(); }
  std::size_t tank_count() const noexcept { return tanks_.size(); }
  std::size_t pipe_count() const noexcept { return pipes_.size(); }
  std::size_t chain_count() const noexcept { return chains_.size(); }
  std::size_t weir_count() const noexcept { return weirs_.size(); }
  std::size_t register_count() const noexcept { return register_count_; }

  /// Element indices by kind, in declaration order.
  const std::vector<std::size_t>& tanks() const noexcept { return tanks_; }
  const std::vector<std::size_t>& pipes() const noexcept { return pipes_; }
  const std::vector<std::size_t>& chains() const noexcept { return chains_; }
  /// Elements with a weir (tanks and pipes) in declaration order.
  const std::vector<std::size_t>& weirs() const noexcept { return weirs_; }

  /// Ordinal of an element within its kind list (tank/pipe/chain).
  std::size_t ordinal(std::size_t element) const { return ordinal_.at(element); }
  std::size_t weir_ordinal(std::size_t element) const { return weir_ordinal_.at(element); }
  /// First register of a chain (by chain ordinal); the tail is first + length - 1.
  std::size_t register_offset(std::size_t chain) const { return register_offset_.at(chain); }
  std::size_t chain_tail(std::size_t chain) const {
    return register_offset_.at(chain) + static_cast<std::size_t>(elements_[chains_[chain]].chain_length) - 1;
  }

  /// Elements ordered so that every source precedes its consumers.
  const std::vector<std::size_t>& topological_order() const noexcept { return topo_; }
  /// Tank ordinal whose control flow is delivered to the treatment plant.
  std::size_t wwtp_tank() const noexcept { return wwtp_tank_; }

  std::optional<std::size_t> find(const std::string& id) const {
    for (std::size_t i = 0; i < elements_.size(); ++i)
      if (elements_[i].id == id) return i;
    return std::nullopt;
  }

  SystemState zero_state() const {
    return {Eigen::VectorXd::Zero(static_cast<Eigen::Index>(tank_count())),
            Eigen::VectorXd::Zero(static_cast<Eigen::Index>(register_count()))};
  }

 private:
  std::vector<Catchment> catchments_;
  std::vector<ElementSpec> elements_;
  std::vector<Routing> routing_;
  double dt_ = 0.0;
  std::string wwtp_control_;
  std::vector<std::size_t> tanks_, pipes_, chains_, weirs_, topo_;
  std::vector<std::size_t> ordinal_, weir_ordinal_, register_offset_;
  std::size_t register_count_ = 0;
  std::size_t wwtp_tank_ = 0;
};

inline NetworkModel NetworkModel::build(std::vector<Catchment> catchments, std::vector<ElementSpec> elements,
                                        double dt_min, std::string wwtp_control) {
  NetworkModel m;
  if (!(dt_min > 0.0) || !std::isfinite(dt_min)) throw ValidationError("", "dt_min must be positive");
  if (elements.empty()) throw ValidationError("", "network declares no elements");

  m.dt_ = dt_min;
  m.wwtp_control_ = std::move(wwtp_control);
  m.catchments_ = std::move(catchments);
  m.elements_ = std::move(elements);

  // Every name (catchment, control, element) lives in one namespace.
  enum class NameKind { catchment, control, element };
  std::map<std::string, std::pair<NameKind, std::size_t>> names;
  auto declare = [&](const std::string& name, NameKind kind, std::size_t idx, const std::string& owner) {
    if (name.empty()) throw ValidationError(owner, "empty identifier");
    if (!names.emplace(name, std::make_pair(kind, idx)).second)
      throw ValidationError(owner, "duplicate identifier '" + name + "'");
  };

  for (std::size_t c = 0; c < m.catchments_.size(); ++c) {
    const auto& ct = m.catchments_[c];
    if (!(ct.area > 0.0) || !std::isfinite(ct.area)) throw ValidationError(ct.id, "catchment area must be positive");
    declare(ct.id, NameKind::catchment, c, ct.id);
  }

  const std::size_t n = m.elements_.size();
  m.ordinal_.assign(n, 0);
  m.weir_ordinal_.assign(n, static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < n; ++i) {
    auto& e = m.elements_[i];
    auto positive = [&](double v, const char* what) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError(e.id, std::string(what) + " must be positive");
    };
    declare(e.id, NameKind::element, i, e.id);
    switch (e.kind) {
      case ElementKind::tank:
        positive(e.capacity, "capacity");
        positive(e.beta, "beta");
        positive(e.control_cap, "control_cap");
        if (e.beta * dt_min > 1.0)
          throw ValidationError(e.id, "beta * dt_min must not exceed 1 (tank could be drained below empty)");
        if (e.control.empty()) throw ValidationError(e.id, "tank declares no control");
        m.ordinal_[i] = m.tanks_.size();
        m.tanks_.push_back(i);
        declare(e.control, NameKind::control, m.ordinal_[i], e.id);
        break;
      case ElementKind::weir_pipe:
        positive(e.pipe_capacity, "capacity");
        m.ordinal_[i] = m.pipes_.size();
        m.pipes_.push_back(i);
        break;
      case ElementKind::delay_chain:
        if (e.chain_length < 1) throw ValidationError(e.id, "delay length must be at least 1");
        m.ordinal_[i] = m.chains_.size();
        m.chains_.push_back(i);
        m.register_offset_.push_back(m.register_count_);
        m.register_count_ += static_cast<std::size_t>(e.chain_length);
        break;
    }
    if (e.kind != ElementKind::delay_chain) {
      m.weir_ordinal_[i] = m.weirs_.size();
      m.weirs_.push_back(i);
    }
  }

  // Resolve sources; every flow may be consumed at most once.
  m.routing_.assign(n, {});
  std::vector<std::vector<std::size_t>> consumers(n);  // source element -> consuming elements
  std::map<std::string, std::string> consumed_by;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = m.elements_[i];
    auto& r = m.routing_[i];
    for (const auto& token : e.inflows) {
      auto it = names.find(token);
      if (it == names.end()) throw ValidationError(e.id, "unknown inflow source '" + token + "'");
      auto [kind, idx] = it->second;
      std::size_t source_element = 0;
      std::string flow_key = token;
      switch (kind) {
        case NameKind::catchment:
          if (r.rain) throw ValidationError(e.id, "more than one rain source");
          r.rain = idx;
          break;
        case NameKind::control:
          r.controls.push_back(idx);
          source_element = m.tanks_[idx];
          flow_key = m.elements_[source_element].id;
          break;
        case NameKind::element: {
          source_element = idx;
          const auto& src = m.elements_[idx];
          const std::size_t ord = m.ordinal_[idx];
          if (src.kind == ElementKind::tank) r.tank_outflows.push_back(ord);
          else if (src.kind == ElementKind::weir_pipe) r.pipe_outflows.push_back(ord);
          else r.delay_outflows.push_back(ord);
          break;
        }
      }
      if (!consumed_by.emplace(flow_key, e.id).second)
        throw ValidationError(e.id, "flow '" + token + "' is already routed to '" + consumed_by[flow_key] + "'");
      if (kind != NameKind::catchment) {
        if (source_element == i) throw ValidationError(e.id, "routing cycle: element feeds itself");
        consumers[source_element].push_back(i);
      }
    }
  }

  for (const auto& ct : m.catchments_)
    if (!consumed_by.count(ct.id)) throw ValidationError(ct.id, "catchment feeds no element");

  auto wwtp = names.find(m.wwtp_control_);
  if (wwtp == names.end() || wwtp->second.first != NameKind::control)
    throw ValidationError("", "wwtp_control '" + m.wwtp_control_ + "' is not a tank control");
  m.wwtp_tank_ = wwtp->second.second;
  const std::string wwtp_tank_id = m.elements_[m.tanks_[m.wwtp_tank_]].id;
  if (consumed_by.count(wwtp_tank_id))
    throw ValidationError(wwtp_tank_id, "the treatment-plant control must not be routed into the network");

  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = m.elements_[i];
    if (e.kind == ElementKind::tank && i != m.tanks_[m.wwtp_tank_] && !consumed_by.count(e.id))
      throw ValidationError(e.id, "tank outflow is not routed anywhere");
    if (e.kind != ElementKind::tank && !consumed_by.count(e.id))
      throw ValidationError(e.id, "outflow is not routed anywhere");
  }

  // Kahn's algorithm; ties resolved by declaration order.
  std::vector<std::size_t> indegree(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (auto c : consumers[i]) ++indegree[c];
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i)
    if (indegree[i] == 0) ready.push(i);
  while (!ready.empty()) {
    auto i = ready.top();
    ready.pop();
    m.topo_.push_back(i);
    for (auto c : consumers[i])
      if (--indegree[c] == 0) ready.push(c);
  }
  if (m.topo_.size() != n) {
    for (std::size_t i = 0; i < n; ++i)
      if (indegree[i] > 0) throw ValidationError(m.elements_[i].id, "routing cycle");
  }
  return m;
}

/// Rain intensity [um/s] over an area [m2] as a flow [m3/min].
inline double rain_to_flow(double intensity_um_per_s, double area_m2) {
  if (intensity_um_per_s < 0.0 || !std::isfinite(intensity_um_per_s))
    throw std::domain_error("rain intensity must be a non-negative number");
  if (!(area_m2 > 0.0)) throw std::domain_error("catchment area must be positive");
  return intensity_um_per_s * 1e-6 * area_m2 * 60.0;
}

namespace detail {

inline void check_dimensions(const NetworkModel& model, const SystemState& state, const Eigen::VectorXd& controls,
                             const Eigen::VectorXd& rain) {
  if (static_cast<std::size_t>(state.volumes.size()) != model.tank_count() ||
      static_cast<std::size_t>(state.delays.size()) != model.register_count())
    throw DimensionError("state does not match the network");
  if (static_cast<std::size_t>(controls.size()) != model.tank_count())
    throw DimensionError("expected one control per tank");
  if (static_cast<std::size_t>(rain.size()) != model.catchment_count())
    throw DimensionError("expected one rain flow per catchment");
}

/// Resolves every flow of a sample except tank overflow. Pipes are memoryless,
/// so inflows are computed upstream-first with same-sample weir clipping.
inline FlowRecord resolve_flows(const NetworkModel& model, const SystemState& state, const Eigen::VectorXd& controls,
                                const Eigen::VectorXd& rain) {
  FlowRecord fr;
  const auto ne = static_cast<Eigen::Index>(model.element_count());
  fr.inflow = Eigen::VectorXd::Zero(ne);
  fr.tank_outflow = controls;
  fr.pipe_outflow = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.pipe_count()));
  fr.delay_outflow = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.chain_count()));
  fr.weir_overflow = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.weir_count()));
  fr.switching = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.weir_count()));

  for (std::size_t c = 0; c < model.chain_count(); ++c)
    fr.delay_outflow[static_cast<Eigen::Index>(c)] = state.delays[static_cast<Eigen::Index>(model.chain_tail(c))];

  for (auto i : model.topological_order()) {
    const auto& r = model.routing(i);
    double q = 0.0;
    if (r.rain) q += rain[static_cast<Eigen::Index>(*r.rain)];
    for (auto t : r.controls) q += controls[static_cast<Eigen::Index>(t)];
    for (auto t : r.tank_outflows) q += controls[static_cast<Eigen::Index>(t)];
    for (auto p : r.pipe_outflows) q += fr.pipe_outflow[static_cast<Eigen::Index>(p)];
    for (auto d : r.delay_outflows) q += fr.delay_outflow[static_cast<Eigen::Index>(d)];
    fr.inflow[static_cast<Eigen::Index>(i)] = q;

    const auto& e = model.element(i);
    if (e.kind == ElementKind::weir_pipe) {
      const auto w = static_cast<Eigen::Index>(model.weir_ordinal(i));
      const double excess = q - e.pipe_capacity;
      fr.switching[w] = excess;
      fr.weir_overflow[w] = std::max(0.0, excess);
      fr.pipe_outflow[static_cast<Eigen::Index>(model.ordinal(i))] = q - fr.weir_overflow[w];
    }
  }
  return fr;
}

}  // namespace detail

/// Inflow of every element for one sample, given the current controls and rain flows.
inline Eigen::VectorXd element_inflows(const NetworkModel& model, const SystemState& state,
                                       const Eigen::VectorXd& controls, const Eigen::VectorXd& rain) {
  detail::check_dimensions(model, state, controls, rain);
  return detail::resolve_flows(model, state, controls, rain).inflow;
}

/// Largest control flow the plant can realize from a tank holding `volume`.
inline double max_realizable_control(const ElementSpec& tank, double volume) {
  return std::min(tank.control_cap, tank.beta * std::max(0.0, volume));
}

struct PlantStep {
  SystemState next;
  FlowRecord flows;
};

/// Advances the plant by one sample. Controls are clamped to [0, min(cap, beta*V)];
/// tanks spill the excess over capacity, pipes spill inflow above capacity.
inline PlantStep plant_step(const NetworkModel& model, const SystemState& state, const Eigen::VectorXd& controls,
                            const Eigen::VectorXd& rain) {
  detail::check_dimensions(model, state, controls, rain);
  Eigen::VectorXd applied(controls.size());
  for (std::size_t t = 0; t < model.tank_count(); ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    const double cap = max_realizable_control(model.element(model.tanks()[t]), state.volumes[ti]);
    const double u = std::isfinite(controls[ti]) ? controls[ti] : 0.0;
    applied[ti] = std::clamp(u, 0.0, cap);
  }

  PlantStep out;
  out.flows = detail::resolve_flows(model, state, applied, rain);
  auto& fr = out.flows;
  const double dt = model.dt();

  out.next.volumes.resize(state.volumes.size());
  for (std::size_t t = 0; t < model.tank_count(); ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    const std::size_t e = model.tanks()[t];
    const auto w = static_cast<Eigen::Index>(model.weir_ordinal(e));
    const double capacity = model.element(e).capacity;
    const double tentative = state.volumes[ti] + dt * (fr.inflow[static_cast<Eigen::Index>(e)] - applied[ti]);
    fr.switching[w] = tentative - capacity;
    const double qw = std::max(0.0, (tentative - capacity) / dt);
    fr.weir_overflow[w] = qw;
    // Clamp guards the last ulp; the closed form already lands in [0, capacity].
    out.next.volumes[ti] = std::clamp(tentative - dt * qw, 0.0, capacity);
  }

  out.next.delays.resize(state.delays.size());
  for (std::size_t c = 0; c < model.chain_count(); ++c) {
    const std::size_t head = model.register_offset(c);
    const std::size_t tail = model.chain_tail(c);
    for (std::size_t j = tail; j > head; --j)
      out.next.delays[static_cast<Eigen::Index>(j)] = state.delays[static_cast<Eigen::Index>(j - 1)];
    out.next.delays[static_cast<Eigen::Index>(head)] = fr.inflow[static_cast<Eigen::Index>(model.chains()[c])];
  }
  return out;
}

}  // namespace ccmpc
