#include <gtest/gtest.h>

#include <random>
#include <regex>

#include "ccmpc/network_config.hpp"
#include "support.hpp"

using namespace ccmpc;

namespace {

int parse_error_line(const std::string& text) {
  try {
    load_network(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  return -1;
}

std::string validation_element(const std::string& text) {
  try {
    load_network(text);
  } catch (const ValidationError& e) {
    return e.element();
  }
  return "<none>";
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  EXPECT_NE(pos, std::string::npos) << from;
  return s.replace(pos, from.size(), to);
}

}  // namespace

TEST(Network, AstlingenShape) {
  const auto& m = testnet::astlingen();
  EXPECT_EQ(m.tank_count(), 6u);
  EXPECT_EQ(m.pipe_count(), 4u);
  EXPECT_EQ(m.weir_count(), 10u);
  EXPECT_EQ(m.catchment_count(), 10u);
  EXPECT_EQ(m.dt(), 5.0);
  EXPECT_EQ(m.element(m.tanks()[m.wwtp_tank()]).id, "T1");
  EXPECT_TRUE(check_astlingen_routing(m).empty());
}

TEST(Network, TopologicalOrderPutsSourcesFirst) {
  const auto& m = testnet::astlingen();
  std::vector<std::size_t> pos(m.element_count());
  for (std::size_t i = 0; i < m.topological_order().size(); ++i) pos[m.topological_order()[i]] = i;
  for (std::size_t e = 0; e < m.element_count(); ++e) {
    const auto& r = m.routing(e);
    for (auto t : r.controls) EXPECT_LT(pos[m.tanks()[t]], pos[e]);
    for (auto p : r.pipe_outflows) EXPECT_LT(pos[m.pipes()[p]], pos[e]);
    for (auto d : r.delay_outflows) EXPECT_LT(pos[m.chains()[d]], pos[e]);
  }
}

TEST(Network, SerializeRoundTrip) {
  const auto& m = testnet::astlingen();
  const std::string text = serialize_network(m);
  const NetworkModel back = load_network(text);
  EXPECT_EQ(serialize_network(back), text);
  ASSERT_EQ(back.element_count(), m.element_count());
  for (std::size_t i = 0; i < m.element_count(); ++i) {
    const auto &a = m.element(i), &b = back.element(i);
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.kind, b.kind);
    EXPECT_EQ(a.capacity, b.capacity);
    EXPECT_EQ(a.pipe_capacity, b.pipe_capacity);
    EXPECT_EQ(a.beta, b.beta);
    EXPECT_EQ(a.control_cap, b.control_cap);
    EXPECT_EQ(a.chain_length, b.chain_length);
    EXPECT_EQ(a.inflows, b.inflows);
  }
  for (std::size_t c = 0; c < m.catchment_count(); ++c) EXPECT_EQ(m.catchments()[c].area, back.catchments()[c].area);
}

TEST(Network, SerializeKeepsAwkwardNumbers) {
  std::string text = testnet::mini_text();
  text = replace(text, "area = 120000", "area = 123456.789012345");
  text = replace(text, "beta = 0.05\ncontrol = u1", "beta = 0.000123456789\ncontrol = u1");
  text = replace(text, "capacity = 6", "capacity = 1e-7");
  const NetworkModel m = load_network(text);
  const NetworkModel back = load_network(serialize_network(m));
  EXPECT_EQ(back.catchments()[0].area, 123456.789012345);
  EXPECT_EQ(back.element(0).beta, 0.000123456789);
  EXPECT_EQ(back.element(*back.find("p3")).pipe_capacity, 1e-7);
}

TEST(NetworkParse, ErrorsCarryTheLine) {
  const std::string good = testnet::mini_text();
  EXPECT_EQ(parse_error_line(""), 1);
  EXPECT_EQ(parse_error_line("dt_min = 5\nwwtp_control = u1\n[tank T1\n"), 3);
  EXPECT_EQ(parse_error_line(replace(good, "[pipe p3]", "[culvert p3]")), 23);
  EXPECT_EQ(parse_error_line(replace(good, "capacity = 6", "capacity = six")), 24);
  EXPECT_EQ(parse_error_line(replace(good, "capacity = 6", "capacity 6")), 24);
  EXPECT_EQ(parse_error_line(replace(good, "capacity = 6", "capacity = 6\ncapacity = 7")), 25);
  EXPECT_EQ(parse_error_line(replace(good, "length = 2", "length = 2.5")), 28);
  EXPECT_EQ(parse_error_line(replace(good, "capacity = 6", "beta = 0.1")), 24);
  // reported at the last line read
  EXPECT_EQ(parse_error_line(replace(good, "dt_min = 5\n", "")), 28);
}

TEST(NetworkParse, ValidationNamesTheElement) {
  const std::string good = testnet::mini_text();
  EXPECT_EQ(validation_element(replace(good, "inflows = [D3]", "inflows = [D4]")), "T1");
  EXPECT_EQ(validation_element(replace(good, "inflows = [a, u2]", "inflows = [a, u2, b]")), "p3");
  EXPECT_EQ(validation_element(replace(good, "beta = 0.05\ncontrol = u2", "beta = 0.5\ncontrol = u2")), "T2");
  EXPECT_EQ(validation_element(replace(good, "area = 60000", "area = -1")), "b");
  EXPECT_EQ(validation_element(replace(good, "capacity = 500", "capacity = 0")), "T2");
  EXPECT_EQ(validation_element(replace(good, "inflows = [p3]", "inflows = [p3, u1]")), "T1");
  // missing parameter
  EXPECT_EQ(validation_element(replace(good, "control_cap = 4\n", "")), "T2");
}

TEST(NetworkParse, RoutingCycleIsRejected) {
  // p3 -> D3 -> p3, with u2 sent straight to T1
  std::string text = testnet::mini_text();
  text = replace(text, "inflows = [D3]", "inflows = [u2]");
  text = replace(text, "inflows = [a, u2]", "inflows = [a, D3]");
  try {
    load_network(text);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_TRUE(e.element() == "p3" || e.element() == "D3") << e.element();
    EXPECT_NE(std::string(e.what()).find("cycle"), std::string::npos) << e.what();
  }
}

TEST(NetworkParse, AstlingenDoubleRoutingNamesElement) {
  std::string text = testnet::read_file(CCMPC_DATA_DIR "/astlingen.cfg");
  const std::regex t410(R"((\[delay T4:10\][^\[]*inflows = \[)p7\])");
  const std::string mutated = std::regex_replace(text, t410, "$1p8]");
  ASSERT_NE(mutated, text);
  try {
    load_network(mutated);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string who = e.element();
    EXPECT_TRUE(who == "T4:10" || who == "T3:15") << who;
    EXPECT_NE(std::string(e.what()).find("p8"), std::string::npos);
  }
}

TEST(NetworkParse, AstlingenRoutingCheckFlagsSwappedCatchments) {
  std::string text = testnet::read_file(CCMPC_DATA_DIR "/astlingen.cfg");
  text = replace(text, "control_cap = 10\ninflows = [w2]", "control_cap = 10\ninflows = [w5]");
  const auto pos = text.find("[tank T5]");
  ASSERT_NE(pos, std::string::npos);
  const auto w5 = text.find("inflows = [w5]", pos);
  ASSERT_NE(w5, std::string::npos);
  text.replace(w5, 14, "inflows = [w2]");
  const auto issues = check_astlingen_routing(load_network(text));
  ASSERT_EQ(issues.size(), 2u);
  EXPECT_EQ(issues[0].element, "T2");
  EXPECT_EQ(issues[1].element, "T5");
}

// ---- plant ------------------------------------------------------------------

TEST(Plant, HandComputedStep) {
  const NetworkModel m = testnet::mini();
  SystemState x = m.zero_state();
  x.volumes << 200.0, 100.0;  // T1, T2
  x.delays << 3.0, 5.0;       // head, tail of D3
  Eigen::VectorXd u(2), rain(2);
  u << 8.0, 4.0;
  rain << rain_to_flow(2.0, 120000.0), rain_to_flow(1.0, 60000.0);
  EXPECT_NEAR(rain[0], 14.4, 1e-12);
  EXPECT_NEAR(rain[1], 3.6, 1e-12);

  const PlantStep ps = plant_step(m, x, u, rain);
  const auto p3 = static_cast<Eigen::Index>(m.weir_ordinal(*m.find("p3")));
  EXPECT_NEAR(ps.flows.inflow[*m.find("p3")], 18.4, 1e-12);
  EXPECT_NEAR(ps.flows.pipe_outflow[0], 6.0, 1e-12);
  EXPECT_NEAR(ps.flows.weir_overflow[p3], 12.4, 1e-12);
  EXPECT_NEAR(ps.flows.switching[p3], 12.4, 1e-12);
  EXPECT_NEAR(ps.flows.delay_outflow[0], 5.0, 1e-12);
  EXPECT_NEAR(ps.next.delays[0], 6.0, 1e-12);
  EXPECT_NEAR(ps.next.delays[1], 3.0, 1e-12);
  EXPECT_NEAR(ps.next.volumes[0], 185.0, 1e-12);
  EXPECT_NEAR(ps.next.volumes[1], 98.0, 1e-12);
  EXPECT_EQ(ps.flows.weir_overflow[static_cast<Eigen::Index>(m.weir_ordinal(*m.find("T1")))], 0.0);
}

TEST(Plant, TankSpillsAboveCapacity) {
  const NetworkModel m = testnet::mini();
  SystemState x = m.zero_state();
  x.volumes << 0.0, 495.0;
  const Eigen::VectorXd u = Eigen::VectorXd::Zero(2);
  Eigen::VectorXd rain(2);
  rain << 0.0, 3.6;
  const PlantStep ps = plant_step(m, x, u, rain);
  const auto w = static_cast<Eigen::Index>(m.weir_ordinal(*m.find("T2")));
  EXPECT_NEAR(ps.flows.switching[w], 13.0, 1e-12);
  EXPECT_NEAR(ps.flows.weir_overflow[w], 2.6, 1e-12);
  EXPECT_EQ(ps.next.volumes[1], 500.0);
}

TEST(Plant, ControlsAreClampedToRealizable) {
  const NetworkModel m = testnet::mini();
  SystemState x = m.zero_state();
  x.volumes << 100.0, 40.0;
  Eigen::VectorXd u(2);
  const Eigen::VectorXd rain = Eigen::VectorXd::Zero(2);
  u << 100.0, -3.0;
  auto ps = plant_step(m, x, u, rain);
  EXPECT_EQ(ps.flows.tank_outflow[0], 5.0);  // beta * V
  EXPECT_EQ(ps.flows.tank_outflow[1], 0.0);
  u << std::numeric_limits<double>::quiet_NaN(), 100.0;
  ps = plant_step(m, x, u, rain);
  EXPECT_EQ(ps.flows.tank_outflow[0], 0.0);
  EXPECT_EQ(ps.flows.tank_outflow[1], 2.0);
  x.volumes << 1000.0, 500.0;
  ps = plant_step(m, x, u, rain);
  EXPECT_EQ(ps.flows.tank_outflow[1], 4.0);  // control cap
}

TEST(Plant, DimensionMismatchThrows) {
  const NetworkModel m = testnet::mini();
  const SystemState x = m.zero_state();
  EXPECT_THROW(plant_step(m, x, Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(2)), DimensionError);
  EXPECT_THROW(plant_step(m, x, Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(1)), DimensionError);
  EXPECT_THROW(rain_to_flow(-1.0, 10.0), std::domain_error);
}

// Water leaves only through the treatment-plant control and the weirs.
TEST(PlantProperty, MassIsConservedAndVolumesStayInRange) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const NetworkModel mini = testnet::mini();
  for (const NetworkModel* m : {&testnet::astlingen(), &mini}) {
    const auto wwtp = static_cast<Eigen::Index>(m->wwtp_tank());
    for (int trial = 0; trial < 300; ++trial) {
      SystemState x = m->zero_state();
      for (std::size_t t = 0; t < m->tank_count(); ++t)
        x.volumes[static_cast<Eigen::Index>(t)] = u01(rng) * m->element(m->tanks()[t]).capacity;
      for (Eigen::Index r = 0; r < x.delays.size(); ++r) x.delays[r] = 30.0 * u01(rng);
      Eigen::VectorXd u(static_cast<Eigen::Index>(m->tank_count()));
      for (Eigen::Index t = 0; t < u.size(); ++t) u[t] = 80.0 * u01(rng) - 10.0;
      Eigen::VectorXd rain(static_cast<Eigen::Index>(m->catchment_count()));
      for (Eigen::Index c = 0; c < rain.size(); ++c)
        rain[c] = rain_to_flow(8.0 * u01(rng), m->catchments()[static_cast<std::size_t>(c)].area);

      const PlantStep ps = plant_step(*m, x, u, rain);
      const double dt = m->dt();
      const double lhs = ps.next.volumes.sum() - x.volumes.sum() + dt * (ps.next.delays.sum() - x.delays.sum());
      const double rhs = dt * (rain.sum() - ps.flows.tank_outflow[wwtp] - ps.flows.weir_overflow.sum());
      EXPECT_NEAR(lhs, rhs, 1e-9 * (1.0 + std::abs(rhs)));
      for (std::size_t t = 0; t < m->tank_count(); ++t) {
        const auto ti = static_cast<Eigen::Index>(t);
        EXPECT_GE(ps.next.volumes[ti], 0.0);
        EXPECT_LE(ps.next.volumes[ti], m->element(m->tanks()[t]).capacity);
        EXPECT_GE(ps.flows.tank_outflow[ti], 0.0);
        EXPECT_LE(ps.flows.tank_outflow[ti], max_realizable_control(m->element(m->tanks()[t]), x.volumes[ti]));
      }
      EXPECT_GE(ps.flows.weir_overflow.minCoeff(), 0.0);
      for (std::size_t p = 0; p < m->pipe_count(); ++p)
        EXPECT_LE(ps.flows.pipe_outflow[static_cast<Eigen::Index>(p)], m->element(m->pipes()[p]).pipe_capacity + 1e-12);
    }
  }
}
