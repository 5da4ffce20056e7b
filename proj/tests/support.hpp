#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "ccmpc/network_config.hpp"

namespace testnet {

// Two tanks, one pipe with a weir, one two-register delay.
//
//   b -> T2 --u2--> p3 <- a        p3 -> D3 -> T1 --u1--> WWTP
inline const char* mini_text() {
  return R"(dt_min = 5
wwtp_control = u1

[catchment a]
area = 120000
[catchment b]
area = 60000

[tank T1]
capacity = 1000
beta = 0.05
control = u1
control_cap = 10
inflows = [D3]

[tank T2]
capacity = 500
beta = 0.05
control = u2
control_cap = 4
inflows = [b]

[pipe p3]
capacity = 6
inflows = [a, u2]

[delay D3]
length = 2
inflows = [p3]
)";
}

inline ccmpc::NetworkModel mini() { return ccmpc::load_network(mini_text()); }

inline const ccmpc::NetworkModel& astlingen() {
  static const ccmpc::NetworkModel m = ccmpc::load_network_file(CCMPC_DATA_DIR "/astlingen.cfg");
  return m;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace testnet
