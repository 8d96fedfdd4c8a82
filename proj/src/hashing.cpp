#include "dkf/hashing.hpp"

namespace dkf {

std::uint64_t scenario_hash(const FieldModel& model, const SensorSuite& suite,
                            const SensorNetwork& net) {
  Fnv1a h;
  h.text("dkf-scenario-v1");
  h.matrix(model.A);
  h.matrix(model.V);
  h.vector(model.x0_mean);
  h.matrix(model.x0_cov);
  h.u64(static_cast<std::uint64_t>(suite.agent_count()));
  for (int n = 0; n < suite.agent_count(); ++n) {
    h.matrix(suite.H[static_cast<size_t>(n)]);
    h.matrix(suite.R[static_cast<size_t>(n)]);
  }
  h.u64(static_cast<std::uint64_t>(net.node_count()));
  for (auto [u, v] : net.edges()) {
    h.u64(static_cast<std::uint64_t>(u));
    h.u64(static_cast<std::uint64_t>(v));
  }
  return h.value();
}

}  // namespace dkf
