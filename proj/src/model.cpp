#include "dkf/model.hpp"

#include <stdexcept>
#include <string>

namespace dkf {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t stream_key(std::uint64_t seed, std::uint64_t trial, Purpose purpose) {
  std::uint64_t s = seed;
  std::uint64_t k = splitmix64(s);
  s ^= trial * 0xD6E8FEB86659FD93ULL;
  k ^= splitmix64(s);
  s ^= static_cast<std::uint64_t>(purpose) * 0xA0761D6478BD642FULL;
  k ^= splitmix64(s);
  return k;
}

void require_psd_input(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument(std::string(what) + ": not square");
  }
  const double scale = 1.0 + m.cwiseAbs().maxCoeff();
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) {
    throw std::invalid_argument(std::string(what) + ": not symmetric");
  }
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t trial, Purpose purpose)
    : engine_(stream_key(seed, trial, purpose)) {}

double RngStream::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RngStream::gaussian() { return normal_(engine_); }

Vector RngStream::gaussian_vector(Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = gaussian();
  return v;
}

void FieldModel::validate() const {
  const Eigen::Index m = A.rows();
  if (A.cols() != m) throw std::invalid_argument("FieldModel: A not square");
  if (V.rows() != m || V.cols() != m) {
    throw std::invalid_argument("FieldModel: V dimension mismatch");
  }
  if (x0_mean.size() != m) {
    throw std::invalid_argument("FieldModel: x0_mean dimension mismatch");
  }
  if (x0_cov.rows() != m || x0_cov.cols() != m) {
    throw std::invalid_argument("FieldModel: x0_cov dimension mismatch");
  }
  if (!is_finite(A) || !is_finite(V) || !x0_mean.allFinite() || !is_finite(x0_cov)) {
    throw std::invalid_argument("FieldModel: non-finite entries");
  }
  require_psd_input(V, "FieldModel V");
  require_psd_input(x0_cov, "FieldModel x0_cov");
  // PSD check via factorization; throws if indefinite beyond tolerance.
  spd_factor(symmetrize(V));
  spd_factor(symmetrize(x0_cov));
}

void SensorSuite::validate(Eigen::Index field_dim) const {
  if (H.size() != R.size()) {
    throw std::invalid_argument("SensorSuite: H/R count mismatch");
  }
  if (H.empty()) throw std::invalid_argument("SensorSuite: no agents");
  for (size_t n = 0; n < H.size(); ++n) {
    const Matrix& h = H[n];
    const Matrix& r = R[n];
    if (h.cols() != field_dim) {
      throw std::invalid_argument("SensorSuite: H cols != field dim, agent " +
                                  std::to_string(n));
    }
    if (h.rows() > field_dim) {
      throw std::invalid_argument(
          "SensorSuite: observation dim exceeds field dim, agent " +
          std::to_string(n));
    }
    if (r.rows() != h.rows() || r.cols() != h.rows()) {
      throw std::invalid_argument("SensorSuite: R dimension mismatch, agent " +
                                  std::to_string(n));
    }
    if (!is_finite(h) || !is_finite(r)) {
      throw std::invalid_argument("SensorSuite: non-finite entries, agent " +
                                  std::to_string(n));
    }
    require_psd_input(r, "SensorSuite R");
    // Strict positive definiteness: the pseudo-observation transform applies
    // R_n^{-1}.
    Eigen::LLT<Matrix> llt(symmetrize(r));
    if (llt.info() != Eigen::Success) {
      throw std::invalid_argument("SensorSuite: R not positive definite, agent " +
                                  std::to_string(n));
    }
  }
}

Vector step_field(const FieldModel& model, const Vector& x, RngStream& rng) {
  if (x.size() != model.dim()) {
    throw std::invalid_argument("step_field: state dimension mismatch");
  }
  const Matrix factor = spd_factor(symmetrize(model.V)).factor;
  return model.A * x + factor * rng.gaussian_vector(model.dim());
}

Vector observe(const SensorSuite& suite, int n, const Vector& x, RngStream& rng) {
  if (n < 0 || n >= suite.agent_count()) {
    throw std::invalid_argument("observe: invalid agent index");
  }
  const auto un = static_cast<size_t>(n);
  if (x.size() != suite.H[un].cols()) {
    throw std::invalid_argument("observe: state dimension mismatch");
  }
  const Matrix factor = spd_factor(symmetrize(suite.R[un])).factor;
  return suite.H[un] * x + factor * rng.gaussian_vector(suite.obs_dim(n));
}

Trajectory simulate_truth(const FieldModel& model, const SensorSuite& suite,
                          int horizon, std::uint64_t seed, std::uint64_t trial) {
  model.validate();
  suite.validate(model.dim());
  if (horizon < 0) throw std::invalid_argument("simulate_truth: negative horizon");

  const Eigen::Index m = model.dim();
  const int agents = suite.agent_count();

  RngStream init_rng(seed, trial, Purpose::kInitialState);
  RngStream process_rng(seed, trial, Purpose::kProcessNoise);
  RngStream obs_rng(seed, trial, Purpose::kObservationNoise);

  // Factors are fixed per model; computing them once keeps the stream layout
  // identical to repeated step_field/observe calls while avoiding repeated
  // eigendecompositions.
  const Matrix init_factor = spd_factor(symmetrize(model.x0_cov)).factor;
  const Matrix process_factor = spd_factor(symmetrize(model.V)).factor;
  std::vector<Matrix> obs_factor;
  obs_factor.reserve(static_cast<size_t>(agents));
  for (int n = 0; n < agents; ++n) {
    obs_factor.push_back(spd_factor(symmetrize(suite.R[static_cast<size_t>(n)])).factor);
  }

  Trajectory traj;
  traj.states.reserve(static_cast<size_t>(horizon) + 1);
  traj.observations.resize(static_cast<size_t>(horizon) + 1);

  Vector x = model.x0_mean + init_factor * init_rng.gaussian_vector(m);
  for (int i = 0; i <= horizon; ++i) {
    traj.states.push_back(x);
    auto& obs_i = traj.observations[static_cast<size_t>(i)];
    obs_i.reserve(static_cast<size_t>(agents));
    for (int n = 0; n < agents; ++n) {
      const auto un = static_cast<size_t>(n);
      obs_i.push_back(suite.H[un] * x +
                      obs_factor[un] * obs_rng.gaussian_vector(suite.obs_dim(n)));
    }
    if (i < horizon) {
      x = model.A * x + process_factor * process_rng.gaussian_vector(m);
    }
  }
  return traj;
}

}  // namespace dkf
