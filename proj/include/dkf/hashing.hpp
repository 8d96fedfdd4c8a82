#pragma once

#include <cstdint>
#include <cstring>
#include <string_view>

#include "dkf/model.hpp"
#include "dkf/network.hpp"
#include "dkf/numerics.hpp"

namespace dkf {

/// FNV-1a accumulator over raw bytes. Doubles are hashed by bit pattern, so
/// two models hash equal iff they are bit-identical.
class Fnv1a {
 public:
  void bytes(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001B3ULL;
    }
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof(v)); }
  void f64(double v) { bytes(&v, sizeof(v)); }
  void text(std::string_view s) { bytes(s.data(), s.size()); }
  void matrix(const Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
  }
  void vector(const Vector& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v(i));
  }
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

/// Identifies a (field, sensors, graph) triple for schedule compatibility
/// checks.
std::uint64_t scenario_hash(const FieldModel& model, const SensorSuite& suite,
                            const SensorNetwork& net);

}  // namespace dkf
