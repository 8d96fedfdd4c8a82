#pragma once

#include <iosfwd>
#include <utility>
#include <vector>

#include "dkf/model.hpp"
#include "dkf/numerics.hpp"

namespace dkf {

/// Undirected communication graph with its Laplacian spectrum precomputed.
/// Immutable after construction.
class SensorNetwork {
 public:
  SensorNetwork() = default;  // empty placeholder; build via from_edges

  /// Builds from an edge list. Self-loops and out-of-range endpoints throw;
  /// duplicate edges are collapsed.
  static SensorNetwork from_edges(int node_count,
                                  const std::vector<std::pair<int, int>>& edges);

  int node_count() const { return node_count_; }
  const std::vector<std::pair<int, int>>& edges() const { return edges_; }
  const Matrix& adjacency() const { return adjacency_; }
  const Matrix& laplacian() const { return laplacian_; }

  /// Laplacian eigenvalues, ascending. spectrum()(0) is always ~0.
  const Vector& spectrum() const { return spectrum_; }

  /// Inclusive neighborhood: n itself plus all adjacent nodes, ascending.
  std::vector<int> neighborhood(int n) const;

  /// Neighbors excluding n itself, ascending. This is the set a round's
  /// consensus terms iterate over.
  const std::vector<int>& neighbors(int n) const;

  int degree(int n) const { return static_cast<int>(neighbors(n).size()); }

  /// Connected iff the algebraic connectivity exceeds 1e-9.
  bool connected() const;
  double algebraic_connectivity() const;

  /// Largest Laplacian eigenvalue; bounds the stable consensus step size.
  double lambda_max() const { return spectrum_(spectrum_.size() - 1); }

 private:
  int node_count_ = 0;
  std::vector<std::pair<int, int>> edges_;
  std::vector<std::vector<int>> neighbors_;
  Matrix adjacency_;
  Matrix laplacian_;
  Vector spectrum_;
};

enum class GraphKind { kPath, kCycle, kComplete, kGrid, kErdosRenyi, kGeometric };

struct GraphParams {
  double edge_probability = 0.0;  // erdos_renyi
  double radius = 0.0;            // geometric
  int max_retries = 100;          // random kinds resample until connected
};

/// Deterministic generator given the stream. Random kinds resample up to
/// params.max_retries times and throw std::runtime_error if no connected
/// graph is found.
SensorNetwork generate_network(GraphKind kind, int node_count,
                               const GraphParams& params, RngStream& rng);

GraphKind parse_graph_kind(const std::string& name);
std::string graph_kind_name(GraphKind kind);

/// Edge-list text format: first line "N", then one "u v" line per edge,
/// 0-indexed.
void write_edge_list(std::ostream& os, const SensorNetwork& net);
SensorNetwork read_edge_list(std::istream& is);

}  // namespace dkf
