#include "dkf/network.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>

namespace dkf {

SensorNetwork SensorNetwork::from_edges(
    int node_count, const std::vector<std::pair<int, int>>& edges) {
  if (node_count < 1) {
    throw std::invalid_argument("SensorNetwork: node count must be >= 1");
  }
  std::set<std::pair<int, int>> unique;
  for (auto [u, v] : edges) {
    if (u == v) throw std::invalid_argument("SensorNetwork: self-loop");
    if (u < 0 || v < 0 || u >= node_count || v >= node_count) {
      throw std::invalid_argument("SensorNetwork: edge endpoint out of range");
    }
    unique.emplace(std::min(u, v), std::max(u, v));
  }

  SensorNetwork net;
  net.node_count_ = node_count;
  net.edges_.assign(unique.begin(), unique.end());
  net.adjacency_ = Matrix::Zero(node_count, node_count);
  net.neighbors_.resize(static_cast<size_t>(node_count));
  for (auto [u, v] : net.edges_) {
    net.adjacency_(u, v) = 1.0;
    net.adjacency_(v, u) = 1.0;
    net.neighbors_[static_cast<size_t>(u)].push_back(v);
    net.neighbors_[static_cast<size_t>(v)].push_back(u);
  }
  for (auto& nbrs : net.neighbors_) std::sort(nbrs.begin(), nbrs.end());

  net.laplacian_ = Matrix::Zero(node_count, node_count);
  for (int i = 0; i < node_count; ++i) {
    net.laplacian_(i, i) = net.adjacency_.row(i).sum();
  }
  net.laplacian_ -= net.adjacency_;
  net.spectrum_ = sym_eigs(net.laplacian_).values;
  return net;
}

std::vector<int> SensorNetwork::neighborhood(int n) const {
  if (n < 0 || n >= node_count_) {
    throw std::invalid_argument("neighborhood: invalid node index");
  }
  std::vector<int> omega = neighbors_[static_cast<size_t>(n)];
  omega.insert(std::lower_bound(omega.begin(), omega.end(), n), n);
  return omega;
}

const std::vector<int>& SensorNetwork::neighbors(int n) const {
  if (n < 0 || n >= node_count_) {
    throw std::invalid_argument("neighbors: invalid node index");
  }
  return neighbors_[static_cast<size_t>(n)];
}

double SensorNetwork::algebraic_connectivity() const {
  return node_count_ > 1 ? spectrum_(1) : 0.0;
}

bool SensorNetwork::connected() const {
  if (node_count_ == 1) return true;
  return algebraic_connectivity() > 1e-9;
}

namespace {

std::vector<std::pair<int, int>> path_edges(int n) {
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
  return e;
}

std::vector<std::pair<int, int>> cycle_edges(int n) {
  auto e = path_edges(n);
  if (n > 2) e.emplace_back(n - 1, 0);
  return e;
}

std::vector<std::pair<int, int>> complete_edges(int n) {
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) e.emplace_back(i, j);
  return e;
}

std::vector<std::pair<int, int>> grid_edges(int n) {
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i < n; ++i) {
    const int r = i / cols;
    const int c = i % cols;
    if (c + 1 < cols && i + 1 < n && (i + 1) / cols == r) e.emplace_back(i, i + 1);
    if (i + cols < n) e.emplace_back(i, i + cols);
  }
  return e;
}

std::vector<std::pair<int, int>> erdos_renyi_edges(int n, double p, RngStream& rng) {
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (rng.uniform() < p) e.emplace_back(i, j);
  return e;
}

std::vector<std::pair<int, int>> geometric_edges(int n, double radius,
                                                 RngStream& rng) {
  std::vector<std::pair<double, double>> pts(static_cast<size_t>(n));
  for (auto& p : pts) {
    p.first = rng.uniform();
    p.second = rng.uniform();
  }
  const double r2 = radius * radius;
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double dx = pts[static_cast<size_t>(i)].first - pts[static_cast<size_t>(j)].first;
      const double dy = pts[static_cast<size_t>(i)].second - pts[static_cast<size_t>(j)].second;
      if (dx * dx + dy * dy <= r2) e.emplace_back(i, j);
    }
  }
  return e;
}

}  // namespace

SensorNetwork generate_network(GraphKind kind, int node_count,
                               const GraphParams& params, RngStream& rng) {
  if (node_count < 1) {
    throw std::invalid_argument("generate_network: node count must be >= 1");
  }
  switch (kind) {
    case GraphKind::kPath:
      return SensorNetwork::from_edges(node_count, path_edges(node_count));
    case GraphKind::kCycle:
      return SensorNetwork::from_edges(node_count, cycle_edges(node_count));
    case GraphKind::kComplete:
      return SensorNetwork::from_edges(node_count, complete_edges(node_count));
    case GraphKind::kGrid:
      return SensorNetwork::from_edges(node_count, grid_edges(node_count));
    case GraphKind::kErdosRenyi:
    case GraphKind::kGeometric:
      break;
  }

  if (kind == GraphKind::kErdosRenyi &&
      (params.edge_probability < 0.0 || params.edge_probability > 1.0)) {
    throw std::invalid_argument("generate_network: p must be in [0, 1]");
  }
  if (kind == GraphKind::kGeometric && params.radius <= 0.0) {
    throw std::invalid_argument("generate_network: radius must be positive");
  }

  for (int attempt = 0; attempt < params.max_retries; ++attempt) {
    auto edges = kind == GraphKind::kErdosRenyi
                     ? erdos_renyi_edges(node_count, params.edge_probability, rng)
                     : geometric_edges(node_count, params.radius, rng);
    auto net = SensorNetwork::from_edges(node_count, edges);
    if (net.connected()) return net;
  }
  throw std::runtime_error("generate_network: could not generate connected graph after " +
                           std::to_string(params.max_retries) + " attempts");
}

GraphKind parse_graph_kind(const std::string& name) {
  if (name == "path") return GraphKind::kPath;
  if (name == "cycle") return GraphKind::kCycle;
  if (name == "complete") return GraphKind::kComplete;
  if (name == "grid") return GraphKind::kGrid;
  if (name == "erdos_renyi") return GraphKind::kErdosRenyi;
  if (name == "geometric") return GraphKind::kGeometric;
  throw std::invalid_argument("unknown graph kind: " + name);
}

std::string graph_kind_name(GraphKind kind) {
  switch (kind) {
    case GraphKind::kPath: return "path";
    case GraphKind::kCycle: return "cycle";
    case GraphKind::kComplete: return "complete";
    case GraphKind::kGrid: return "grid";
    case GraphKind::kErdosRenyi: return "erdos_renyi";
    case GraphKind::kGeometric: return "geometric";
  }
  return "?";
}

void write_edge_list(std::ostream& os, const SensorNetwork& net) {
  os << net.node_count() << "\n";
  for (auto [u, v] : net.edges()) os << u << " " << v << "\n";
}

SensorNetwork read_edge_list(std::istream& is) {
  int n = 0;
  if (!(is >> n)) throw std::runtime_error("edge list: missing node count");
  std::vector<std::pair<int, int>> edges;
  int u, v;
  while (is >> u >> v) edges.emplace_back(u, v);
  return SensorNetwork::from_edges(n, edges);
}

}  // namespace dkf
