#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sevolve/errors.hpp"
#include "sevolve/numfmt.hpp"
#include "sevolve/tensor.hpp"

namespace sevolve {

using NodeId = std::size_t;

/// Undirected edge; canonical form has a < b.
struct Edge {
  NodeId a = 0;
  NodeId b = 0;

  Edge canonical() const { return a < b ? *this : Edge{b, a}; }
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Immutable simple undirected graph with dense node ids. Edges are kept
/// sorted in canonical order; that order is the "edge index" used everywhere
/// per-edge values are stored.
class LevelGraph {
 public:
  LevelGraph() : LevelGraph(1, {}) {}

  std::size_t num_nodes() const { return num_nodes_; }
  std::size_t num_edges() const { return edges_.size(); }
  std::span<const Edge> edges() const { return edges_; }
  const Edge& edge(std::size_t k) const { return edges_[k]; }

  /// Neighbors of `i` in ascending id order.
  std::span<const NodeId> neighbors(NodeId i) const {
    return std::span<const NodeId>(adj_).subspan(offsets_[i], offsets_[i + 1] - offsets_[i]);
  }
  /// Edge index of each entry in neighbors(i).
  std::span<const std::size_t> incident_edges(NodeId i) const {
    return std::span<const std::size_t>(adj_edge_).subspan(offsets_[i],
                                                           offsets_[i + 1] - offsets_[i]);
  }
  std::size_t degree(NodeId i) const { return offsets_[i + 1] - offsets_[i]; }

  std::optional<std::size_t> edge_index(Edge e) const {
    e = e.canonical();
    auto it = std::lower_bound(edges_.begin(), edges_.end(), e);
    if (it == edges_.end() || *it != e) return std::nullopt;
    return static_cast<std::size_t>(it - edges_.begin());
  }
  bool has_edge(Edge e) const { return edge_index(e).has_value(); }

  friend bool operator==(const LevelGraph& x, const LevelGraph& y) {
    return x.num_nodes_ == y.num_nodes_ && x.edges_ == y.edges_;
  }

  friend LevelGraph build_graph(std::size_t num_nodes, std::span<const Edge> edge_list);

 private:
  LevelGraph(std::size_t n, std::vector<Edge> canonical_sorted)
      : num_nodes_(n), edges_(std::move(canonical_sorted)) {
    offsets_.assign(n + 1, 0);
    for (const Edge& e : edges_) {
      ++offsets_[e.a + 1];
      ++offsets_[e.b + 1];
    }
    for (std::size_t i = 0; i < n; ++i) offsets_[i + 1] += offsets_[i];
    adj_.resize(2 * edges_.size());
    adj_edge_.resize(2 * edges_.size());
    std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
    // Edges sorted by (a, b) push lower neighbors of v (as e.b) before higher
    // ones (as e.a), each run ascending, so every list comes out sorted.
    for (std::size_t k = 0; k < edges_.size(); ++k) {
      const Edge& e = edges_[k];
      adj_[fill[e.a]] = e.b;
      adj_edge_[fill[e.a]++] = k;
      adj_[fill[e.b]] = e.a;
      adj_edge_[fill[e.b]++] = k;
    }
  }

  std::size_t num_nodes_ = 1;
  std::vector<Edge> edges_;
  std::vector<std::size_t> offsets_;
  std::vector<NodeId> adj_;
  std::vector<std::size_t> adj_edge_;
};

/// Validates ids, rejects self-loops, and collapses duplicate or reversed pairs.
inline LevelGraph build_graph(std::size_t num_nodes, std::span<const Edge> edge_list) {
  if (num_nodes == 0) throw ValidationError("build_graph: graph needs at least one node");
  std::vector<Edge> edges;
  edges.reserve(edge_list.size());
  for (const Edge& e : edge_list) {
    if (e.a >= num_nodes || e.b >= num_nodes)
      throw ValidationError("build_graph: edge (" + std::to_string(e.a) + "," +
                            std::to_string(e.b) + ") references a node outside 0.." +
                            std::to_string(num_nodes - 1));
    if (e.a == e.b)
      throw ValidationError("build_graph: self-loop on node " + std::to_string(e.a));
    edges.push_back(e.canonical());
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return LevelGraph(num_nodes, std::move(edges));
}

inline LevelGraph build_graph(std::size_t num_nodes, std::initializer_list<Edge> edge_list) {
  return build_graph(num_nodes, std::span<const Edge>(edge_list.begin(), edge_list.size()));
}

/// Surjective map from the nodes of one level onto the nodes (cliques) of the
/// next. Clique ids are dense.
class CliquePartition {
 public:
  CliquePartition() = default;

  explicit CliquePartition(std::vector<NodeId> assignment) : assignment_(std::move(assignment)) {
    std::size_t k = 0;
    for (NodeId c : assignment_) k = std::max(k, c + 1);
    members_.assign(k, {});
    for (NodeId v = 0; v < assignment_.size(); ++v) members_[assignment_[v]].push_back(v);
    for (std::size_t c = 0; c < k; ++c)
      if (members_[c].empty())
        throw ValidationError("CliquePartition: clique id " + std::to_string(c) + " is unused");
  }

  static CliquePartition identity(std::size_t n) {
    std::vector<NodeId> a(n);
    std::iota(a.begin(), a.end(), NodeId{0});
    return CliquePartition(std::move(a));
  }

  std::size_t num_nodes() const { return assignment_.size(); }
  std::size_t num_cliques() const { return members_.size(); }
  NodeId clique_of(NodeId v) const { return assignment_[v]; }
  std::span<const NodeId> assignment() const { return assignment_; }
  std::span<const NodeId> members(NodeId c) const { return members_[c]; }
  bool is_identity() const { return members_.size() == assignment_.size(); }

  friend bool operator==(const CliquePartition& x, const CliquePartition& y) {
    return x.assignment_ == y.assignment_;
  }

 private:
  std::vector<NodeId> assignment_;
  std::vector<std::vector<NodeId>> members_;
};

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), size_(n, 1) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t x, std::size_t y) {
    x = find(x);
    y = find(y);
    if (x == y) return;
    if (size_[x] < size_[y]) std::swap(x, y);
    parent_[y] = x;
    size_[x] += size_[y];
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> size_;
};

}  // namespace detail

struct Coarsening {
  CliquePartition partition;
  LevelGraph graph;
};

/// Merges along the selected edges (given as edge indices of `g`). Cliques are
/// the connected components of (V, selected); they are numbered by ascending
/// minimum member id. Parallel inter-clique edges collapse to one.
inline Coarsening coarsen_by_index(const LevelGraph& g, std::span<const std::size_t> selected) {
  detail::DisjointSets sets(g.num_nodes());
  for (std::size_t k : selected) {
    if (k >= g.num_edges())
      throw ValidationError("coarsen: edge index " + std::to_string(k) + " out of range");
    sets.unite(g.edge(k).a, g.edge(k).b);
  }
  constexpr std::size_t kUnset = static_cast<std::size_t>(-1);
  std::vector<std::size_t> root_to_clique(g.num_nodes(), kUnset);
  std::vector<NodeId> assignment(g.num_nodes());
  std::size_t next = 0;
  for (NodeId v = 0; v < g.num_nodes(); ++v) {
    const std::size_t r = sets.find(v);
    if (root_to_clique[r] == kUnset) root_to_clique[r] = next++;
    assignment[v] = root_to_clique[r];
  }
  std::vector<Edge> cross;
  for (const Edge& e : g.edges()) {
    const NodeId ca = assignment[e.a];
    const NodeId cb = assignment[e.b];
    if (ca != cb) cross.push_back(Edge{ca, cb});
  }
  LevelGraph next_graph = build_graph(next, cross);
  return Coarsening{CliquePartition(std::move(assignment)), std::move(next_graph)};
}

/// Same as coarsen_by_index but takes explicit edges; each must exist in `g`.
inline Coarsening coarsen(const LevelGraph& g, std::span<const Edge> selected) {
  std::vector<std::size_t> idx;
  idx.reserve(selected.size());
  for (const Edge& e : selected) {
    auto k = g.edge_index(e);
    if (!k)
      throw ValidationError("coarsen: selected edge (" + std::to_string(e.a) + "," +
                            std::to_string(e.b) + ") is not an edge of the graph");
    idx.push_back(*k);
  }
  return coarsen_by_index(g, idx);
}

/// Edges of `g` whose endpoints land in the same clique.
inline std::vector<std::size_t> intra_clique_edges(const LevelGraph& g, const CliquePartition& p) {
  if (p.num_nodes() != g.num_nodes())
    throw ValidationError("intra_clique_edges: partition does not cover the graph");
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < g.num_edges(); ++k)
    if (p.clique_of(g.edge(k).a) == p.clique_of(g.edge(k).b)) out.push_back(k);
  return out;
}

/// Mean of member vectors per clique.
inline std::vector<Vec> aggregate_node_values(const CliquePartition& p, std::span<const Vec> values) {
  if (values.size() != p.num_nodes())
    throw ValidationError("aggregate_node_values: expected " + std::to_string(p.num_nodes()) +
                          " vectors, got " + std::to_string(values.size()));
  const std::size_t dim = values.empty() ? 0 : values[0].size();
  std::vector<Vec> out(p.num_cliques(), Vec(dim, 0.0));
  // Running mean: exact when all members are equal.
  for (NodeId c = 0; c < p.num_cliques(); ++c) {
    std::size_t k = 0;
    for (NodeId v : p.members(c)) {
      if (values[v].size() != dim)
        throw ValidationError("aggregate_node_values: node " + std::to_string(v) +
                              " has dimension " + std::to_string(values[v].size()) +
                              ", expected " + std::to_string(dim));
      ++k;
      for (std::size_t d = 0; d < dim; ++d)
        out[c][d] += (values[v][d] - out[c][d]) / static_cast<double>(k);
    }
  }
  return out;
}

/// One Metropolis-Hastings trial (or threshold decision) as stored in a trace.
struct TransitionRecord {
  std::size_t trial = 0;  // 1-based
  std::size_t num_selected = 0;
  double transition_ratio = 1.0;
  double posterior_ratio = 1.0;
  double alpha = 1.0;
  bool accepted = false;

  friend bool operator==(const TransitionRecord&, const TransitionRecord&) = default;
};

/// The realized sequence of graphs for one forward pass.
struct HierarchyTrace {
  std::vector<LevelGraph> levels;
  std::vector<CliquePartition> partitions;           // levels.size() - 1
  std::vector<Vec> edge_probs;                        // per level, aligned with edges()
  std::vector<std::vector<TransitionRecord>> decisions;  // per transition
  std::vector<std::vector<std::size_t>> selected;     // per transition, selected edge indices

  std::size_t num_levels() const { return levels.size(); }

  /// For each base node, its ancestor node at `level`.
  std::vector<NodeId> base_map(std::size_t level) const {
    if (level >= levels.size())
      throw ValidationError("base_map: level " + std::to_string(level) + " out of range (" +
                            std::to_string(levels.size()) + " levels)");
    std::vector<NodeId> map(levels.front().num_nodes());
    std::iota(map.begin(), map.end(), NodeId{0});
    for (std::size_t t = 0; t < level; ++t)
      for (NodeId& v : map) v = partitions[t].clique_of(v);
    return map;
  }

  friend bool operator==(const HierarchyTrace&, const HierarchyTrace&) = default;
};

/// Broadcasts per-node values at `level` down to the base nodes.
inline std::vector<Vec> project_to_base(const HierarchyTrace& h, std::size_t level,
                                        std::span<const Vec> values) {
  const auto map = h.base_map(level);
  if (values.size() != h.levels[level].num_nodes())
    throw ValidationError("project_to_base: expected " +
                          std::to_string(h.levels[level].num_nodes()) + " vectors, got " +
                          std::to_string(values.size()));
  std::vector<Vec> out;
  out.reserve(map.size());
  for (NodeId v : map) out.push_back(values[v]);
  return out;
}

/// Graphviz text for one level. Edge labels carry probabilities when given.
inline std::string to_dot(const LevelGraph& g, const std::string& name = "level",
                          std::span<const double> edge_probs = {}) {
  std::ostringstream os;
  os << "graph " << name << " {\n";
  for (NodeId v = 0; v < g.num_nodes(); ++v) os << "  n" << v << ";\n";
  for (std::size_t k = 0; k < g.num_edges(); ++k) {
    os << "  n" << g.edge(k).a << " -- n" << g.edge(k).b;
    if (k < edge_probs.size()) os << " [label=\"" << format_double(edge_probs[k]) << "\"]";
    os << ";\n";
  }
  os << "}\n";
  return os.str();
}

/// Whole hierarchy: one cluster per level, dashed arrows from each node to
/// its clique in the next level.
inline std::string to_dot(const HierarchyTrace& h, const std::string& name = "hierarchy") {
  std::ostringstream os;
  os << "digraph " << name << " {\n";
  for (std::size_t t = 0; t < h.levels.size(); ++t) {
    const LevelGraph& g = h.levels[t];
    os << "  subgraph cluster_level" << t << " {\n";
    os << "    label=\"level " << t << "\";\n";
    for (NodeId v = 0; v < g.num_nodes(); ++v) os << "    L" << t << "_" << v << ";\n";
    for (std::size_t k = 0; k < g.num_edges(); ++k) {
      os << "    L" << t << "_" << g.edge(k).a << " -> L" << t << "_" << g.edge(k).b
         << " [dir=none";
      if (t < h.edge_probs.size() && k < h.edge_probs[t].size())
        os << ", label=\"" << format_double(h.edge_probs[t][k]) << "\"";
      os << "];\n";
    }
    os << "  }\n";
  }
  for (std::size_t t = 0; t < h.partitions.size(); ++t)
    for (NodeId v = 0; v < h.partitions[t].num_nodes(); ++v)
      os << "  L" << t << "_" << v << " -> L" << t + 1 << "_" << h.partitions[t].clique_of(v)
         << " [style=dashed];\n";
  os << "}\n";
  return os.str();
}

}  // namespace sevolve
