#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sevolve/errors.hpp"
#include "sevolve/graph.hpp"
#include "sevolve/tensor.hpp"

namespace sevolve {

/// Weights feeding one gate. `from_neighbors` multiplies the averaged neighbor
/// hidden state, except for the forget gate, where it multiplies each single
/// neighbor's previous hidden state to form the per-neighbor adaptive gate.
struct GateWeights {
  Matrix from_input;      // H x D
  Matrix from_self;       // H x H
  Matrix from_neighbors;  // H x H
  Matrix bias;            // H x 1

  GateWeights() = default;
  GateWeights(std::size_t input_dim, std::size_t hidden_dim)
      : from_input(hidden_dim, input_dim),
        from_self(hidden_dim, hidden_dim),
        from_neighbors(hidden_dim, hidden_dim),
        bias(hidden_dim, 1) {}

  friend bool operator==(const GateWeights&, const GateWeights&) = default;
};

/// All weights of the structure-evolving LSTM unit. One instance is shared by
/// every layer of a network.
struct CellParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  GateWeights input_gate;
  GateWeights forget_gate;
  GateWeights cell_gate;
  GateWeights output_gate;
  Matrix edge_gate;  // 1 x H

  CellParams() = default;
  CellParams(std::size_t d, std::size_t h)
      : input_dim(d),
        hidden_dim(h),
        input_gate(d, h),
        forget_gate(d, h),
        cell_gate(d, h),
        output_gate(d, h),
        edge_gate(1, h) {}

  /// Visits (name, tensor) in a fixed order; checkpoints depend on it.
  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    auto gate = [&](auto& g, const char* name) {
      const std::string p = prefix + name;
      fn(p + ".from_input", g.from_input);
      fn(p + ".from_self", g.from_self);
      fn(p + ".from_neighbors", g.from_neighbors);
      fn(p + ".bias", g.bias);
    };
    gate(self.input_gate, "input_gate");
    gate(self.forget_gate, "forget_gate");
    gate(self.cell_gate, "cell_gate");
    gate(self.output_gate, "output_gate");
    fn(prefix + "edge_gate", self.edge_gate);
  }

  template <typename Fn>
  void for_each(Fn&& fn, const std::string& prefix = "cell.") {
    visit(*this, prefix, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn, const std::string& prefix = "cell.") const {
    visit(*this, prefix, fn);
  }

  friend bool operator==(const CellParams&, const CellParams&) = default;
};

struct NodeState {
  Vec hidden;
  Vec memory;
  bool visited = false;
};

/// Mean over neighbors of the updated hidden state (visited) or the previous
/// one (not yet visited). Isolated nodes get the zero vector.
inline Vec average_neighbor_hidden(const LevelGraph& g, std::span<const NodeState> states,
                                   std::span<const Vec> prev_hidden, NodeId i) {
  if (i >= g.num_nodes())
    throw ValidationError("average_neighbor_hidden: node " + std::to_string(i) +
                          " out of range");
  if (states.size() != g.num_nodes() || prev_hidden.size() != g.num_nodes())
    throw ValidationError("average_neighbor_hidden: states must cover all nodes");
  const auto nbrs = g.neighbors(i);
  const std::size_t h = prev_hidden[i].size();
  Vec avg(h, 0.0);
  if (nbrs.empty()) return avg;
  for (NodeId j : nbrs) {
    const Vec& src = states[j].visited ? states[j].hidden : prev_hidden[j];
    require_dim(src, h, "average_neighbor_hidden");
    for (std::size_t d = 0; d < h; ++d) avg[d] += src[d];
  }
  const double inv = 1.0 / static_cast<double>(nbrs.size());
  for (double& x : avg) x *= inv;
  return avg;
}

/// What the unit sees of one neighbor j: its previous hidden state (drives the
/// adaptive forget gate) and its memory, already chosen by visit flag.
struct NeighborInput {
  std::span<const double> prev_hidden;
  std::span<const double> memory;
};

struct CellInput {
  std::span<const double> features;
  std::span<const double> prev_hidden;
  std::span<const double> prev_memory;
  std::span<const double> neighbor_avg_hidden;
  std::vector<NeighborInput> neighbors;
};

/// Everything cell_backward needs; written once by cell_forward.
struct CellCache {
  Vec features, prev_hidden, prev_memory, neighbor_avg_hidden;
  std::vector<Vec> nbr_prev_hidden, nbr_memory;
  Vec input_gate, forget_gate, output_gate, cell_gate;
  std::vector<Vec> adaptive_forget;  // per neighbor
  Vec memory, hidden;
  Vec edge_probs;  // per neighbor
};

struct CellOutput {
  Vec hidden;
  Vec memory;
  Vec edge_probs;
  CellCache cache;
};

inline CellOutput cell_forward(const CellParams& w, const CellInput& in) {
  const std::size_t D = w.input_dim;
  const std::size_t H = w.hidden_dim;
  require_dim(in.features, D, "cell_forward features");
  require_dim(in.prev_hidden, H, "cell_forward prev_hidden");
  require_dim(in.prev_memory, H, "cell_forward prev_memory");
  require_dim(in.neighbor_avg_hidden, H, "cell_forward neighbor_avg_hidden");
  for (const auto& n : in.neighbors) {
    require_dim(n.prev_hidden, H, "cell_forward neighbor prev_hidden");
    require_dim(n.memory, H, "cell_forward neighbor memory");
    if (!all_finite(n.prev_hidden) || !all_finite(n.memory))
      throw NumericError("cell_forward: non-finite neighbor state");
  }
  if (!all_finite(in.features) || !all_finite(in.prev_hidden) || !all_finite(in.prev_memory) ||
      !all_finite(in.neighbor_avg_hidden))
    throw NumericError("cell_forward: non-finite input");

  CellCache c;
  c.features.assign(in.features.begin(), in.features.end());
  c.prev_hidden.assign(in.prev_hidden.begin(), in.prev_hidden.end());
  c.prev_memory.assign(in.prev_memory.begin(), in.prev_memory.end());
  c.neighbor_avg_hidden.assign(in.neighbor_avg_hidden.begin(), in.neighbor_avg_hidden.end());

  auto preact = [&](const GateWeights& g, bool use_neighbors) {
    Vec a(g.bias.flat().begin(), g.bias.flat().end());
    gemv_acc(g.from_input, c.features, a);
    gemv_acc(g.from_self, c.prev_hidden, a);
    if (use_neighbors) gemv_acc(g.from_neighbors, c.neighbor_avg_hidden, a);
    return a;
  };

  c.input_gate = preact(w.input_gate, true);
  for (double& x : c.input_gate) x = sigmoid(x);
  c.forget_gate = preact(w.forget_gate, false);
  for (double& x : c.forget_gate) x = sigmoid(x);
  c.output_gate = preact(w.output_gate, true);
  for (double& x : c.output_gate) x = sigmoid(x);
  c.cell_gate = preact(w.cell_gate, true);
  for (double& x : c.cell_gate) x = std::tanh(x);

  // Input-feature part of the forget gate is shared by all neighbors.
  Vec forget_base(w.forget_gate.bias.flat().begin(), w.forget_gate.bias.flat().end());
  gemv_acc(w.forget_gate.from_input, c.features, forget_base);

  const std::size_t n = in.neighbors.size();
  c.memory.assign(H, 0.0);
  c.edge_probs.assign(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    c.nbr_prev_hidden.emplace_back(in.neighbors[k].prev_hidden.begin(),
                                   in.neighbors[k].prev_hidden.end());
    c.nbr_memory.emplace_back(in.neighbors[k].memory.begin(), in.neighbors[k].memory.end());
    Vec gate = forget_base;
    gemv_acc(w.forget_gate.from_neighbors, c.nbr_prev_hidden[k], gate);
    double z = 0.0;
    for (std::size_t d = 0; d < H; ++d) {
      gate[d] = sigmoid(gate[d]);
      z += w.edge_gate(0, d) * gate[d];
      c.memory[d] += gate[d] * c.nbr_memory[k][d];
    }
    c.edge_probs[k] = sigmoid(z);
    c.adaptive_forget.push_back(std::move(gate));
  }
  if (n > 0) {
    const double inv = 1.0 / static_cast<double>(n);
    for (double& x : c.memory) x *= inv;
  }
  c.hidden.assign(H, 0.0);
  for (std::size_t d = 0; d < H; ++d) {
    c.memory[d] += c.forget_gate[d] * c.prev_memory[d] + c.input_gate[d] * c.cell_gate[d];
    c.hidden[d] = std::tanh(c.output_gate[d] * c.memory[d]);
  }

  CellOutput out;
  out.hidden = c.hidden;
  out.memory = c.memory;
  out.edge_probs = c.edge_probs;
  out.cache = std::move(c);
  return out;
}

/// Gradients with respect to everything the unit read.
struct CellInputGrads {
  Vec features, prev_hidden, prev_memory, neighbor_avg_hidden;
  std::vector<Vec> nbr_prev_hidden;
  std::vector<Vec> nbr_memory;
};

/// Reverse pass of cell_forward. Parameter gradients are added into `grads`,
/// which must have the same shapes as `w`.
inline CellInputGrads cell_backward(const CellParams& w, const CellCache& c,
                                    std::span<const double> d_hidden,
                                    std::span<const double> d_memory,
                                    std::span<const double> d_edge_probs, CellParams& grads) {
  const std::size_t D = w.input_dim;
  const std::size_t H = w.hidden_dim;
  const std::size_t n = c.adaptive_forget.size();
  require_dim(d_hidden, H, "cell_backward d_hidden");
  require_dim(d_memory, H, "cell_backward d_memory");
  require_dim(d_edge_probs, n, "cell_backward d_edge_probs");
  if (c.hidden.size() != H || c.features.size() != D)
    throw ValidationError("cell_backward: cache does not match parameter shapes");
  if (grads.input_dim != D || grads.hidden_dim != H)
    throw ValidationError("cell_backward: gradient buffer does not match parameter shapes");

  // Through h = tanh(o * m).
  Vec dm(H), da_u(H), da_f(H), da_o(H), da_c(H);
  for (std::size_t d = 0; d < H; ++d) {
    const double ds = d_hidden[d] * (1.0 - c.hidden[d] * c.hidden[d]);
    dm[d] = d_memory[d] + ds * c.output_gate[d];
    const double d_out = ds * c.memory[d];
    da_o[d] = d_out * c.output_gate[d] * (1.0 - c.output_gate[d]);
    const double d_forget = dm[d] * c.prev_memory[d];
    da_f[d] = d_forget * c.forget_gate[d] * (1.0 - c.forget_gate[d]);
    const double d_in = dm[d] * c.cell_gate[d];
    da_u[d] = d_in * c.input_gate[d] * (1.0 - c.input_gate[d]);
    const double d_cell = dm[d] * c.input_gate[d];
    da_c[d] = d_cell * (1.0 - c.cell_gate[d] * c.cell_gate[d]);
  }

  CellInputGrads g;
  g.features.assign(D, 0.0);
  g.prev_hidden.assign(H, 0.0);
  g.prev_memory.assign(H, 0.0);
  g.neighbor_avg_hidden.assign(H, 0.0);
  for (std::size_t d = 0; d < H; ++d) g.prev_memory[d] = dm[d] * c.forget_gate[d];

  // Per-neighbor adaptive forget gates and edge gate.
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  Vec da_fn_sum(H, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec& gate = c.adaptive_forget[k];
    const double p = c.edge_probs[k];
    const double dz = d_edge_probs[k] * p * (1.0 - p);
    Vec da(H), dmem(H);
    for (std::size_t d = 0; d < H; ++d) {
      const double dgate = dm[d] * c.nbr_memory[k][d] * inv_n + dz * w.edge_gate(0, d);
      grads.edge_gate(0, d) += dz * gate[d];
      da[d] = dgate * gate[d] * (1.0 - gate[d]);
      dmem[d] = dm[d] * gate[d] * inv_n;
      da_fn_sum[d] += da[d];
    }
    outer_acc(da, c.nbr_prev_hidden[k], grads.forget_gate.from_neighbors);
    Vec dh(H, 0.0);
    gemv_t_acc(w.forget_gate.from_neighbors, da, dh);
    g.nbr_prev_hidden.push_back(std::move(dh));
    g.nbr_memory.push_back(std::move(dmem));
  }

  auto gate_back = [&](const GateWeights& wg, GateWeights& gg, const Vec& da, bool use_neighbors) {
    outer_acc(da, c.features, gg.from_input);
    outer_acc(da, c.prev_hidden, gg.from_self);
    bias_acc(da, gg.bias);
    gemv_t_acc(wg.from_input, da, g.features);
    gemv_t_acc(wg.from_self, da, g.prev_hidden);
    if (use_neighbors) {
      outer_acc(da, c.neighbor_avg_hidden, gg.from_neighbors);
      gemv_t_acc(wg.from_neighbors, da, g.neighbor_avg_hidden);
    }
  };
  gate_back(w.input_gate, grads.input_gate, da_u, true);
  gate_back(w.output_gate, grads.output_gate, da_o, true);
  gate_back(w.cell_gate, grads.cell_gate, da_c, true);
  gate_back(w.forget_gate, grads.forget_gate, da_f, false);
  // Adaptive gates share the forget gate's input weights and bias.
  outer_acc(da_fn_sum, c.features, grads.forget_gate.from_input);
  bias_acc(da_fn_sum, grads.forget_gate.bias);
  gemv_t_acc(w.forget_gate.from_input, da_fn_sum, g.features);
  return g;
}

}  // namespace sevolve
