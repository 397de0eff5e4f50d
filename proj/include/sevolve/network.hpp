#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sevolve/cell.hpp"
#include "sevolve/errors.hpp"
#include "sevolve/evolve.hpp"
#include "sevolve/graph.hpp"
#include "sevolve/rng.hpp"
#include "sevolve/tensor.hpp"

namespace sevolve {

/// How a layer's graph turns into the next layer's graph.
enum class Evolution {
  stochastic,  // Metropolis-Hastings sampling
  threshold,   // merge every edge with p >= threshold
  none,        // keep the base graph at every layer
};

struct NetworkConfig {
  std::size_t num_layers = 5;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;  // 0 means "same as input_dim"
  std::size_t num_classes = 2;
  double edge_loss_weight = 1.0;
  Evolution evolution = Evolution::stochastic;
  double threshold = 0.7;
  std::size_t max_trials = 50;

  std::size_t hidden() const { return hidden_dim == 0 ? input_dim : hidden_dim; }

  void validate() const {
    if (num_layers < 1) throw ValidationError("network: num_layers must be >= 1");
    if (input_dim < 1) throw ValidationError("network: input_dim must be >= 1");
    if (num_classes < 2) throw ValidationError("network: num_classes must be >= 2");
    if (!(edge_loss_weight >= 0.0)) throw ValidationError("network: edge_loss_weight must be >= 0");
    if (max_trials < 1) throw ValidationError("network: max_trials must be >= 1");
    if (evolution == Evolution::threshold && !(threshold >= 0.0 && threshold <= 1.0))
      throw ValidationError("network: threshold must lie in [0, 1]");
  }
};

/// Shared cell weights plus one linear prediction head per level.
struct ModelParams {
  CellParams cell;
  std::vector<Matrix> head_weight;  // C x H, one per level
  std::vector<Matrix> head_bias;    // C x 1, one per level

  ModelParams() = default;
  explicit ModelParams(const NetworkConfig& cfg) : cell(cfg.input_dim, cfg.hidden()) {
    for (std::size_t t = 0; t < cfg.num_layers; ++t) {
      head_weight.emplace_back(cfg.num_classes, cfg.hidden());
      head_bias.emplace_back(cfg.num_classes, 1);
    }
  }

  std::size_t num_layers() const { return head_weight.size(); }
  std::size_t num_classes() const { return head_weight.empty() ? 0 : head_weight[0].rows(); }

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    self.cell.for_each(fn);
    for (std::size_t t = 0; t < self.head_weight.size(); ++t) {
      fn("head." + std::to_string(t) + ".weight", self.head_weight[t]);
      fn("head." + std::to_string(t) + ".bias", self.head_bias[t]);
    }
  }
  template <typename Fn>
  void for_each(Fn&& fn) { visit(*this, fn); }
  template <typename Fn>
  void for_each(Fn&& fn) const { visit(*this, fn); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  void set_zero() {
    for_each([](const std::string&, Matrix& m) { m.set_zero(); });
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Cell weights uniform in [-0.1, 0.1], head weights N(0, 0.001^2), biases zero.
inline ModelParams init_params(const NetworkConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p(cfg);
  p.cell.for_each([&](const std::string& name, Matrix& m) {
    if (name.ends_with(".bias")) return;
    for (double& x : m.flat()) x = rng.uniform(-0.1, 0.1);
  });
  for (Matrix& w : p.head_weight)
    for (double& x : w.flat()) x = rng.normal(0.0, 0.001);
  return p;
}

/// 1 where the endpoints share a label.
inline Vec edge_targets(const LevelGraph& g, std::span<const std::size_t> labels) {
  Vec t(g.num_edges());
  for (std::size_t k = 0; k < g.num_edges(); ++k)
    t[k] = labels[g.edge(k).a] == labels[g.edge(k).b] ? 1.0 : 0.0;
  return t;
}

struct Sample {
  LevelGraph graph;
  std::vector<Vec> features;
  std::vector<std::size_t> labels;

  Vec merge_targets() const { return edge_targets(graph, labels); }

  void validate_features(std::size_t input_dim) const {
    const std::size_t n = graph.num_nodes();
    if (features.size() != n || labels.size() != n)
      throw ValidationError("sample: features/labels must cover all " + std::to_string(n) +
                            " nodes");
    for (std::size_t v = 0; v < n; ++v)
      if (features[v].size() != input_dim)
        throw ValidationError("sample: node " + std::to_string(v) + " has feature dimension " +
                              std::to_string(features[v].size()) + ", expected " +
                              std::to_string(input_dim));
  }

  void validate_labels(std::size_t num_classes) const {
    for (std::size_t v = 0; v < labels.size(); ++v)
      if (labels[v] >= num_classes)
        throw ValidationError("sample: label " + std::to_string(labels[v]) + " of node " +
                              std::to_string(v) + " is out of range");
  }

  void validate(std::size_t input_dim, std::size_t num_classes) const {
    validate_features(input_dim);
    validate_labels(num_classes);
  }

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Per-level states and caches from one forward pass.
struct LayerRecord {
  std::vector<NodeId> visit_order;
  std::vector<Vec> inputs;
  std::vector<Vec> prev_hidden;
  std::vector<Vec> prev_memory;
  std::vector<Vec> hidden;
  std::vector<Vec> memory;
  std::vector<CellCache> caches;                // by node id
  std::vector<std::vector<char>> nbr_visited;   // by node id, aligned with neighbors()
  std::vector<Vec> directed_probs;              // by node id, aligned with neighbors()
  std::vector<Vec> logits;                      // by node id
};

struct ForwardResult {
  HierarchyTrace trace;
  std::vector<LayerRecord> layers;
  std::vector<std::vector<NodeId>> base_maps;  // per level: base node -> level node
  std::vector<Vec> combined_logits;            // per base node
};

/// Fixed structure to reuse instead of sampling: visit orders per level and
/// selected edges per transition. Empty members are sampled as usual.
struct StructureReplay {
  std::vector<std::vector<NodeId>> visit_orders;
  std::vector<std::vector<std::size_t>> selected;
};

inline StructureReplay replay_of(const ForwardResult& r) {
  StructureReplay s;
  for (const LayerRecord& l : r.layers) s.visit_orders.push_back(l.visit_order);
  s.selected = r.trace.selected;
  return s;
}

namespace detail {

inline Vec softmax(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  Vec p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (double& x : p) x /= s;
  return p;
}

inline double cross_entropy(std::span<const double> z, std::size_t label) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double x : z) s += std::exp(x - mx);
  return std::log(s) + mx - z[label];
}

inline Vec apply_head(const Matrix& w, const Matrix& b, std::span<const double> h) {
  Vec out(b.flat().begin(), b.flat().end());
  gemv_acc(w, h, out);
  return out;
}

/// Majority base label per level node, ties to the smaller label.
inline std::vector<std::size_t> majority_labels(std::span<const NodeId> base_map,
                                                std::size_t num_level_nodes,
                                                std::span<const std::size_t> labels,
                                                std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> counts(num_level_nodes,
                                               std::vector<std::size_t>(num_classes, 0));
  for (std::size_t b = 0; b < base_map.size(); ++b) ++counts[base_map[b]][labels[b]];
  std::vector<std::size_t> out(num_level_nodes);
  for (std::size_t v = 0; v < num_level_nodes; ++v)
    out[v] = static_cast<std::size_t>(
        std::max_element(counts[v].begin(), counts[v].end()) - counts[v].begin());
  return out;
}

}  // namespace detail

/// Per-level edge supervision targets for a realized hierarchy.
inline std::vector<Vec> level_edge_targets(const ForwardResult& r, const Sample& s,
                                           std::size_t num_classes) {
  std::vector<Vec> out;
  for (std::size_t t = 0; t < r.trace.num_levels(); ++t) {
    const LevelGraph& g = r.trace.levels[t];
    if (t == 0) {
      out.push_back(edge_targets(g, s.labels));
    } else {
      const auto lab = detail::majority_labels(r.base_maps[t], g.num_nodes(), s.labels, num_classes);
      out.push_back(edge_targets(g, lab));
    }
  }
  return out;
}

/// Runs every layer on the evolving hierarchy. Labels are read only in train
/// mode with stochastic evolution, where they drive the posterior ratio.
inline ForwardResult forward(const Sample& sample, const ModelParams& params,
                             const NetworkConfig& cfg, Rng& rng, Mode mode,
                             const StructureReplay* replay = nullptr) {
  cfg.validate();
  const std::size_t H = cfg.hidden();
  const std::size_t C = cfg.num_classes;
  const std::size_t L = cfg.num_layers;
  if (params.cell.input_dim != cfg.input_dim || params.cell.hidden_dim != H ||
      params.num_layers() != L || params.num_classes() != C)
    throw ValidationError("forward: parameters do not match the network configuration");
  sample.validate_features(cfg.input_dim);
  if (mode == Mode::train) sample.validate_labels(C);

  ForwardResult r;
  r.trace.levels.push_back(sample.graph);
  r.base_maps.emplace_back(sample.graph.num_nodes());
  for (NodeId v = 0; v < sample.graph.num_nodes(); ++v) r.base_maps[0][v] = v;

  std::vector<Vec> inputs = sample.features;
  std::vector<Vec> prev_h(sample.graph.num_nodes(), Vec(H, 0.0));
  std::vector<Vec> prev_m(sample.graph.num_nodes(), Vec(H, 0.0));

  for (std::size_t t = 0; t < L; ++t) {
    const LevelGraph& g = r.trace.levels[t];
    const std::size_t n = g.num_nodes();
    LayerRecord layer;
    if (replay && t < replay->visit_orders.size()) {
      layer.visit_order = replay->visit_orders[t];
      if (layer.visit_order.size() != n)
        throw ValidationError("forward: replayed visit order does not match level size");
    } else {
      layer.visit_order = rng.permutation(n);
    }
    layer.inputs = std::move(inputs);
    layer.prev_hidden = std::move(prev_h);
    layer.prev_memory = std::move(prev_m);
    layer.hidden = layer.prev_hidden;
    layer.memory = layer.prev_memory;
    layer.caches.resize(n);
    layer.nbr_visited.resize(n);
    layer.directed_probs.resize(n);
    std::vector<char> visited(n, 0);

    for (NodeId i : layer.visit_order) {
      const auto nbrs = g.neighbors(i);
      CellInput in;
      in.features = layer.inputs[i];
      in.prev_hidden = layer.prev_hidden[i];
      in.prev_memory = layer.prev_memory[i];
      Vec avg(H, 0.0);
      layer.nbr_visited[i].resize(nbrs.size());
      for (std::size_t k = 0; k < nbrs.size(); ++k) {
        const NodeId j = nbrs[k];
        const bool vis = visited[j] != 0;
        layer.nbr_visited[i][k] = vis;
        const Vec& hj = vis ? layer.hidden[j] : layer.prev_hidden[j];
        for (std::size_t d = 0; d < H; ++d) avg[d] += hj[d];
        in.neighbors.push_back(NeighborInput{layer.prev_hidden[j],
                                             vis ? layer.memory[j] : layer.prev_memory[j]});
      }
      if (!nbrs.empty())
        for (double& x : avg) x /= static_cast<double>(nbrs.size());
      in.neighbor_avg_hidden = avg;
      CellOutput out = cell_forward(params.cell, in);
      layer.hidden[i] = std::move(out.hidden);
      layer.memory[i] = std::move(out.memory);
      layer.directed_probs[i] = std::move(out.edge_probs);
      layer.caches[i] = std::move(out.cache);
      visited[i] = 1;
    }

    // Undirected probability = mean of the two directed readouts.
    Vec probs(g.num_edges(), 0.0);
    for (NodeId i = 0; i < n; ++i) {
      const auto inc = g.incident_edges(i);
      for (std::size_t k = 0; k < inc.size(); ++k) probs[inc[k]] += 0.5 * layer.directed_probs[i][k];
    }
    r.trace.edge_probs.push_back(probs);

    layer.logits.resize(n);
    for (NodeId v = 0; v < n; ++v)
      layer.logits[v] =
          detail::apply_head(params.head_weight[t], params.head_bias[t], layer.hidden[v]);

    if (t + 1 < L) {
      EvolveResult ev;
      if (replay && t < replay->selected.size()) {
        ev.selected = replay->selected[t];
        ev.coarsening = coarsen_by_index(g, ev.selected);
      } else if (cfg.evolution == Evolution::none) {
        ev.coarsening = coarsen_by_index(g, {});
      } else if (cfg.evolution == Evolution::threshold) {
        ev = threshold_step(g, probs, cfg.threshold);
      } else {
        EvolveConfig ec{cfg.max_trials, mode};
        LossEval loss_eval;
        if (mode == Mode::train) {
          const auto& base_map = r.base_maps[t];
          const auto& logits = layer.logits;
          const auto& labels = sample.labels;
          loss_eval = [&base_map, &logits, &labels, C](const Coarsening& c) {
            const std::size_t k = c.partition.num_cliques();
            std::vector<Vec> merged(k, Vec(C, 0.0));
            for (NodeId v = 0; v < logits.size(); ++v)
              axpy(1.0, logits[v], merged[c.partition.clique_of(v)]);
            for (NodeId q = 0; q < k; ++q)
              for (double& x : merged[q]) x /= static_cast<double>(c.partition.members(q).size());
            double loss = 0.0;
            for (std::size_t b = 0; b < base_map.size(); ++b)
              loss += detail::cross_entropy(merged[c.partition.clique_of(base_map[b])], labels[b]);
            return loss / static_cast<double>(base_map.size());
          };
        }
        ev = evolve_step(g, probs, loss_eval, ec, rng);
      }
      std::vector<TransitionRecord> recs;
      for (std::size_t k = 0; k < ev.trials.size(); ++k) recs.push_back(ev.trials[k].record(k + 1));
      r.trace.decisions.push_back(std::move(recs));
      r.trace.selected.push_back(ev.selected);

      const CliquePartition& part = ev.coarsening.partition;
      inputs = aggregate_node_values(part, layer.inputs);
      prev_h = aggregate_node_values(part, layer.hidden);
      prev_m = aggregate_node_values(part, layer.memory);
      std::vector<NodeId> next_map = r.base_maps[t];
      for (NodeId& v : next_map) v = part.clique_of(v);
      r.base_maps.push_back(std::move(next_map));
      r.trace.partitions.push_back(part);
      r.trace.levels.push_back(std::move(ev.coarsening.graph));
    }
    r.layers.push_back(std::move(layer));
  }

  const std::size_t n0 = sample.graph.num_nodes();
  r.combined_logits.assign(n0, Vec(C, 0.0));
  for (std::size_t t = 0; t < L; ++t)
    for (NodeId b = 0; b < n0; ++b)
      axpy(1.0, r.layers[t].logits[r.base_maps[t][b]], r.combined_logits[b]);
  return r;
}

struct LossBreakdown {
  double total = 0.0;
  double task = 0.0;
  double edge = 0.0;
};

/// Mean cross-entropy of the combined logits plus the weighted mean squared
/// error of every level's edge probabilities.
inline LossBreakdown compute_loss(const ForwardResult& r, const Sample& s, const NetworkConfig& cfg) {
  const std::size_t n0 = s.graph.num_nodes();
  if (r.combined_logits.size() != n0 || s.labels.size() != n0)
    throw ValidationError("compute_loss: result does not belong to this sample");
  LossBreakdown out;
  for (NodeId b = 0; b < n0; ++b) {
    if (s.labels[b] >= cfg.num_classes)
      throw ValidationError("compute_loss: label " + std::to_string(s.labels[b]) +
                            " out of range");
    out.task += detail::cross_entropy(r.combined_logits[b], s.labels[b]);
  }
  out.task /= static_cast<double>(n0);
  const auto targets = level_edge_targets(r, s, cfg.num_classes);
  std::size_t count = 0;
  for (std::size_t t = 0; t < targets.size(); ++t)
    for (std::size_t k = 0; k < targets[t].size(); ++k) {
      const double e = r.trace.edge_probs[t][k] - targets[t][k];
      out.edge += e * e;
      ++count;
    }
  if (count > 0) out.edge /= static_cast<double>(count);
  out.total = out.task + cfg.edge_loss_weight * out.edge;
  return out;
}

/// Exact gradient of compute_loss().total over the realized hierarchy. The
/// discrete merge decisions are treated as constants.
inline ModelParams backward(const ForwardResult& r, const Sample& s, const ModelParams& params,
                            const NetworkConfig& cfg) {
  const std::size_t H = cfg.hidden();
  const std::size_t C = cfg.num_classes;
  const std::size_t L = r.layers.size();
  const std::size_t n0 = s.graph.num_nodes();
  if (L != params.num_layers() || r.combined_logits.size() != n0 ||
      r.trace.num_levels() != L)
    throw ValidationError("backward: result does not match parameters or sample");

  ModelParams grads(cfg);

  std::vector<Vec> d_comb(n0);
  for (NodeId b = 0; b < n0; ++b) {
    d_comb[b] = detail::softmax(r.combined_logits[b]);
    d_comb[b][s.labels[b]] -= 1.0;
    for (double& x : d_comb[b]) x /= static_cast<double>(n0);
  }

  const auto targets = level_edge_targets(r, s, C);
  std::size_t edge_count = 0;
  for (const Vec& t : targets) edge_count += t.size();
  const double edge_scale =
      edge_count > 0 ? 2.0 * cfg.edge_loss_weight / static_cast<double>(edge_count) : 0.0;

  std::vector<Vec> d_next_h, d_next_m;  // gradients w.r.t. level t+1 previous states
  for (std::size_t t = L; t-- > 0;) {
    const LayerRecord& layer = r.layers[t];
    const LevelGraph& g = r.trace.levels[t];
    const std::size_t n = g.num_nodes();
    std::vector<Vec> dh(n, Vec(H, 0.0)), dm(n, Vec(H, 0.0));
    std::vector<Vec> d_prev_h(n, Vec(H, 0.0)), d_prev_m(n, Vec(H, 0.0));

    std::vector<Vec> d_logit(n, Vec(C, 0.0));
    for (NodeId b = 0; b < n0; ++b) axpy(1.0, d_comb[b], d_logit[r.base_maps[t][b]]);
    for (NodeId v = 0; v < n; ++v) {
      outer_acc(d_logit[v], layer.hidden[v], grads.head_weight[t]);
      bias_acc(d_logit[v], grads.head_bias[t]);
      gemv_t_acc(params.head_weight[t], d_logit[v], dh[v]);
    }

    if (t + 1 < L) {
      const CliquePartition& part = r.trace.partitions[t];
      for (NodeId v = 0; v < n; ++v) {
        const NodeId q = part.clique_of(v);
        const double inv = 1.0 / static_cast<double>(part.members(q).size());
        axpy(inv, d_next_h[q], dh[v]);
        axpy(inv, d_next_m[q], dm[v]);
      }
    }

    Vec d_edge(g.num_edges());
    for (std::size_t k = 0; k < g.num_edges(); ++k)
      d_edge[k] = edge_scale * (r.trace.edge_probs[t][k] - targets[t][k]);

    for (auto it = layer.visit_order.rbegin(); it != layer.visit_order.rend(); ++it) {
      const NodeId i = *it;
      const auto nbrs = g.neighbors(i);
      const auto inc = g.incident_edges(i);
      Vec d_dir(nbrs.size());
      for (std::size_t k = 0; k < nbrs.size(); ++k) d_dir[k] = 0.5 * d_edge[inc[k]];
      CellInputGrads gi = cell_backward(params.cell, layer.caches[i], dh[i], dm[i], d_dir, grads.cell);
      axpy(1.0, gi.prev_hidden, d_prev_h[i]);
      axpy(1.0, gi.prev_memory, d_prev_m[i]);
      const double inv_deg = nbrs.empty() ? 0.0 : 1.0 / static_cast<double>(nbrs.size());
      for (std::size_t k = 0; k < nbrs.size(); ++k) {
        const NodeId j = nbrs[k];
        axpy(1.0, gi.nbr_prev_hidden[k], d_prev_h[j]);
        if (layer.nbr_visited[i][k]) {
          axpy(1.0, gi.nbr_memory[k], dm[j]);
          axpy(inv_deg, gi.neighbor_avg_hidden, dh[j]);
        } else {
          axpy(1.0, gi.nbr_memory[k], d_prev_m[j]);
          axpy(inv_deg, gi.neighbor_avg_hidden, d_prev_h[j]);
        }
      }
    }
    d_next_h = std::move(d_prev_h);
    d_next_m = std::move(d_prev_m);
  }
  return grads;
}

/// Argmax of the combined logits; ties go to the smaller class id.
inline std::vector<std::size_t> argmax_rows(std::span<const Vec> logits) {
  std::vector<std::size_t> out;
  out.reserve(logits.size());
  for (const Vec& z : logits)
    out.push_back(static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin()));
  return out;
}

/// Test-mode prediction per base node.
inline std::vector<std::size_t> predict(const Sample& sample, const ModelParams& params,
                                        const NetworkConfig& cfg, Rng& rng) {
  return argmax_rows(forward(sample, params, cfg, rng, Mode::test).combined_logits);
}

}  // namespace sevolve
