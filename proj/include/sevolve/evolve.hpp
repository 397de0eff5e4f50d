#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sevolve/errors.hpp"
#include "sevolve/graph.hpp"
#include "sevolve/numfmt.hpp"
#include "sevolve/rng.hpp"

namespace sevolve {

enum class Mode { train, test };

struct EvolveConfig {
  std::size_t max_trials = 50;
  Mode mode = Mode::test;
};

/// One proposed coarsening and its Metropolis-Hastings bookkeeping.
struct ProposalTrace {
  std::vector<std::size_t> selected;    // edge indices of the source graph
  std::vector<std::size_t> eliminated;  // intra-clique edges of the proposal
  Coarsening coarsening;
  double transition_ratio = 1.0;
  double posterior_ratio = 1.0;
  double alpha = 1.0;
  bool accepted = false;

  TransitionRecord record(std::size_t trial) const {
    return TransitionRecord{trial, selected.size(), transition_ratio, posterior_ratio, alpha,
                            accepted};
  }
};

namespace detail {

inline void check_edge_probs(const LevelGraph& g, std::span<const double> p) {
  if (p.size() != g.num_edges())
    throw ValidationError("edge probabilities: expected " + std::to_string(g.num_edges()) +
                          " values, got " + std::to_string(p.size()));
  for (std::size_t k = 0; k < p.size(); ++k)
    if (!(p[k] >= 0.0 && p[k] <= 1.0))
      throw ValidationError("edge probability " + std::to_string(k) + " = " +
                            format_double(p[k]) + " is outside [0, 1]");
}

}  // namespace detail

struct Proposal {
  std::vector<std::size_t> selected;
  Coarsening coarsening;
};

/// Selects each edge independently with its probability, one uniform draw per
/// edge in canonical edge order, then merges along the selection.
inline Proposal propose(const LevelGraph& g, std::span<const double> edge_probs, Rng& rng) {
  detail::check_edge_probs(g, edge_probs);
  std::vector<std::size_t> selected;
  for (std::size_t k = 0; k < g.num_edges(); ++k)
    if (rng.uniform() < edge_probs[k]) selected.push_back(k);
  Coarsening c = coarsen_by_index(g, selected);
  return Proposal{std::move(selected), std::move(c)};
}

/// Product of merging probabilities over the edges the partition eliminates,
/// accumulated in log space.
inline double transition_ratio(const LevelGraph& g, const CliquePartition& partition,
                               std::span<const double> edge_probs) {
  detail::check_edge_probs(g, edge_probs);
  double log_sum = 0.0;
  for (std::size_t k : intra_clique_edges(g, partition)) log_sum += std::log(edge_probs[k]);
  return std::exp(log_sum);
}

/// Ratio of Gibbs posteriors exp(-L_new) / exp(-L_old). The exponent is
/// clamped to [-50, 50].
inline double posterior_ratio(double loss_old, double loss_new) {
  if (!std::isfinite(loss_old) || !std::isfinite(loss_new))
    throw NumericError("posterior_ratio: non-finite loss");
  return std::exp(std::clamp(loss_old - loss_new, -50.0, 50.0));
}

/// Loss of the current layer's prediction under a candidate coarsening.
using LossEval = std::function<double(const Coarsening&)>;

struct EvolveResult {
  Coarsening coarsening;
  std::vector<std::size_t> selected;  // selection behind the returned coarsening
  std::vector<ProposalTrace> trials;
  bool fell_back = false;             // no proposal accepted within max_trials
};

/// Metropolis-Hastings structure step. In test mode the posterior ratio is 1
/// and `loss_eval` is never called. Falls back to the identity partition when
/// every trial is rejected.
inline EvolveResult evolve_step(const LevelGraph& g, std::span<const double> edge_probs,
                                const LossEval& loss_eval, const EvolveConfig& cfg, Rng& rng) {
  if (cfg.max_trials < 1) throw ValidationError("evolve_step: max_trials must be >= 1");
  const bool train = cfg.mode == Mode::train;
  if (train && !loss_eval) throw ValidationError("evolve_step: train mode needs a loss callback");
  detail::check_edge_probs(g, edge_probs);

  double loss_old = 0.0;
  if (train) loss_old = loss_eval(coarsen_by_index(g, {}));

  EvolveResult out;
  for (std::size_t trial = 1; trial <= cfg.max_trials; ++trial) {
    Proposal prop = propose(g, edge_probs, rng);
    ProposalTrace t;
    t.selected = std::move(prop.selected);
    t.eliminated = intra_clique_edges(g, prop.coarsening.partition);
    t.transition_ratio = transition_ratio(g, prop.coarsening.partition, edge_probs);
    t.posterior_ratio = train ? posterior_ratio(loss_old, loss_eval(prop.coarsening)) : 1.0;
    t.alpha = std::min(1.0, t.transition_ratio * t.posterior_ratio);
    t.accepted = rng.uniform() < t.alpha;
    t.coarsening = std::move(prop.coarsening);
    out.trials.push_back(std::move(t));
    if (out.trials.back().accepted) {
      out.coarsening = out.trials.back().coarsening;
      out.selected = out.trials.back().selected;
      return out;
    }
  }
  out.fell_back = true;
  out.coarsening = coarsen_by_index(g, {});
  return out;
}

/// Deterministic ablation: merge along every edge with probability >= threshold.
/// Recorded as a single accepted trial.
inline EvolveResult threshold_step(const LevelGraph& g, std::span<const double> edge_probs,
                                   double threshold) {
  detail::check_edge_probs(g, edge_probs);
  EvolveResult out;
  for (std::size_t k = 0; k < g.num_edges(); ++k)
    if (edge_probs[k] >= threshold) out.selected.push_back(k);
  out.coarsening = coarsen_by_index(g, out.selected);
  ProposalTrace t;
  t.selected = out.selected;
  t.eliminated = intra_clique_edges(g, out.coarsening.partition);
  t.transition_ratio = transition_ratio(g, out.coarsening.partition, edge_probs);
  t.alpha = 1.0;
  t.accepted = true;
  t.coarsening = out.coarsening;
  out.trials.push_back(std::move(t));
  return out;
}

/// Line-delimited dump of a hierarchy's structure decisions: one `trial` line
/// per MH trial and one `edge` line per edge of every level that was coarsened.
inline std::string format_trace(const HierarchyTrace& h) {
  std::ostringstream os;
  for (std::size_t t = 0; t < h.decisions.size(); ++t) {
    for (const TransitionRecord& r : h.decisions[t])
      os << "trial level=" << t << " index=" << r.trial << " selected=" << r.num_selected
         << " eliminated_product=" << format_double(r.transition_ratio)
         << " posterior_ratio=" << format_double(r.posterior_ratio)
         << " alpha=" << format_double(r.alpha) << " accepted=" << (r.accepted ? 1 : 0) << "\n";
    const LevelGraph& g = h.levels[t];
    std::vector<bool> sel(g.num_edges(), false);
    if (t < h.selected.size())
      for (std::size_t k : h.selected[t]) sel[k] = true;
    for (std::size_t k = 0; k < g.num_edges(); ++k)
      os << "edge level=" << t << " a=" << g.edge(k).a << " b=" << g.edge(k).b
         << " p=" << format_double(h.edge_probs[t][k]) << " selected=" << (sel[k] ? 1 : 0)
         << "\n";
  }
  return os.str();
}

}  // namespace sevolve
