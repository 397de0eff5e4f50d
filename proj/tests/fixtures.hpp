#pragma once

// Random samples and parameters shared by the tests and the acceptance binary.

#include <cstddef>
#include <vector>

#include "oracles.hpp"
#include "sevolve/network.hpp"
#include "sevolve/rng.hpp"

namespace fixture {

using namespace sevolve;

inline Sample random_sample(std::size_t n, std::size_t dim, std::size_t classes, Rng& rng,
                            double extra_edge_p = 0.3) {
  Sample s{build_graph(n, oracle::random_connected(n, extra_edge_p, rng)), {}, {}};
  for (std::size_t v = 0; v < n; ++v) {
    Vec f(dim);
    for (double& x : f) x = rng.uniform(-1.0, 1.0);
    s.features.push_back(f);
    s.labels.push_back(rng.below(classes));
  }
  return s;
}

/// Every entry uniform in [-scale, scale], biases included.
inline ModelParams random_params(const NetworkConfig& cfg, double scale, Rng& rng) {
  ModelParams p(cfg);
  p.for_each([&](const std::string&, Matrix& m) {
    for (double& x : m.flat()) x = rng.uniform(-scale, scale);
  });
  return p;
}

inline NetworkConfig small_config(std::size_t layers, std::size_t dim, std::size_t classes,
                                  Evolution evo = Evolution::stochastic) {
  NetworkConfig cfg;
  cfg.num_layers = layers;
  cfg.input_dim = dim;
  cfg.num_classes = classes;
  cfg.evolution = evo;
  return cfg;
}

}  // namespace fixture
