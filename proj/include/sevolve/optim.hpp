#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sevolve/errors.hpp"
#include "sevolve/network.hpp"
#include "sevolve/numfmt.hpp"
#include "sevolve/rng.hpp"

namespace sevolve {

struct OptimConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t epochs = 60;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ValidationError("optim: learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("optim: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ValidationError("optim: weight_decay must be >= 0");
  }
};

/// Momentum buffers, one per parameter tensor, zero at start.
struct OptimState {
  ModelParams velocity;

  OptimState() = default;
  explicit OptimState(const ModelParams& like) : velocity(like) { velocity.set_zero(); }
};

/// v <- momentum * v - lr * (g + wd * w);  w <- w + v
inline void sgd_step(ModelParams& params, const ModelParams& grads, OptimState& state,
                     const OptimConfig& cfg) {
  std::vector<Matrix*> w, v;
  std::vector<const Matrix*> g;
  params.for_each([&](const std::string&, Matrix& m) { w.push_back(&m); });
  state.velocity.for_each([&](const std::string&, Matrix& m) { v.push_back(&m); });
  std::vector<std::string> names;
  grads.for_each([&](const std::string& name, const Matrix& m) {
    g.push_back(&m);
    names.push_back(name);
  });
  if (w.size() != g.size() || w.size() != v.size())
    throw ValidationError("sgd_step: parameter, gradient and state layouts differ");
  for (std::size_t t = 0; t < w.size(); ++t) {
    if (!w[t]->same_shape(*g[t]) || !w[t]->same_shape(*v[t]))
      throw ValidationError("sgd_step: shape mismatch in tensor '" + names[t] + "'");
    const auto gs = g[t]->flat();
    for (std::size_t i = 0; i < gs.size(); ++i)
      if (!std::isfinite(gs[i]))
        throw NumericError("sgd_step: non-finite gradient in '" + names[t] + "' at flat index " +
                           std::to_string(i));
  }
  for (std::size_t t = 0; t < w.size(); ++t) {
    auto ws = w[t]->flat();
    auto vs = v[t]->flat();
    const auto gs = g[t]->flat();
    for (std::size_t i = 0; i < ws.size(); ++i) {
      vs[i] = cfg.momentum * vs[i] - cfg.learning_rate * (gs[i] + cfg.weight_decay * ws[i]);
      ws[i] += vs[i];
    }
  }
}

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;
  bool passed = true;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central differences of `loss` around `params`, compared entry by entry with
/// `analytic`.
inline GradCheckReport grad_check(const ModelParams& params, const ModelParams& analytic,
                                  const std::function<double(const ModelParams&)>& loss,
                                  double tolerance, double step = 1e-5) {
  GradCheckReport report;
  ModelParams probe = params;
  std::vector<Matrix*> probe_tensors;
  probe.for_each([&](const std::string&, Matrix& m) { probe_tensors.push_back(&m); });
  std::vector<const Matrix*> grad_tensors;
  analytic.for_each([&](const std::string&, const Matrix& m) { grad_tensors.push_back(&m); });
  std::size_t t = 0;
  params.for_each([&](const std::string& name, const Matrix&) {
    TensorCheck tc;
    tc.name = name;
    auto xs = probe_tensors[t]->flat();
    const auto gs = grad_tensors[t]->flat();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x0 = xs[i];
      xs[i] = x0 + step;
      const double up = loss(probe);
      xs[i] = x0 - step;
      const double down = loss(probe);
      xs[i] = x0;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(gs[i], numeric);
      if (i == 0 || err > tc.max_rel_error) {
        tc.max_rel_error = err;
        tc.worst_index = i;
        tc.analytic = gs[i];
        tc.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
    if (tc.max_rel_error >= tolerance) report.passed = false;
    report.tensors.push_back(std::move(tc));
    ++t;
  });
  return report;
}

/// Gradient check of the full network on one sample. The hierarchy realized by
/// a first forward pass is replayed for every probe.
inline GradCheckReport grad_check_network(const Sample& sample, const ModelParams& params,
                                          const NetworkConfig& cfg, std::uint64_t seed,
                                          double tolerance, double step = 1e-5) {
  Rng rng(seed);
  const ForwardResult base = forward(sample, params, cfg, rng, Mode::train);
  const StructureReplay replay = replay_of(base);
  const ModelParams analytic = backward(base, sample, params, cfg);
  auto loss = [&](const ModelParams& p) {
    Rng unused(0);
    return compute_loss(forward(sample, p, cfg, unused, Mode::train, &replay), sample, cfg).total;
  };
  return grad_check(params, analytic, loss, tolerance, step);
}

struct Metrics {
  double accuracy = 0.0;
  std::vector<std::optional<double>> class_iou;  // nullopt: class absent from labels and predictions
  double mean_iou = 0.0;
  std::size_t num_nodes = 0;
};

/// Node accuracy and per-class IoU = TP / (TP + FP + FN) from a confusion count.
inline Metrics compute_metrics(std::span<const std::size_t> labels,
                               std::span<const std::size_t> predictions, std::size_t num_classes) {
  if (labels.size() != predictions.size())
    throw ValidationError("metrics: label and prediction counts differ");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes || predictions[i] >= num_classes)
      throw ValidationError("metrics: class id out of range");
    if (labels[i] == predictions[i]) {
      ++correct;
      ++tp[labels[i]];
    } else {
      ++fn[labels[i]];
      ++fp[predictions[i]];
    }
  }
  Metrics m;
  m.num_nodes = labels.size();
  m.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) {
      m.class_iou.push_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(tp[c]) / static_cast<double>(denom);
    m.class_iou.push_back(iou);
    sum += iou;
    ++counted;
  }
  m.mean_iou = counted ? sum / static_cast<double>(counted) : 0.0;
  return m;
}

constexpr std::uint64_t kEvalStream = 0x6576616cULL;

/// Test-mode predictions over a dataset; sample i uses stream (seed, i).
inline Metrics evaluate(std::span<const Sample> samples, const ModelParams& params,
                        const NetworkConfig& cfg, std::uint64_t seed) {
  std::vector<std::size_t> labels, preds;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng(derive_seed(seed, kEvalStream, i));
    const auto p = predict(samples[i], params, cfg, rng);
    preds.insert(preds.end(), p.begin(), p.end());
    labels.insert(labels.end(), samples[i].labels.begin(), samples[i].labels.end());
  }
  return compute_metrics(labels, preds, cfg.num_classes);
}

struct EpochLog {
  std::size_t epoch = 0;
  double total_loss = 0.0;
  double task_loss = 0.0;
  double edge_loss = 0.0;
  double eval_accuracy = 0.0;
  double wall_seconds = 0.0;

  /// One log record. Wall time is optional because it breaks byte-identical logs.
  std::string format(bool with_wall_time) const {
    std::ostringstream os;
    os << "epoch=" << epoch << " total_loss=" << format_double(total_loss)
       << " task_loss=" << format_double(task_loss) << " edge_loss=" << format_double(edge_loss)
       << " eval_accuracy=" << format_double(eval_accuracy);
    if (with_wall_time) os << " wall_time=" << format_double(wall_seconds);
    return os.str();
  }
};

struct TrainHooks {
  std::function<void(const EpochLog&, const ModelParams&)> on_epoch;
};

/// SGD with batch size 1 over a seeded per-epoch shuffle. Sample i of epoch e
/// forwards with stream (seed, e, i). Aborts on a non-finite loss.
inline std::vector<EpochLog> train(std::span<const Sample> dataset, std::span<const Sample> eval_set,
                                   ModelParams& params, const NetworkConfig& net,
                                   const OptimConfig& opt, const TrainHooks& hooks = {}) {
  if (dataset.empty()) throw ValidationError("train: empty dataset");
  net.validate();
  opt.validate();
  OptimState state(params);
  Rng order_rng(derive_seed(opt.seed, 0x73687566ULL));
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<EpochLog> log;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(order);
    EpochLog row;
    row.epoch = epoch;
    for (std::size_t id : order) {
      Rng rng(derive_seed(opt.seed, epoch, id));
      const ForwardResult r = forward(dataset[id], params, net, rng, Mode::train);
      const LossBreakdown l = compute_loss(r, dataset[id], net);
      if (!std::isfinite(l.total))
        throw NumericError("train: non-finite loss on sample " + std::to_string(id) + " in epoch " +
                           std::to_string(epoch));
      row.total_loss += l.total;
      row.task_loss += l.task;
      row.edge_loss += l.edge;
      const ModelParams g = backward(r, dataset[id], params, net);
      sgd_step(params, g, state, opt);
    }
    const double n = static_cast<double>(dataset.size());
    row.total_loss /= n;
    row.task_loss /= n;
    row.edge_loss /= n;
    const auto eval = eval_set.empty() ? dataset : eval_set;
    row.eval_accuracy = evaluate(eval, params, net, opt.seed).accuracy;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row, params);
  }
  return log;
}

}  // namespace sevolve
