// Command-line front end: generate, train, eval, inspect.
//
// Exit codes: 0 success, 2 config/validation error, 3 I/O error,
// 4 numeric failure.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sevolve/sevolve.hpp"

namespace fs = std::filesystem;
using namespace sevolve;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::string flag_name(const std::string& key) {
  std::string s = key;
  for (char& c : s)
    if (c == '_') c = '-';
  return "--" + s;
}

/// Config file, then `--set key=value` pairs, then dedicated flags.
struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key = value config file");
    app->add_option("--set", sets, "override, as key=value (repeatable)");
    for (const auto& [key, help] : RunConfig::keys()) app->add_option(flag_name(key), flags[key], help);
  }

  RunConfig resolve(const CLI::App* app) const {
    RunConfig rc;
    if (!config_file.empty()) rc.apply_file(config_file);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      rc.set(s.substr(0, eq), s.substr(eq + 1));
    }
    // "evolution" last so an explicit mode wins over the threshold shortcut.
    for (const auto& [key, help] : RunConfig::keys())
      if (key != "evolution" && app->count(flag_name(key)) > 0) rc.set(key, flags.at(key));
    if (app->count("--evolution") > 0) rc.set("evolution", flags.at("evolution"));
    return rc;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

NetworkConfig network_for(const RunConfig& rc, std::size_t input_dim, std::size_t classes) {
  NetworkConfig net = rc.net;
  net.input_dim = input_dim;
  net.num_classes = classes;
  net.validate();
  return net;
}

/// Network config matching a loaded checkpoint; evolution settings come from the run config.
NetworkConfig network_for(const RunConfig& rc, const CheckpointShape& shape) {
  NetworkConfig net = rc.net;
  net.input_dim = shape.input_dim;
  net.hidden_dim = shape.hidden_dim;
  net.num_classes = shape.num_classes;
  net.num_layers = shape.num_layers;
  net.validate();
  return net;
}

int cmd_generate(const RunConfig& rc, const std::string& out) {
  if (out.empty()) throw ConfigError("generate: --out is required");
  rc.gen.validate();
  Dataset ds;
  ds.feature_dim = rc.gen.feature_dim;
  ds.num_labels = rc.gen.num_labels;
  ds.samples = generate_dataset(rc.gen, rc.num_samples);
  save_dataset(out, ds);
  double frac = 0.0;
  for (const Sample& s : ds.samples) frac += same_label_edge_fraction(s);
  if (!ds.samples.empty()) frac /= static_cast<double>(ds.samples.size());
  std::cout << "samples=" << ds.samples.size() << " mean_same_label_edge_fraction="
            << format_double(frac) << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc) {
  if (rc.dataset.empty()) throw ConfigError("train: dataset is required");
  const Dataset train_ds = load_dataset(rc.dataset);
  Dataset eval_ds;
  if (!rc.eval_dataset.empty()) {
    eval_ds = load_dataset(rc.eval_dataset);
    if (eval_ds.feature_dim != train_ds.feature_dim || eval_ds.num_labels != train_ds.num_labels)
      throw ValidationError("train: eval dataset dimensions differ from the training dataset");
  }
  const NetworkConfig net = network_for(rc, train_ds.feature_dim, train_ds.num_labels);
  rc.optim.validate();
  ensure_dir(rc.out_dir);
  const fs::path dir(rc.out_dir);

  Rng init_rng(derive_seed(rc.optim.seed, 0x696e6974ULL));
  ModelParams params = init_params(net, init_rng);
  save_checkpoint((dir / "init.ckpt").string(), params);

  std::ofstream log_file(dir / "train_log.txt", std::ios::binary);
  if (!log_file) throw IoError("cannot open training log in '" + rc.out_dir + "'");
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& row, const ModelParams& p) {
    const std::string line = row.format(rc.log_wall_time);
    log_file << line << "\n" << std::flush;
    std::cout << line << "\n" << std::flush;
    std::ostringstream name;
    name << "checkpoint_epoch_" << std::setw(3) << std::setfill('0') << row.epoch << ".ckpt";
    save_checkpoint((dir / name.str()).string(), p);
  };
  const auto log = train(train_ds.samples, eval_ds.samples, params, net, rc.optim, hooks);
  save_checkpoint((dir / "model.ckpt").string(), params);
  std::cout << "final_eval_accuracy=" << format_double(log.empty() ? 0.0 : log.back().eval_accuracy)
            << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  if (rc.checkpoint.empty() || rc.dataset.empty())
    throw ConfigError("eval: checkpoint and dataset are required");
  CheckpointShape shape;
  const ModelParams params = load_checkpoint(rc.checkpoint, &shape);
  const Dataset ds = load_dataset(rc.dataset);
  if (ds.feature_dim != shape.input_dim || ds.num_labels != shape.num_classes)
    throw ValidationError("eval: checkpoint expects D=" + std::to_string(shape.input_dim) +
                          " C=" + std::to_string(shape.num_classes) + ", dataset has D=" +
                          std::to_string(ds.feature_dim) + " K=" + std::to_string(ds.num_labels));
  const NetworkConfig net = network_for(rc, shape);
  const Metrics m = evaluate(ds.samples, params, net, rc.optim.seed);

  std::cout << "accuracy=" << format_double(m.accuracy) << " mean_iou=" << format_double(m.mean_iou);
  for (std::size_t c = 0; c < m.class_iou.size(); ++c)
    std::cout << " iou_" << c << "=" << (m.class_iou[c] ? format_double(*m.class_iou[c]) : "na");
  std::cout << " nodes=" << m.num_nodes << "\n";

  std::cerr << "class  IoU\n";
  for (std::size_t c = 0; c < m.class_iou.size(); ++c) {
    std::cerr << std::setw(5) << c << "  ";
    if (m.class_iou[c]) std::cerr << std::fixed << std::setprecision(4) << *m.class_iou[c] << "\n";
    else std::cerr << "  n/a\n";
  }
  std::cerr << "mean IoU  " << std::fixed << std::setprecision(4) << m.mean_iou << "\n"
            << "accuracy  " << m.accuracy << "\n";
  return 0;
}

int cmd_inspect(const RunConfig& rc) {
  if (rc.checkpoint.empty() || rc.dataset.empty())
    throw ConfigError("inspect: checkpoint and dataset are required");
  CheckpointShape shape;
  const ModelParams params = load_checkpoint(rc.checkpoint, &shape);
  const Dataset ds = load_dataset(rc.dataset);
  if (rc.sample_index >= ds.samples.size())
    throw ValidationError("inspect: sample_index " + std::to_string(rc.sample_index) +
                          " out of range (dataset has " + std::to_string(ds.samples.size()) + ")");
  if (ds.feature_dim != shape.input_dim)
    throw ValidationError("inspect: checkpoint and dataset feature dimensions differ");
  const NetworkConfig net = network_for(rc, shape);
  Rng rng(derive_seed(rc.optim.seed, kEvalStream, rc.sample_index));
  const ForwardResult r = forward(ds.samples[rc.sample_index], params, net, rng, Mode::test);

  ensure_dir(rc.out_dir);
  const fs::path dir(rc.out_dir);
  for (std::size_t t = 0; t < r.trace.num_levels(); ++t)
    write_text(dir / ("level_" + std::to_string(t) + ".dot"),
               to_dot(r.trace.levels[t], "level" + std::to_string(t), r.trace.edge_probs[t]));
  write_text(dir / "hierarchy.dot", to_dot(r.trace));
  write_text(dir / "trace.txt", format_trace(r.trace));

  std::cout << "level_sizes=";
  for (std::size_t t = 0; t < r.trace.num_levels(); ++t)
    std::cout << (t ? " " : "") << r.trace.levels[t].num_nodes();
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structure-evolving graph LSTM: data generation, training, evaluation, inspection"};
  app.require_subcommand(1);

  ConfigOptions gen_opts, train_opts, eval_opts, inspect_opts;
  std::string out_path;
  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  gen_opts.attach(gen);
  gen->add_option("--out", out_path, "dataset file to write");
  auto* tr = app.add_subcommand("train", "train a model; writes checkpoints and a log to out_dir");
  train_opts.attach(tr);
  auto* ev = app.add_subcommand("eval", "accuracy and IoU of a checkpoint on a dataset");
  eval_opts.attach(ev);
  auto* in = app.add_subcommand("inspect", "dump one sample's evolved hierarchy as DOT and a trace");
  inspect_opts.attach(in);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(gen_opts.resolve(gen), out_path);
    if (*tr) return cmd_train(train_opts.resolve(tr));
    if (*ev) return cmd_eval(eval_opts.resolve(ev));
    if (*in) return cmd_inspect(inspect_opts.resolve(in));
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitConfig;
}
