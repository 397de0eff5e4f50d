#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sevolve/data.hpp"
#include "sevolve/errors.hpp"
#include "sevolve/network.hpp"
#include "sevolve/numfmt.hpp"
#include "sevolve/optim.hpp"

namespace sevolve {

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Everything a CLI run needs. Network input_dim / num_classes are taken from
/// the dataset header, not from here.
struct RunConfig {
  GenConfig gen;
  std::size_t num_samples = 200;
  NetworkConfig net;
  OptimConfig optim;
  std::string dataset;
  std::string eval_dataset;
  std::string out_dir = ".";
  std::string checkpoint;
  std::size_t sample_index = 0;
  bool log_wall_time = false;

  /// Key, one-line description. Order is the documented order.
  static const std::vector<std::pair<std::string, std::string>>& keys() {
    static const std::vector<std::pair<std::string, std::string>> k = {
        {"grid", "grid side n of generated samples (n*n nodes)"},
        {"labels", "number of labels K"},
        {"seeds", "Voronoi seeds per sample (>= labels)"},
        {"feature_dim", "feature dimension D (>= labels; coordinates appended when >= labels+2)"},
        {"noise", "feature noise standard deviation"},
        {"samples", "number of samples to generate"},
        {"layers", "stacked LSTM layers"},
        {"hidden_dim", "hidden size H (0 = same as D)"},
        {"edge_loss_weight", "weight of the edge-probability loss"},
        {"evolution", "stochastic | threshold | none"},
        {"threshold", "merge threshold; setting it selects threshold evolution"},
        {"max_trials", "Metropolis-Hastings trials per layer"},
        {"lr", "learning rate"},
        {"momentum", "SGD momentum"},
        {"weight_decay", "L2 weight decay"},
        {"epochs", "training epochs"},
        {"seed", "random seed for every command"},
        {"dataset", "dataset file (train / eval / inspect input)"},
        {"eval_dataset", "held-out dataset used for per-epoch accuracy"},
        {"out_dir", "directory for checkpoints, logs and DOT files"},
        {"checkpoint", "checkpoint file to load"},
        {"sample_index", "sample to inspect"},
        {"log_wall_time", "append wall-clock seconds to training log rows (true/false)"},
    };
    return k;
  }

  void set(const std::string& key, const std::string& value) {
    auto as_uint = [&]() -> std::size_t {
      auto v = parse_uint(value);
      if (!v) throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + value + "'");
      return static_cast<std::size_t>(*v);
    };
    auto as_double = [&]() {
      auto v = parse_double(value);
      if (!v) throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
      return *v;
    };
    if (key == "grid") gen.grid = as_uint();
    else if (key == "labels") gen.num_labels = as_uint();
    else if (key == "seeds") gen.num_seeds = as_uint();
    else if (key == "feature_dim") gen.feature_dim = as_uint();
    else if (key == "noise") gen.noise = as_double();
    else if (key == "samples") num_samples = as_uint();
    else if (key == "layers") net.num_layers = as_uint();
    else if (key == "hidden_dim") net.hidden_dim = as_uint();
    else if (key == "edge_loss_weight") net.edge_loss_weight = as_double();
    else if (key == "evolution") {
      if (value == "stochastic") net.evolution = Evolution::stochastic;
      else if (value == "threshold") net.evolution = Evolution::threshold;
      else if (value == "none") net.evolution = Evolution::none;
      else throw ConfigError("config: evolution must be stochastic, threshold or none");
    } else if (key == "threshold") {
      net.threshold = as_double();
      net.evolution = Evolution::threshold;
    } else if (key == "max_trials") net.max_trials = as_uint();
    else if (key == "lr") optim.learning_rate = as_double();
    else if (key == "momentum") optim.momentum = as_double();
    else if (key == "weight_decay") optim.weight_decay = as_double();
    else if (key == "epochs") optim.epochs = as_uint();
    else if (key == "seed") {
      optim.seed = as_uint();
      gen.seed = optim.seed;
    } else if (key == "dataset") dataset = value;
    else if (key == "eval_dataset") eval_dataset = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "checkpoint") checkpoint = value;
    else if (key == "sample_index") sample_index = as_uint();
    else if (key == "log_wall_time") {
      if (value == "true" || value == "1") log_wall_time = true;
      else if (value == "false" || value == "0") log_wall_time = false;
      else throw ConfigError("config: log_wall_time must be true or false");
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }

  /// `key = value` lines; `#` starts a comment.
  void apply_text(std::string_view text, const std::string& source = "config") {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      std::string line(text.substr(pos, end - pos));
      pos = end + 1;
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      try {
        set(key, value);
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  void apply_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    apply_text(ss.str(), path);
  }
};

}  // namespace sevolve
