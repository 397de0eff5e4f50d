#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "fixtures.hpp"
#include "sevolve/checkpoint.hpp"
#include "sevolve/config.hpp"

using namespace sevolve;

namespace {

std::string checkpoint_text(const ModelParams& p) {
  std::ostringstream os;
  write_checkpoint(os, p);
  return os.str();
}

ModelParams parse_checkpoint(const std::string& text, CheckpointShape* shape = nullptr) {
  std::istringstream is(text);
  return read_checkpoint(is, shape);
}

}  // namespace

TEST(RunConfig, Defaults) {
  const RunConfig rc;
  EXPECT_EQ(rc.net.num_layers, 5u);
  EXPECT_EQ(rc.net.edge_loss_weight, 1.0);
  EXPECT_EQ(rc.net.max_trials, 50u);
  EXPECT_EQ(rc.net.evolution, Evolution::stochastic);
  EXPECT_EQ(rc.optim.learning_rate, 0.001);
  EXPECT_EQ(rc.optim.momentum, 0.9);
  EXPECT_EQ(rc.optim.weight_decay, 0.0005);
  EXPECT_EQ(rc.optim.epochs, 60u);
  EXPECT_EQ(rc.gen.grid, 8u);
  EXPECT_EQ(rc.gen.num_labels, 4u);
  EXPECT_EQ(rc.gen.noise, 0.5);
  EXPECT_EQ(rc.num_samples, 200u);
  EXPECT_FALSE(rc.log_wall_time);
}

TEST(RunConfig, ParsesText) {
  RunConfig rc;
  rc.apply_text(
      "# comment line\n"
      "layers = 3   # trailing comment\n"
      "\n"
      "  lr=0.01\n"
      "evolution = none\n"
      "seed = 42\n"
      "dataset = data/train.txt\r\n"
      "log_wall_time = true\n");
  EXPECT_EQ(rc.net.num_layers, 3u);
  EXPECT_EQ(rc.optim.learning_rate, 0.01);
  EXPECT_EQ(rc.net.evolution, Evolution::none);
  EXPECT_EQ(rc.optim.seed, 42u);
  EXPECT_EQ(rc.gen.seed, 42u);
  EXPECT_EQ(rc.dataset, "data/train.txt");
  EXPECT_TRUE(rc.log_wall_time);
}

TEST(RunConfig, ThresholdShortcut) {
  RunConfig rc;
  rc.set("threshold", "0.9");
  EXPECT_EQ(rc.net.evolution, Evolution::threshold);
  EXPECT_EQ(rc.net.threshold, 0.9);
  rc.set("evolution", "stochastic");
  EXPECT_EQ(rc.net.evolution, Evolution::stochastic);
}

TEST(RunConfig, EveryDocumentedKeyIsAccepted) {
  const std::map<std::string, std::string> sample_value = {
      {"evolution", "none"}, {"dataset", "a"}, {"eval_dataset", "b"}, {"out_dir", "c"},
      {"checkpoint", "d"},   {"log_wall_time", "false"}};
  for (const auto& [key, help] : RunConfig::keys()) {
    RunConfig rc;
    const auto it = sample_value.find(key);
    EXPECT_NO_THROW(rc.set(key, it == sample_value.end() ? "1" : it->second)) << key;
    EXPECT_FALSE(help.empty());
  }
}

TEST(RunConfig, Errors) {
  RunConfig rc;
  EXPECT_THROW(rc.set("nope", "1"), ConfigError);
  EXPECT_THROW(rc.set("layers", "-1"), ConfigError);
  EXPECT_THROW(rc.set("layers", "2x"), ConfigError);
  EXPECT_THROW(rc.set("lr", "fast"), ConfigError);
  EXPECT_THROW(rc.set("evolution", "random"), ConfigError);
  EXPECT_THROW(rc.set("log_wall_time", "maybe"), ConfigError);
  try {
    rc.apply_text("layers = 2\n\nbogus = 1\n", "run.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()), "run.cfg:3: config: unknown key 'bogus'");
  }
  EXPECT_THROW(rc.apply_text("layers 2\n"), ConfigError);
  EXPECT_THROW(rc.apply_file("/nonexistent/run.cfg"), IoError);
}

TEST(RunConfig, AppliesFile) {
  const auto path = (std::filesystem::temp_directory_path() / "sevolve_cfg_test.cfg").string();
  std::ofstream(path) << "epochs = 7\nthreshold = 0.5\n";
  RunConfig rc;
  rc.apply_file(path);
  EXPECT_EQ(rc.optim.epochs, 7u);
  EXPECT_EQ(rc.net.evolution, Evolution::threshold);
  std::filesystem::remove(path);
}

TEST(NetworkConfig, Validation) {
  auto cfg = fixture::small_config(1, 2, 2);
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.hidden(), 2u);
  cfg.hidden_dim = 5;
  EXPECT_EQ(cfg.hidden(), 5u);
  auto bad = cfg;
  bad.num_layers = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.num_classes = 1;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.edge_loss_weight = -1.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.evolution = Evolution::threshold;
  bad.threshold = 1.5;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Checkpoint, RoundTripBitExact) {
  auto cfg = fixture::small_config(3, 2, 3);
  cfg.hidden_dim = 4;
  Rng rng(1);
  ModelParams p = fixture::random_params(cfg, 1.0, rng);
  p.head_bias[0](0, 0) = 1e-300;
  p.head_bias[0](1, 0) = 0.1 + 0.2;
  const std::string text = checkpoint_text(p);
  CheckpointShape shape;
  const ModelParams back = parse_checkpoint(text, &shape);
  EXPECT_EQ(back, p);
  EXPECT_EQ(checkpoint_text(back), text);
  EXPECT_EQ(shape.input_dim, 2u);
  EXPECT_EQ(shape.hidden_dim, 4u);
  EXPECT_EQ(shape.num_classes, 3u);
  EXPECT_EQ(shape.num_layers, 3u);

  const auto path = (std::filesystem::temp_directory_path() / "sevolve_ckpt_test.ckpt").string();
  save_checkpoint(path, p);
  EXPECT_EQ(load_checkpoint(path), p);
  std::filesystem::remove(path);
}

TEST(Checkpoint, HeaderAndFirstTensor) {
  const auto cfg = fixture::small_config(1, 1, 2);
  ModelParams p(cfg);
  p.cell.input_gate.from_input(0, 0) = 0.5;
  const std::string text = checkpoint_text(p);
  EXPECT_EQ(text.substr(0, text.find("tensor cell.input_gate.from_self")),
            "SEVOLVE-CKPT v1 D=1 H=1 C=2 L=1\ntensor cell.input_gate.from_input 1 1\n0.5\n");
}

TEST(Checkpoint, ValidationErrors) {
  const auto cfg = fixture::small_config(2, 2, 2);
  Rng rng(2);
  const std::string text = checkpoint_text(fixture::random_params(cfg, 1.0, rng));
  auto with = [&](const std::string& from, const std::string& to) {
    std::string t = text;
    t.replace(t.find(from), from.size(), to);
    return t;
  };
  auto expect_error = [&](const std::string& t, const std::string& needle) {
    try {
      parse_checkpoint(t);
      ADD_FAILURE() << "expected IoError containing '" << needle << "'";
    } catch (const IoError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error(with("v1", "v9"), "unsupported version");
  expect_error(with("SEVOLVE-CKPT", "SOMETHING"), "not a checkpoint");
  expect_error(with("cell.forget_gate.bias", "cell.forget_gate.bogus"), "expected tensor 'cell.forget_gate.bias'");
  expect_error(with("cell.edge_gate 1 2", "cell.edge_gate 2 1"), "has shape 2x1, expected 1x2");
  expect_error(with("L=2", "L=3"), "unexpected end of file");
  expect_error(with("D=2", "D=x"), "bad header field");
  expect_error(text.substr(0, text.size() / 2), "checkpoint: line");
  EXPECT_NO_THROW(parse_checkpoint(text));
}
