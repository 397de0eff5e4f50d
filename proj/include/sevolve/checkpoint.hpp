#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sevolve/errors.hpp"
#include "sevolve/network.hpp"
#include "sevolve/numfmt.hpp"

namespace sevolve {

// Text checkpoint:
//   SEVOLVE-CKPT v1 D=<d> H=<h> C=<c> L=<layers>
//   tensor <name> <rows> <cols>
//   <cols values>            (rows lines, shortest round-trip decimals)
//   ...
// Tensors appear in ModelParams::for_each order.

inline void write_checkpoint(std::ostream& os, const ModelParams& p) {
  os << "SEVOLVE-CKPT v1 D=" << p.cell.input_dim << " H=" << p.cell.hidden_dim
     << " C=" << p.num_classes() << " L=" << p.num_layers() << "\n";
  p.for_each([&](const std::string& name, const Matrix& m) {
    os << "tensor " << name << " " << m.rows() << " " << m.cols() << "\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? " " : "") << format_double(m(r, c));
      os << "\n";
    }
  });
}

struct CheckpointShape {
  std::size_t input_dim = 0, hidden_dim = 0, num_classes = 0, num_layers = 0;
};

inline ModelParams read_checkpoint(std::istream& is, CheckpointShape* shape_out = nullptr) {
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) -> void {
    throw IoError("checkpoint: line " + std::to_string(line_no) + ": " + what);
  };
  auto next = [&]() {
    if (!std::getline(is, line)) fail("unexpected end of file");
    ++line_no;
    return std::istringstream(line);
  };

  CheckpointShape shape;
  {
    auto hs = next();
    std::string magic, version, d, h, c, l;
    hs >> magic >> version >> d >> h >> c >> l;
    if (magic != "SEVOLVE-CKPT") fail("not a checkpoint file");
    if (version != "v1") fail("unsupported version '" + version + "'");
    auto field = [&](const std::string& tok, const char* key) -> std::size_t {
      const std::string k = std::string(key) + "=";
      auto v = tok.starts_with(k) ? parse_uint(std::string_view(tok).substr(k.size())) : std::nullopt;
      if (!v) fail("bad header field '" + tok + "'");
      return *v;
    };
    shape.input_dim = field(d, "D");
    shape.hidden_dim = field(h, "H");
    shape.num_classes = field(c, "C");
    shape.num_layers = field(l, "L");
  }
  NetworkConfig cfg;
  cfg.input_dim = shape.input_dim;
  cfg.hidden_dim = shape.hidden_dim;
  cfg.num_classes = shape.num_classes;
  cfg.num_layers = shape.num_layers;
  try {
    cfg.validate();
  } catch (const ValidationError& e) {
    fail(e.what());
  }
  ModelParams p(cfg);
  p.for_each([&](const std::string& name, Matrix& m) {
    auto ts = next();
    std::string tag, got_name;
    std::size_t rows = 0, cols = 0;
    if (!(ts >> tag >> got_name >> rows >> cols) || tag != "tensor") fail("expected tensor record");
    if (got_name != name) fail("expected tensor '" + name + "', found '" + got_name + "'");
    if (rows != m.rows() || cols != m.cols())
      fail("tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
           ", expected " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    for (std::size_t r = 0; r < rows; ++r) {
      auto vs = next();
      std::string tok;
      for (std::size_t c = 0; c < cols; ++c) {
        if (!(vs >> tok)) fail("tensor '" + name + "' row too short");
        auto x = parse_double(tok);
        if (!x) fail("bad number '" + tok + "'");
        m(r, c) = *x;
      }
      if (vs >> tok) fail("tensor '" + name + "' row too long");
    }
  });
  if (shape_out) *shape_out = shape;
  return p;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_checkpoint(os, p);
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline ModelParams load_checkpoint(const std::string& path, CheckpointShape* shape = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  return read_checkpoint(is, shape);
}

}  // namespace sevolve
