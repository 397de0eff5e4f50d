#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sevolve/errors.hpp"
#include "sevolve/graph.hpp"
#include "sevolve/network.hpp"
#include "sevolve/numfmt.hpp"
#include "sevolve/rng.hpp"

namespace sevolve {

/// Synthetic "superpixel world": an n x n 4-connected grid whose labels are
/// nearest-seed regions and whose features are noisy label prototypes.
struct GenConfig {
  std::size_t grid = 8;
  std::size_t num_labels = 4;
  std::size_t num_seeds = 4;
  std::size_t feature_dim = 6;
  double noise = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (grid < 2) throw ValidationError("generator: grid side must be >= 2");
    if (num_labels < 2) throw ValidationError("generator: need at least 2 labels");
    if (num_seeds < num_labels)
      throw ValidationError("generator: num_seeds must be >= num_labels");
    if (num_seeds > grid * grid)
      throw ValidationError("generator: more seeds than grid cells");
    if (feature_dim < num_labels)
      throw ValidationError("generator: feature_dim " + std::to_string(feature_dim) +
                            " cannot hold " + std::to_string(num_labels) + " label prototypes");
    if (!(noise >= 0.0)) throw ValidationError("generator: noise must be >= 0");
  }
};

/// Node id of cell (x, y) is y * n + x.
inline LevelGraph grid_graph(std::size_t n) {
  std::vector<Edge> edges;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const NodeId v = y * n + x;
      if (x + 1 < n) edges.push_back({v, v + 1});
      if (y + 1 < n) edges.push_back({v, v + n});
    }
  return build_graph(n * n, edges);
}

/// Index of the nearest seed per cell under grid (Manhattan) distance, ties to
/// the smaller seed index. Each seed's region is 4-connected.
inline std::vector<std::size_t> nearest_seed(std::size_t n, std::span<const NodeId> seeds) {
  std::vector<std::size_t> owner(n * n, 0);
  for (std::size_t v = 0; v < n * n; ++v) {
    const auto x = static_cast<long long>(v % n), y = static_cast<long long>(v / n);
    long long best = -1;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto sx = static_cast<long long>(seeds[s] % n), sy = static_cast<long long>(seeds[s] / n);
      const long long d = std::llabs(x - sx) + std::llabs(y - sy);
      if (best < 0 || d < best) {
        best = d;
        owner[v] = s;
      }
    }
  }
  return owner;
}

inline Sample generate_sample(const GenConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t n = cfg.grid;
  const std::size_t K = cfg.num_labels;
  const std::size_t D = cfg.feature_dim;

  auto cells = rng.permutation(n * n);
  std::vector<NodeId> seeds(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(cfg.num_seeds));
  std::vector<std::size_t> seed_label = rng.permutation(K);
  for (std::size_t s = K; s < cfg.num_seeds; ++s) seed_label.push_back(rng.below(K));

  Sample out;
  out.graph = grid_graph(n);
  const auto owner = nearest_seed(n, seeds);
  out.labels.resize(n * n);
  for (std::size_t v = 0; v < n * n; ++v) out.labels[v] = seed_label[owner[v]];

  const bool coords = D >= K + 2;
  const double span = static_cast<double>(n - 1);
  out.features.assign(n * n, Vec(D, 0.0));
  for (std::size_t v = 0; v < n * n; ++v) {
    Vec& f = out.features[v];
    f[out.labels[v]] = 1.0;
    for (std::size_t d = 0; d < D; ++d) {
      if (coords && (d == K || d == K + 1)) continue;
      f[d] += rng.normal(0.0, cfg.noise);
    }
    if (coords) {
      f[K] = static_cast<double>(v % n) / span;
      f[K + 1] = static_cast<double>(v / n) / span;
    }
  }
  return out;
}

/// Sample i draws from its own stream derived from (seed, i).
inline std::vector<Sample> generate_dataset(const GenConfig& cfg, std::size_t count) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(cfg.seed, 0x64617461ULL, i));
    out.push_back(generate_sample(cfg, rng));
  }
  return out;
}

/// Share of edges whose endpoints carry the same label.
inline double same_label_edge_fraction(const Sample& s) {
  if (s.graph.num_edges() == 0) return 1.0;
  const Vec t = s.merge_targets();
  double same = 0.0;
  for (double x : t) same += x;
  return same / static_cast<double>(t.size());
}

struct Dataset {
  std::size_t feature_dim = 0;
  std::size_t num_labels = 0;
  std::vector<Sample> samples;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os << "SEVOLVE-DS v1 D=" << ds.feature_dim << " K=" << ds.num_labels << "\n";
  os << "samples " << ds.samples.size() << "\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    os << "sample " << i << "\n";
    os << "nodes " << s.graph.num_nodes() << "\n";
    os << "edges " << s.graph.num_edges() << "\n";
    for (const Edge& e : s.graph.edges()) os << e.a << " " << e.b << "\n";
    os << "features\n";
    for (const Vec& f : s.features) {
      for (std::size_t d = 0; d < f.size(); ++d) os << (d ? " " : "") << format_double(f[d]);
      os << "\n";
    }
    os << "labels";
    for (std::size_t l : s.labels) os << " " << l;
    os << "\n";
  }
}

namespace detail {

class LineReader {
 public:
  explicit LineReader(std::istream& is) : is_(is) {}

  std::string next(const std::string& record) {
    std::string line;
    if (!std::getline(is_, line))
      throw IoError("dataset: unexpected end of file in " + record + " (after line " +
                    std::to_string(line_no_) + ")");
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  }

  [[noreturn]] void fail(const std::string& record, const std::string& what) const {
    throw IoError("dataset: line " + std::to_string(line_no_) + " (" + record + "): " + what);
  }

  std::vector<std::string_view> fields(const std::string& line) const {
    std::vector<std::string_view> out;
    std::string_view s(line);
    std::size_t i = 0;
    while (i < s.size()) {
      while (i < s.size() && s[i] == ' ') ++i;
      std::size_t j = i;
      while (j < s.size() && s[j] != ' ') ++j;
      if (j > i) out.push_back(s.substr(i, j - i));
      i = j;
    }
    return out;
  }

  std::uint64_t keyed_uint(const std::string& record, std::string_view key) {
    const std::string line = next(record);
    const auto f = fields(line);
    if (f.size() != 2 || f[0] != key) fail(record, "expected '" + std::string(key) + " <count>'");
    auto v = parse_uint(f[1]);
    if (!v) fail(record, "bad integer '" + std::string(f[1]) + "'");
    return *v;
  }

 private:
  std::istream& is_;
  std::size_t line_no_ = 0;
};

}  // namespace detail

inline Dataset read_dataset(std::istream& is) {
  detail::LineReader in(is);
  Dataset ds;
  {
    const std::string header = in.next("header");
    const auto f = in.fields(header);
    if (f.size() != 4 || f[0] != "SEVOLVE-DS") in.fail("header", "not a dataset file");
    if (f[1] != "v1") in.fail("header", "unsupported version '" + std::string(f[1]) + "'");
    if (!f[2].starts_with("D=") || !f[3].starts_with("K=")) in.fail("header", "expected D= K=");
    auto d = parse_uint(f[2].substr(2));
    auto k = parse_uint(f[3].substr(2));
    if (!d || !k) in.fail("header", "bad D or K");
    ds.feature_dim = *d;
    ds.num_labels = *k;
  }
  const std::size_t count = in.keyed_uint("header", "samples");
  for (std::size_t i = 0; i < count; ++i) {
    const std::string rec = "sample " + std::to_string(i);
    if (in.keyed_uint(rec, "sample") != i) in.fail(rec, "sample index out of sequence");
    const std::size_t nodes = in.keyed_uint(rec, "nodes");
    const std::size_t m = in.keyed_uint(rec, "edges");
    std::vector<Edge> edges;
    for (std::size_t k = 0; k < m; ++k) {
      const std::string line = in.next(rec);
      const auto f = in.fields(line);
      auto a = f.size() == 2 ? parse_uint(f[0]) : std::nullopt;
      auto b = f.size() == 2 ? parse_uint(f[1]) : std::nullopt;
      if (!a || !b) in.fail(rec, "malformed edge");
      edges.push_back({*a, *b});
    }
    Sample s;
    try {
      s.graph = build_graph(nodes, edges);
    } catch (const ValidationError& e) {
      in.fail(rec, e.what());
    }
    if (in.next(rec) != "features") in.fail(rec, "expected 'features'");
    for (std::size_t v = 0; v < nodes; ++v) {
      const std::string line = in.next(rec);
      const auto f = in.fields(line);
      if (f.size() != ds.feature_dim) in.fail(rec, "feature row has wrong dimension");
      Vec row;
      for (auto t : f) {
        auto x = parse_double(t);
        if (!x) in.fail(rec, "bad number '" + std::string(t) + "'");
        row.push_back(*x);
      }
      s.features.push_back(std::move(row));
    }
    const std::string line = in.next(rec);
    const auto f = in.fields(line);
    if (f.empty() || f[0] != "labels" || f.size() != nodes + 1) in.fail(rec, "malformed label row");
    for (std::size_t v = 0; v < nodes; ++v) {
      auto l = parse_uint(f[v + 1]);
      if (!l || *l >= ds.num_labels) in.fail(rec, "bad label '" + std::string(f[v + 1]) + "'");
      s.labels.push_back(*l);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_dataset(os, ds);
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  return read_dataset(is);
}

}  // namespace sevolve
