#pragma once

#include "rmsa/common.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace rmsa {

struct Edge {
  int u = 0;
  int v = 0;
  double length_km = 0.0;
};

/// Undirected physical network. Each undirected edge e expands into two
/// directed links: 2e (u -> v) and 2e + 1 (v -> u).
class Topology {
 public:
  Topology() = default;
  /// Validates connectivity, lengths, self-loops and duplicates.
  Topology(std::string name, std::vector<std::string> node_names, std::vector<Edge> edges);

  const std::string& name() const { return name_; }
  int num_nodes() const { return static_cast<int>(node_names_.size()); }
  int num_edges() const { return static_cast<int>(edges_.size()); }
  int num_directed_links() const { return 2 * num_edges(); }
  const std::vector<Edge>& edges() const { return edges_; }
  const Edge& edge(int e) const { return edges_[static_cast<std::size_t>(e)]; }
  const std::vector<std::string>& node_names() const { return node_names_; }
  int node_index(std::string_view name) const;

  struct Neighbor {
    int node;
    int edge;
  };
  const std::vector<Neighbor>& neighbors(int node) const { return adjacency_[static_cast<std::size_t>(node)]; }

  /// Directed link id for traversing edge e starting at node `from`.
  int directed_link(int e, int from) const { return 2 * e + (edge(e).u == from ? 0 : 1); }
  std::optional<int> edge_between(int a, int b) const;

 private:
  std::string name_;
  std::vector<std::string> node_names_;
  std::vector<Edge> edges_;
  std::vector<std::vector<Neighbor>> adjacency_;
};

/// Parses a topology document. Accepts the native schema
/// {"name", "nodes": [str], "edges": [{"u", "v", "length_km"}]} and
/// node-link style files ({"nodes": [{"id"}], "edges"/"links": [{"source",
/// "target", "dist"|"length"|"length_km"}]}) such as TopologyBench exports.
Topology parse_topology(std::string_view text);
Topology load_topology(const std::filesystem::path& path);

struct TopologyStats {
  int nodes = 0;
  int directed_links = 0;
  /// Undirected edges per node, as usually tabulated for reference topologies.
  double avg_degree = 0.0;
  double avg_sp_hops = 0.0;
  double avg_sp_km = 0.0;
};

TopologyStats topology_stats(const Topology& t);

/// Edge-adjacency graph: one vertex per undirected edge of the source topology.
struct LineGraph {
  int num_vertices = 0;
  std::vector<std::pair<int, int>> edges;  // (a, b) with a < b
  Eigen::MatrixXd adjacency;

  Eigen::MatrixXd laplacian() const;
};

LineGraph build_line_graph(const Topology& t);

/// Combinatorial Laplacian D - A of the topology's node graph.
Eigen::MatrixXd node_laplacian(const Topology& t);

struct SpectralBasis {
  Eigen::VectorXd eigenvalues;   // ascending
  Eigen::MatrixXd eigenvectors;  // columns, orthonormal
  int k_spectral = 0;
};

/// k smallest eigenpairs of a symmetric Laplacian with a deterministic basis:
/// degenerate eigenspaces are re-orthonormalized from a fixed seed and each
/// vector's first nonzero component is made positive.
SpectralBasis spectral_basis(const Eigen::MatrixXd& laplacian, int k_spectral);
SpectralBasis spectral_basis(const LineGraph& lg, int k_spectral);

struct Modulation {
  std::string name;
  int bits_per_symbol = 1;
  double max_reach_km = 0.0;
};

struct ModulationTable {
  std::vector<Modulation> formats;  // ascending bits_per_symbol
  double slot_width_ghz = 12.5;

  static ModulationTable standard();
  void validate() const;
};

/// Index into `mt.formats` of the highest-order format reaching `length_km`
/// (inclusive), or nullopt if none does.
std::optional<std::size_t> modulation_for_distance(const ModulationTable& mt, double length_km);

int required_fsus(double bitrate_gbps, const Modulation& m, double slot_width_ghz, int guardband_fsu = 0);

enum class PathSort { HopsThenKm, KmThenHops };

PathSort parse_path_sort(std::string_view s);
std::string to_string(PathSort s);

struct Path {
  std::vector<int> nodes;
  std::vector<int> edges;  // undirected edge ids, in traversal order
  std::vector<int> links;  // directed link ids
  int hops = 0;
  double length_km = 0.0;
  std::int64_t length_m = 0;  // exact integer metres, used for ordering
  std::optional<std::size_t> modulation;  // none: beyond every reach
};

class PathTable {
 public:
  PathTable() = default;
  PathTable(int num_nodes, int k, PathSort sort) : num_nodes_(num_nodes), k_(k), sort_(sort),
      paths_(static_cast<std::size_t>(num_nodes) * static_cast<std::size_t>(num_nodes)) {}

  int k() const { return k_; }
  int num_nodes() const { return num_nodes_; }
  PathSort sort() const { return sort_; }
  const std::vector<Path>& paths(int s, int d) const { return paths_[index(s, d)]; }
  std::vector<Path>& paths(int s, int d) { return paths_[index(s, d)]; }

  /// Fills each path's modulation from the table.
  void assign_modulations(const ModulationTable& mt);

 private:
  std::size_t index(int s, int d) const {
    return static_cast<std::size_t>(s) * static_cast<std::size_t>(num_nodes_) + static_cast<std::size_t>(d);
  }
  int num_nodes_ = 0;
  int k_ = 0;
  PathSort sort_ = PathSort::HopsThenKm;
  std::vector<std::vector<Path>> paths_;
};

/// Loopless K-shortest paths for one ordered pair.
std::vector<Path> yen_k_shortest_paths(const Topology& t, int source, int target, int k, PathSort sort);

/// All ordered pairs. Paths for (d, s), d > s, are the reverses of (s, d).
PathTable yen_k_shortest_paths(const Topology& t, int k, PathSort sort);

/// Total order used for candidate paths: criterion cost, then the other
/// metric, then lexicographic directed-link sequence.
bool path_less(const Path& a, const Path& b, PathSort sort);

}  // namespace rmsa
