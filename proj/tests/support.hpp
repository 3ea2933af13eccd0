#pragma once

#include "rmsa/env.hpp"
#include "rmsa/topology.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace rmsa::testing {

inline std::filesystem::path data_path(const std::string& rel) { return std::filesystem::path(RMSA_DATA_DIR) / rel; }

inline Topology make_topology(int n, const std::vector<std::tuple<int, int, double>>& edges, std::string name = "t") {
  std::vector<std::string> names;
  for (int i = 0; i < n; ++i) names.push_back("n" + std::to_string(i));
  std::vector<Edge> es;
  for (auto [u, v, km] : edges) es.push_back({u, v, km});
  return Topology(std::move(name), std::move(names), std::move(es));
}

// 0 - 1 single edge.
inline Topology single_edge(double km = 100.0) { return make_topology(2, {{0, 1, km}}, "edge"); }

inline Topology ring(int n, double km = 100.0) {
  std::vector<std::tuple<int, int, double>> e;
  for (int i = 0; i < n; ++i) e.emplace_back(i, (i + 1) % n, km);
  return make_topology(n, e, "ring");
}

// Two triangles joined by one bridge edge (2-3).
inline Topology dumbbell() {
  return make_topology(6, {{0, 1, 100}, {1, 2, 100}, {0, 2, 100}, {2, 3, 100}, {3, 4, 100}, {4, 5, 100}, {3, 5, 100}},
                       "dumbbell");
}

// Random connected graph: spanning tree plus extra edges.
inline Topology random_graph(int n, int extra, Rng& rng) {
  std::vector<std::tuple<int, int, double>> e;
  std::vector<std::vector<char>> used(static_cast<std::size_t>(n), std::vector<char>(static_cast<std::size_t>(n), 0));
  auto km = [&] { return 50.0 + 10.0 * static_cast<double>(rng.below(100)); };
  for (int v = 1; v < n; ++v) {
    const int u = static_cast<int>(rng.below(static_cast<std::uint64_t>(v)));
    e.emplace_back(u, v, km());
    used[u][v] = used[v][u] = 1;
  }
  for (int tries = 0; tries < 10 * extra && extra > 0; ++tries) {
    const int u = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    const int v = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    if (u == v || used[u][v]) continue;
    e.emplace_back(u, v, km());
    used[u][v] = used[v][u] = 1;
    --extra;
  }
  return make_topology(n, e, "random");
}

}  // namespace rmsa::testing
