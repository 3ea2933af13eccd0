#include "rmsa/topology.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

namespace rmsa {

std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

Topology::Topology(std::string name, std::vector<std::string> node_names, std::vector<Edge> edges)
    : name_(std::move(name)), node_names_(std::move(node_names)), edges_(std::move(edges)) {
  const int n = num_nodes();
  if (n < 2) throw Error("topology '" + name_ + "': needs at least two nodes");
  adjacency_.assign(static_cast<std::size_t>(n), {});
  std::set<std::pair<int, int>> seen;
  for (int e = 0; e < num_edges(); ++e) {
    const Edge& ed = edges_[static_cast<std::size_t>(e)];
    auto label = [&] { return node_names_[static_cast<std::size_t>(ed.u)] + "-" + node_names_[static_cast<std::size_t>(ed.v)]; };
    if (ed.u < 0 || ed.u >= n || ed.v < 0 || ed.v >= n) throw Error("topology '" + name_ + "': edge references unknown node");
    if (ed.u == ed.v) throw Error("topology '" + name_ + "': self-loop at node " + node_names_[static_cast<std::size_t>(ed.u)]);
    if (!(ed.length_km > 0.0) || !std::isfinite(ed.length_km)) {
      throw Error("topology '" + name_ + "': non-positive length on edge " + label());
    }
    if (!seen.emplace(std::min(ed.u, ed.v), std::max(ed.u, ed.v)).second) {
      throw Error("topology '" + name_ + "': duplicate edge " + label());
    }
    adjacency_[static_cast<std::size_t>(ed.u)].push_back({ed.v, e});
    adjacency_[static_cast<std::size_t>(ed.v)].push_back({ed.u, e});
  }
  std::vector<char> visited(static_cast<std::size_t>(n), 0);
  std::vector<int> stack{0};
  visited[0] = 1;
  int count = 1;
  while (!stack.empty()) {
    const int x = stack.back();
    stack.pop_back();
    for (const auto& nb : adjacency_[static_cast<std::size_t>(x)]) {
      if (!visited[static_cast<std::size_t>(nb.node)]) {
        visited[static_cast<std::size_t>(nb.node)] = 1;
        ++count;
        stack.push_back(nb.node);
      }
    }
  }
  if (count != n) {
    for (int i = 0; i < n; ++i) {
      if (!visited[static_cast<std::size_t>(i)]) {
        throw Error("topology '" + name_ + "': disconnected graph, node " + node_names_[static_cast<std::size_t>(i)] +
                    " unreachable");
      }
    }
  }
}

int Topology::node_index(std::string_view name) const {
  for (std::size_t i = 0; i < node_names_.size(); ++i) {
    if (node_names_[i] == name) return static_cast<int>(i);
  }
  throw Error("topology '" + name_ + "': unknown node " + std::string(name));
}

std::optional<int> Topology::edge_between(int a, int b) const {
  for (const auto& nb : neighbors(a)) {
    if (nb.node == b) return nb.edge;
  }
  return std::nullopt;
}

namespace {

std::string node_id_string(const nlohmann::json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number_integer()) return std::to_string(j.get<long long>());
  if (j.is_object() && j.contains("id")) return node_id_string(j.at("id"));
  throw Error("topology: node entries must be strings, integers or objects with an id");
}

double edge_length(const nlohmann::json& e) {
  for (const char* key : {"length_km", "length", "dist", "distance", "weight"}) {
    if (e.contains(key) && e.at(key).is_number()) return e.at(key).get<double>();
  }
  throw Error("topology: edge without a length");
}

}  // namespace

Topology parse_topology(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("topology: malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw Error("topology: document must be a JSON object");
  std::string name = doc.value("name", std::string("unnamed"));
  if (doc.contains("graph") && doc.at("graph").is_object() && doc.at("graph").contains("name")) {
    name = doc.at("graph").at("name").get<std::string>();
  }
  if (!doc.contains("nodes") || !doc.at("nodes").is_array()) throw Error("topology: missing node list");
  std::vector<std::string> nodes;
  std::map<std::string, int> index;
  for (const auto& n : doc.at("nodes")) {
    std::string id = node_id_string(n);
    if (!index.emplace(id, static_cast<int>(nodes.size())).second) throw Error("topology: duplicate node " + id);
    nodes.push_back(std::move(id));
  }
  const char* edge_key = doc.contains("edges") ? "edges" : "links";
  if (!doc.contains(edge_key) || !doc.at(edge_key).is_array()) throw Error("topology: missing edge list");
  std::vector<Edge> edges;
  for (const auto& e : doc.at(edge_key)) {
    const bool native = e.contains("u");
    const std::string u = node_id_string(e.at(native ? "u" : "source"));
    const std::string v = node_id_string(e.at(native ? "v" : "target"));
    auto iu = index.find(u);
    auto iv = index.find(v);
    if (iu == index.end()) throw Error("topology: edge references unknown node " + u);
    if (iv == index.end()) throw Error("topology: edge references unknown node " + v);
    edges.push_back({iu->second, iv->second, edge_length(e)});
  }
  return Topology(std::move(name), std::move(nodes), std::move(edges));
}

Topology load_topology(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("topology: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_topology(ss.str());
}

TopologyStats topology_stats(const Topology& t) {
  const int n = t.num_nodes();
  TopologyStats st;
  st.nodes = n;
  st.directed_links = t.num_directed_links();
  st.avg_degree = static_cast<double>(t.num_edges()) / n;
  double hop_sum = 0.0;
  double km_sum = 0.0;
  for (int s = 0; s < n; ++s) {
    std::vector<int> hops(static_cast<std::size_t>(n), -1);
    std::queue<int> q;
    hops[static_cast<std::size_t>(s)] = 0;
    q.push(s);
    while (!q.empty()) {
      const int x = q.front();
      q.pop();
      for (const auto& nb : t.neighbors(x)) {
        if (hops[static_cast<std::size_t>(nb.node)] < 0) {
          hops[static_cast<std::size_t>(nb.node)] = hops[static_cast<std::size_t>(x)] + 1;
          q.push(nb.node);
        }
      }
    }
    std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    using Item = std::pair<double, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[static_cast<std::size_t>(s)] = 0.0;
    pq.emplace(0.0, s);
    while (!pq.empty()) {
      auto [dx, x] = pq.top();
      pq.pop();
      if (dx > dist[static_cast<std::size_t>(x)]) continue;
      for (const auto& nb : t.neighbors(x)) {
        const double nd = dx + t.edge(nb.edge).length_km;
        if (nd < dist[static_cast<std::size_t>(nb.node)]) {
          dist[static_cast<std::size_t>(nb.node)] = nd;
          pq.emplace(nd, nb.node);
        }
      }
    }
    for (int d = s + 1; d < n; ++d) {
      hop_sum += hops[static_cast<std::size_t>(d)];
      km_sum += dist[static_cast<std::size_t>(d)];
    }
  }
  const double pairs = 0.5 * n * (n - 1);
  st.avg_sp_hops = hop_sum / pairs;
  st.avg_sp_km = km_sum / pairs;
  return st;
}

LineGraph build_line_graph(const Topology& t) {
  LineGraph lg;
  lg.num_vertices = t.num_edges();
  lg.adjacency = Eigen::MatrixXd::Zero(lg.num_vertices, lg.num_vertices);
  for (int node = 0; node < t.num_nodes(); ++node) {
    const auto& nbs = t.neighbors(node);
    for (std::size_t i = 0; i < nbs.size(); ++i) {
      for (std::size_t j = i + 1; j < nbs.size(); ++j) {
        const int a = std::min(nbs[i].edge, nbs[j].edge);
        const int b = std::max(nbs[i].edge, nbs[j].edge);
        // Two distinct edges share at most one endpoint in a simple graph.
        lg.adjacency(a, b) = 1.0;
        lg.adjacency(b, a) = 1.0;
        lg.edges.emplace_back(a, b);
      }
    }
  }
  std::sort(lg.edges.begin(), lg.edges.end());
  return lg;
}

Eigen::MatrixXd LineGraph::laplacian() const {
  Eigen::MatrixXd lap = -adjacency;
  lap.diagonal() = adjacency.rowwise().sum();
  return lap;
}

Eigen::MatrixXd node_laplacian(const Topology& t) {
  const int n = t.num_nodes();
  Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n, n);
  for (const Edge& e : t.edges()) {
    lap(e.u, e.v) -= 1.0;
    lap(e.v, e.u) -= 1.0;
    lap(e.u, e.u) += 1.0;
    lap(e.v, e.v) += 1.0;
  }
  return lap;
}

SpectralBasis spectral_basis(const Eigen::MatrixXd& laplacian, int k_spectral) {
  const int n = static_cast<int>(laplacian.rows());
  if (k_spectral < 1 || k_spectral > n) {
    throw Error("spectral_basis: k_spectral must lie in [1, " + std::to_string(n) + "]");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(laplacian);
  if (solver.info() != Eigen::Success) {
    throw Error("spectral_basis: eigensolver did not converge");
  }
  Eigen::VectorXd values = solver.eigenvalues();
  Eigen::MatrixXd vectors = solver.eigenvectors();

  // Replace each degenerate eigenspace basis by a seeded projection so the
  // result does not depend on the solver's internal choice of basis.
  const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
  const double tol = 1e-9 * scale;
  Rng rng(0x5eed5eedULL);
  for (int start = 0; start < n;) {
    int end = start + 1;
    while (end < n && values(end) - values(start) < tol) ++end;
    const int dim = end - start;
    if (dim > 1) {
      const Eigen::MatrixXd sub = vectors.middleCols(start, dim);
      Eigen::MatrixXd fresh(n, dim);
      for (int c = 0; c < dim; ++c) {
        Eigen::VectorXd r(n);
        for (int i = 0; i < n; ++i) r(i) = rng.normal();
        Eigen::VectorXd v = sub * (sub.transpose() * r);
        for (int p = 0; p < c; ++p) v -= fresh.col(p).dot(v) * fresh.col(p);
        fresh.col(c) = v.normalized();
      }
      vectors.middleCols(start, dim) = fresh;
      const double mean = values.segment(start, dim).mean();
      values.segment(start, dim).setConstant(mean);
    }
    start = end;
  }
  for (int c = 0; c < n; ++c) {
    for (int i = 0; i < n; ++i) {
      if (std::abs(vectors(i, c)) > 1e-10) {
        if (vectors(i, c) < 0) vectors.col(c) *= -1.0;
        break;
      }
    }
  }
  // Clamp the numerically-zero bottom of the spectrum.
  for (int c = 0; c < n; ++c) {
    if (std::abs(values(c)) < tol) values(c) = 0.0;
  }

  SpectralBasis basis;
  basis.k_spectral = k_spectral;
  basis.eigenvalues = values.head(k_spectral);
  basis.eigenvectors = vectors.leftCols(k_spectral);
  const double residual =
      (laplacian * basis.eigenvectors - basis.eigenvectors * basis.eigenvalues.asDiagonal()).cwiseAbs().maxCoeff();
  if (!(residual < 1e-6 * scale)) {
    throw Error("spectral_basis: eigenpair residual too large (" + std::to_string(residual) + ")");
  }
  return basis;
}

SpectralBasis spectral_basis(const LineGraph& lg, int k_spectral) { return spectral_basis(lg.laplacian(), k_spectral); }

ModulationTable ModulationTable::standard() {
  ModulationTable mt;
  mt.formats = {{"BPSK", 1, 9600.0}, {"QPSK", 2, 4800.0}, {"8QAM", 3, 2400.0}, {"16QAM", 4, 1200.0}};
  mt.slot_width_ghz = 12.5;
  return mt;
}

void ModulationTable::validate() const {
  if (formats.empty()) throw ConfigError("modulation table is empty");
  if (!(slot_width_ghz > 0.0)) throw ConfigError("slot width must be positive");
  for (std::size_t i = 0; i < formats.size(); ++i) {
    if (formats[i].bits_per_symbol < 1 || !(formats[i].max_reach_km > 0.0)) {
      throw ConfigError("modulation " + formats[i].name + ": invalid bits or reach");
    }
    if (i > 0 && (formats[i].bits_per_symbol <= formats[i - 1].bits_per_symbol ||
                  formats[i].max_reach_km >= formats[i - 1].max_reach_km)) {
      throw ConfigError("modulation table must have increasing bits and strictly decreasing reach");
    }
  }
}

std::optional<std::size_t> modulation_for_distance(const ModulationTable& mt, double length_km) {
  for (std::size_t i = mt.formats.size(); i-- > 0;) {
    if (length_km <= mt.formats[i].max_reach_km) return i;
  }
  return std::nullopt;
}

int required_fsus(double bitrate_gbps, const Modulation& m, double slot_width_ghz, int guardband_fsu) {
  const double per_slot = m.bits_per_symbol * slot_width_ghz;
  // Small relative slack so exact multiples are not bumped up by rounding.
  return static_cast<int>(std::ceil(bitrate_gbps / per_slot - 1e-9)) + guardband_fsu;
}

PathSort parse_path_sort(std::string_view s) {
  if (s == "hops") return PathSort::HopsThenKm;
  if (s == "km") return PathSort::KmThenHops;
  throw ConfigError("unknown path sort '" + std::string(s) + "' (expected hops or km)");
}

std::string to_string(PathSort s) { return s == PathSort::HopsThenKm ? "hops" : "km"; }

void PathTable::assign_modulations(const ModulationTable& mt) {
  for (auto& list : paths_) {
    for (auto& p : list) p.modulation = modulation_for_distance(mt, p.length_km);
  }
}

namespace {

struct Cost {
  std::int64_t primary = 0;
  std::int64_t secondary = 0;
  auto operator<=>(const Cost&) const = default;
  Cost operator+(const Cost& o) const { return {primary + o.primary, secondary + o.secondary}; }
};

constexpr Cost kInfinite{std::numeric_limits<std::int64_t>::max() / 4, 0};

std::int64_t edge_metres(const Topology& t, int e) { return std::llround(t.edge(e).length_km * 1000.0); }

Cost edge_cost(const Topology& t, int e, PathSort sort) {
  const std::int64_t m = edge_metres(t, e);
  return sort == PathSort::HopsThenKm ? Cost{1, m} : Cost{m, 1};
}

Cost path_cost(const Path& p, PathSort sort) {
  return sort == PathSort::HopsThenKm ? Cost{p.hops, p.length_m} : Cost{p.length_m, p.hops};
}

/// Dijkstra on the graph with blocked nodes and directed links removed.
/// Returns the lexicographically smallest (by directed link id) among the
/// minimum-cost paths, as a directed link sequence.
class RestrictedSearch {
 public:
  RestrictedSearch(const Topology& t, PathSort sort)
      : t_(t), sort_(sort), dist_(static_cast<std::size_t>(t.num_nodes())),
        blocked_node_(static_cast<std::size_t>(t.num_nodes()), 0),
        blocked_link_(static_cast<std::size_t>(t.num_directed_links()), 0) {}

  std::vector<char>& blocked_nodes() { return blocked_node_; }
  std::vector<char>& blocked_links() { return blocked_link_; }

  std::optional<std::vector<int>> run(int source, int target) {
    std::fill(dist_.begin(), dist_.end(), kInfinite);
    using Item = std::pair<Cost, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    // Distances to the target over reversed links.
    dist_[static_cast<std::size_t>(target)] = Cost{};
    pq.emplace(Cost{}, target);
    while (!pq.empty()) {
      auto [dx, x] = pq.top();
      pq.pop();
      if (dx > dist_[static_cast<std::size_t>(x)]) continue;
      for (const auto& nb : t_.neighbors(x)) {
        const int y = nb.node;
        if (blocked_node_[static_cast<std::size_t>(y)] && y != source) continue;
        if (blocked_link_[static_cast<std::size_t>(t_.directed_link(nb.edge, y))]) continue;
        const Cost nd = dx + edge_cost(t_, nb.edge, sort_);
        if (nd < dist_[static_cast<std::size_t>(y)]) {
          dist_[static_cast<std::size_t>(y)] = nd;
          pq.emplace(nd, y);
        }
      }
    }
    if (dist_[static_cast<std::size_t>(source)] == kInfinite) return std::nullopt;
    std::vector<int> links;
    int x = source;
    while (x != target) {
      int best_link = -1;
      int best_node = -1;
      for (const auto& nb : t_.neighbors(x)) {
        const int y = nb.node;
        if (blocked_node_[static_cast<std::size_t>(y)] && y != target) continue;
        const int link = t_.directed_link(nb.edge, x);
        if (blocked_link_[static_cast<std::size_t>(link)]) continue;
        if (dist_[static_cast<std::size_t>(y)] == kInfinite) continue;
        if (edge_cost(t_, nb.edge, sort_) + dist_[static_cast<std::size_t>(y)] != dist_[static_cast<std::size_t>(x)]) {
          continue;
        }
        if (best_link < 0 || link < best_link) {
          best_link = link;
          best_node = y;
        }
      }
      links.push_back(best_link);
      x = best_node;
    }
    return links;
  }

 private:
  const Topology& t_;
  PathSort sort_;
  std::vector<Cost> dist_;
  std::vector<char> blocked_node_;
  std::vector<char> blocked_link_;
};

Path make_path(const Topology& t, int source, const std::vector<int>& links) {
  Path p;
  p.nodes.push_back(source);
  p.links = links;
  int x = source;
  for (int link : links) {
    const int e = link / 2;
    const Edge& ed = t.edge(e);
    x = (link % 2 == 0) ? ed.v : ed.u;
    p.edges.push_back(e);
    p.nodes.push_back(x);
    p.length_m += edge_metres(t, e);
  }
  p.hops = static_cast<int>(links.size());
  p.length_km = static_cast<double>(p.length_m) / 1000.0;
  return p;
}

Path reverse_path(const Topology& t, const Path& p) {
  Path r;
  r.nodes.assign(p.nodes.rbegin(), p.nodes.rend());
  r.edges.assign(p.edges.rbegin(), p.edges.rend());
  for (std::size_t i = 0; i < r.edges.size(); ++i) r.links.push_back(t.directed_link(r.edges[i], r.nodes[i]));
  r.hops = p.hops;
  r.length_m = p.length_m;
  r.length_km = p.length_km;
  r.modulation = p.modulation;
  return r;
}

}  // namespace

bool path_less(const Path& a, const Path& b, PathSort sort) {
  const Cost ca = path_cost(a, sort);
  const Cost cb = path_cost(b, sort);
  if (ca != cb) return ca < cb;
  return a.links < b.links;
}

std::vector<Path> yen_k_shortest_paths(const Topology& t, int source, int target, int k, PathSort sort) {
  if (k < 1) throw Error("yen: K must be at least 1");
  std::vector<Path> result;
  if (source == target) return result;
  RestrictedSearch search(t, sort);
  auto first = search.run(source, target);
  if (!first) return result;
  result.push_back(make_path(t, source, *first));

  auto less = [sort](const Path& a, const Path& b) { return path_less(a, b, sort); };
  std::set<Path, decltype(less)> candidates(less);
  std::set<std::vector<int>> known{result.front().links};

  while (static_cast<int>(result.size()) < k) {
    const Path& last = result.back();
    for (std::size_t i = 0; i + 1 < last.nodes.size(); ++i) {
      const int spur = last.nodes[i];
      auto& bn = search.blocked_nodes();
      auto& bl = search.blocked_links();
      std::fill(bn.begin(), bn.end(), 0);
      std::fill(bl.begin(), bl.end(), 0);
      for (const Path& p : result) {
        if (p.links.size() > i && std::equal(p.links.begin(), p.links.begin() + static_cast<std::ptrdiff_t>(i), last.links.begin())) {
          bl[static_cast<std::size_t>(p.links[i])] = 1;
        }
      }
      for (std::size_t j = 0; j < i; ++j) bn[static_cast<std::size_t>(last.nodes[j])] = 1;
      bn[static_cast<std::size_t>(spur)] = 1;
      auto spur_links = search.run(spur, target);
      if (!spur_links) continue;
      std::vector<int> links(last.links.begin(), last.links.begin() + static_cast<std::ptrdiff_t>(i));
      links.insert(links.end(), spur_links->begin(), spur_links->end());
      if (known.insert(links).second) candidates.insert(make_path(t, source, links));
    }
    if (candidates.empty()) break;
    result.push_back(*candidates.begin());
    candidates.erase(candidates.begin());
  }
  return result;
}

PathTable yen_k_shortest_paths(const Topology& t, int k, PathSort sort) {
  PathTable table(t.num_nodes(), k, sort);
  for (int s = 0; s < t.num_nodes(); ++s) {
    for (int d = s + 1; d < t.num_nodes(); ++d) {
      auto forward = yen_k_shortest_paths(t, s, d, k, sort);
      auto& back = table.paths(d, s);
      back.reserve(forward.size());
      for (const auto& p : forward) back.push_back(reverse_path(t, p));
      table.paths(s, d) = std::move(forward);
    }
  }
  return table;
}

}  // namespace rmsa
