#include "rmsa/bounds.hpp"

#include <algorithm>
#include <deque>
#include <queue>
#include <set>
#include <sstream>

namespace rmsa {

namespace {

std::vector<int> widths_for(const Network& net, const EnvConfig& cfg, const Request& r) {
  const auto& paths = net.paths.paths(r.source, r.destination);
  std::vector<int> w(paths.size(), -1);
  for (std::size_t k = 0; k < paths.size(); ++k) {
    if (!paths[k].modulation) continue;
    w[k] = required_fsus(r.bitrate_gbps, net.modulations.formats[*paths[k].modulation], net.modulations.slot_width_ghz,
                         cfg.guardband_fsu);
  }
  return w;
}

void record(Metrics& m, const Request& r, bool accepted) {
  ++m.offered;
  m.offered_gbps += r.bitrate_gbps;
  if (accepted) {
    ++m.accepted;
  } else {
    ++m.blocked;
    m.blocked_gbps += r.bitrate_gbps;
  }
}

int limit_of(const Network& net, int k_limit) { return k_limit < 0 ? net.k() : std::min(k_limit, net.k()); }

}  // namespace

std::string CutSet::describe(const Topology& t) const {
  std::ostringstream os;
  os << "{";
  bool first = true;
  for (std::size_t v = 0; v < side.size(); ++v) {
    if (!side[v]) continue;
    os << (first ? "" : ",") << t.node_names()[v];
    first = false;
  }
  os << "} edges=" << crossing_edges.size() << " capacity=" << capacity << " congestion=" << congestion;
  return os.str();
}

CutSet make_cut(const Topology& t, std::vector<char> side) {
  if (static_cast<int>(side.size()) != t.num_nodes()) throw Error("make_cut: side vector has wrong size");
  if (side[0]) {
    for (auto& s : side) s = static_cast<char>(!s);
  }
  const auto inside = std::count(side.begin(), side.end(), 1);
  if (inside == 0 || inside == static_cast<long>(side.size())) throw Error("make_cut: both sides must be non-empty");
  CutSet c;
  c.side = std::move(side);
  for (int e = 0; e < t.num_edges(); ++e) {
    if (c.separates(t.edge(e).u, t.edge(e).v)) c.crossing_edges.push_back(e);
  }
  return c;
}

Eigen::MatrixXd pair_fsu_demand(const Network& net, const EnvConfig& cfg) {
  const int n = net.topology.num_nodes();
  Eigen::MatrixXd p = cfg.traffic_matrix.size() ? cfg.traffic_matrix : Eigen::MatrixXd::Ones(n, n);
  if (cfg.traffic_matrix.size() == 0) p.diagonal().setZero();
  p /= p.sum();
  double total_weight = 0.0;
  for (const auto& b : cfg.bitrates) total_weight += b.weight;
  Eigen::MatrixXd demand = Eigen::MatrixXd::Zero(n, n);
  for (int s = 0; s < n; ++s) {
    for (int d = 0; d < n; ++d) {
      if (s == d || p(s, d) == 0.0) continue;
      double expected = 0.0;
      bool usable = true;
      for (const auto& b : cfg.bitrates) {
        Request r;
        r.source = s;
        r.destination = d;
        r.bitrate_gbps = b.gbps;
        int best = -1;
        for (int w : widths_for(net, cfg, r)) {
          if (w > 0 && (best < 0 || w < best)) best = w;
        }
        if (best < 0) usable = false;
        expected += b.weight / total_weight * best;
      }
      if (usable) demand(s, d) = cfg.load_erlang * p(s, d) * expected;
    }
  }
  return demand;
}

void score_cut(CutSet& cut, const Eigen::MatrixXd& demand) {
  const int n = static_cast<int>(cut.side.size());
  double load = 0.0;
  for (int s = 0; s < n; ++s) {
    for (int d = 0; d < n; ++d) {
      if (cut.separates(s, d)) load += demand(s, d);
    }
  }
  cut.crossing_load = load;
  cut.congestion = cut.capacity > 0 ? load / cut.capacity : 0.0;
}

MinCut min_cut(const Topology& t, int source, int target) {
  // Unit capacities; flow[e] > 0 means u -> v.
  const int n = t.num_nodes();
  std::vector<int> flow(static_cast<std::size_t>(t.num_edges()), 0);
  auto residual = [&](int e, int from) {
    const int f = flow[static_cast<std::size_t>(e)];
    return t.edge(e).u == from ? 1 - f : 1 + f;
  };
  MinCut out;
  for (;;) {
    std::vector<int> via_edge(static_cast<std::size_t>(n), -1);
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::deque<int> queue{source};
    seen[static_cast<std::size_t>(source)] = 1;
    while (!queue.empty() && !seen[static_cast<std::size_t>(target)]) {
      const int u = queue.front();
      queue.pop_front();
      for (const auto& nb : t.neighbors(u)) {
        if (seen[static_cast<std::size_t>(nb.node)] || residual(nb.edge, u) <= 0) continue;
        seen[static_cast<std::size_t>(nb.node)] = 1;
        via_edge[static_cast<std::size_t>(nb.node)] = nb.edge;
        queue.push_back(nb.node);
      }
    }
    if (!seen[static_cast<std::size_t>(target)]) {
      out.source_side = std::move(seen);
      return out;
    }
    for (int v = target; v != source;) {
      const int e = via_edge[static_cast<std::size_t>(v)];
      const Edge& ed = t.edge(e);
      const int u = ed.u == v ? ed.v : ed.u;
      flow[static_cast<std::size_t>(e)] += ed.u == u ? 1 : -1;
      v = u;
    }
    ++out.value;
  }
}

std::vector<CutSet> enumerate_cutsets(const Network& net, const EnvConfig& cfg, int max_cuts) {
  const Topology& t = net.topology;
  const int n = t.num_nodes();
  const Eigen::MatrixXd demand = pair_fsu_demand(net, cfg);
  std::set<std::vector<char>> keys;
  std::vector<CutSet> cuts;
  auto add = [&](std::vector<char> side) {
    const auto inside = std::count(side.begin(), side.end(), 1);
    if (inside == 0 || inside == n) return;
    if (side[0]) {
      for (auto& s : side) s = static_cast<char>(!s);
    }
    if (!keys.insert(side).second) return;
    CutSet c = make_cut(t, std::move(side));
    c.capacity = cfg.num_fsu * static_cast<int>(c.crossing_edges.size());
    score_cut(c, demand);
    cuts.push_back(std::move(c));
  };
  for (int v = 0; v < n; ++v) {
    std::vector<char> side(static_cast<std::size_t>(n), 0);
    side[static_cast<std::size_t>(v)] = 1;
    add(std::move(side));
  }
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      std::vector<char> side(static_cast<std::size_t>(n), 0);
      side[static_cast<std::size_t>(a)] = side[static_cast<std::size_t>(b)] = 1;
      add(std::move(side));
    }
  }
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) add(min_cut(t, a, b).source_side);
  }
  std::sort(cuts.begin(), cuts.end(), [](const CutSet& x, const CutSet& y) {
    if (x.congestion != y.congestion) return x.congestion > y.congestion;
    return x.side < y.side;
  });
  if (max_cuts >= 0 && static_cast<int>(cuts.size()) > max_cuts) cuts.resize(static_cast<std::size_t>(max_cuts));
  return cuts;
}

Metrics cutset_bound_episode(std::span<const CutSet> cuts, std::shared_ptr<const Network> net, const EnvConfig& cfg,
                             std::uint64_t seed) {
  cfg.validate(*net);
  RequestStream stream(*net, cfg, seed);
  std::vector<int> used(cuts.size(), 0);
  struct Held {
    double expiry;
    int width;
    std::vector<int> cut_ids;
  };
  auto later = [](const Held& a, const Held& b) { return a.expiry > b.expiry; };
  std::priority_queue<Held, std::vector<Held>, decltype(later)> held(later);
  Metrics m;
  std::vector<int> crossing;
  for (std::int64_t i = 0; i < cfg.total_requests(); ++i) {
    const Request r = stream.next();
    while (!held.empty() && held.top().expiry <= r.arrival_time) {
      for (int c : held.top().cut_ids) used[static_cast<std::size_t>(c)] -= held.top().width;
      held.pop();
    }
    int width = -1;
    for (int w : widths_for(*net, cfg, r)) {
      if (w > 0 && (width < 0 || w < width)) width = w;
    }
    bool ok = width > 0;
    crossing.clear();
    for (std::size_t c = 0; ok && c < cuts.size(); ++c) {
      if (!cuts[c].separates(r.source, r.destination)) continue;
      if (used[c] + width > cuts[c].capacity) ok = false;
      crossing.push_back(static_cast<int>(c));
    }
    if (ok) {
      for (int c : crossing) used[static_cast<std::size_t>(c)] += width;
      held.push({r.arrival_time + r.holding_time, width, crossing});
    }
    if (i >= cfg.warmup_requests) record(m, r, ok);
  }
  return m;
}

bool DefragState::consistent(const Network& net) const {
  SpectrumGrid rebuilt(grid.num_edges(), grid.num_fsu());
  for (const auto& c : active) {
    const auto& path = net.paths.paths(c.request.source, c.request.destination)[static_cast<std::size_t>(c.placement.path_index)];
    if (!rebuilt.block_free(path.edges, c.placement.start_fsu, c.width)) return false;
    rebuilt.allocate(path.edges, c.placement.start_fsu, c.width, c.request.id, c.expiry);
  }
  return rebuilt == grid;
}

void defrag_release(DefragState& state, const Network& net, double t) {
  std::erase_if(state.active, [&](const DefragConnection& c) {
    if (c.expiry > t) return false;
    const auto& path = net.paths.paths(c.request.source, c.request.destination)[static_cast<std::size_t>(c.placement.path_index)];
    state.grid.release(path.edges, c.placement.start_fsu, c.width);
    return true;
  });
}

namespace {

std::optional<DefragConnection> place(SpectrumGrid& grid, const Network& net, const EnvConfig& cfg, const Request& r,
                                      int k_limit) {
  const auto& paths = net.paths.paths(r.source, r.destination);
  const auto widths = widths_for(net, cfg, r);
  const auto p = ksp_ff_place(grid, paths, widths, k_limit);
  if (!p) return std::nullopt;
  DefragConnection c{r, *p, widths[static_cast<std::size_t>(p->path_index)], r.arrival_time + r.holding_time};
  grid.allocate(paths[static_cast<std::size_t>(p->path_index)].edges, p->start_fsu, c.width, r.id, c.expiry);
  return c;
}

// Width on the first usable candidate; the ordering key for repacking.
int sort_width(const Network& net, const EnvConfig& cfg, const Request& r) {
  for (int w : widths_for(net, cfg, r)) {
    if (w > 0) return w;
  }
  return 0;
}

}  // namespace

DefragOutcome defrag_reallocate(DefragState& state, const Network& net, const EnvConfig& cfg, const Request& request,
                                int k_limit) {
  const int limit = limit_of(net, k_limit);
  DefragOutcome out;
  struct Item {
    Request request;
    int width;
    bool is_new;
  };
  std::vector<Item> items;
  items.reserve(state.active.size() + 1);
  for (const auto& c : state.active) items.push_back({c.request, sort_width(net, cfg, c.request), false});
  items.push_back({request, sort_width(net, cfg, request), true});
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.width != b.width) return a.width > b.width;
    if (a.request.arrival_time != b.request.arrival_time) return a.request.arrival_time < b.request.arrival_time;
    return a.request.id < b.request.id;
  });

  SpectrumGrid packed(state.grid.num_edges(), state.grid.num_fsu());
  std::vector<DefragConnection> placed;
  placed.reserve(items.size());
  bool ok = true;
  for (const auto& it : items) {
    auto c = place(packed, net, cfg, it.request, limit);
    if (!c) {
      if (!it.is_new) out.rolled_back = true;
      ok = false;
      break;
    }
    if (it.is_new) out.placement = c->placement;
    placed.push_back(std::move(*c));
  }
  if (ok) {
    state.grid = std::move(packed);
    state.active = std::move(placed);
    out.accepted = true;
    out.repacked = true;
    return out;
  }
  // The old state is untouched; fall back to plain KSP-FF in it.
  if (auto c = place(state.grid, net, cfg, request, limit)) {
    out.accepted = true;
    out.placement = c->placement;
    state.active.push_back(std::move(*c));
  }
  return out;
}

Metrics defrag_bound_episode(std::shared_ptr<const Network> net, const EnvConfig& cfg, std::uint64_t seed,
                             int k_limit) {
  cfg.validate(*net);
  RequestStream stream(*net, cfg, seed);
  DefragState state{SpectrumGrid(net->topology.num_edges(), cfg.num_fsu), {}};
  Metrics m;
  for (std::int64_t i = 0; i < cfg.total_requests(); ++i) {
    const Request r = stream.next();
    defrag_release(state, *net, r.arrival_time);
    const auto outcome = defrag_reallocate(state, *net, cfg, r, k_limit);
    if (i < cfg.warmup_requests) continue;
    record(m, r, outcome.accepted);
    if (outcome.accepted) {
      const auto& p = net->paths.paths(r.source, r.destination)[static_cast<std::size_t>(outcome.placement.path_index)];
      m.path_km.push_back(p.length_km);
      m.path_hops.push_back(p.hops);
      if (outcome.placement.path_index == 0) ++m.shortest_path_used;
    }
  }
  return m;
}

}  // namespace rmsa
