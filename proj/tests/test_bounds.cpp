#include "rmsa/bounds.hpp"
#include "support.hpp"

#include <doctest.h>

#include <map>
#include <set>

using namespace rmsa;
using namespace rmsa::testing;

namespace {

EnvConfig bound_config(int fsu = 10) {
  EnvConfig cfg;
  cfg.num_fsu = fsu;
  cfg.slot_aggregation = 1;
  cfg.load_erlang = 5.0;
  cfg.bitrates = {{50.0, 1.0}};
  cfg.episode_length = 20000;
  return cfg;
}

Request make_request(std::int64_t id, int s, int d, double gbps, double t) {
  Request r;
  r.id = id;
  r.source = s;
  r.destination = d;
  r.bitrate_gbps = gbps;
  r.arrival_time = t;
  r.holding_time = 100.0;
  return r;
}

DefragConnection hold(const Network& net, DefragState& st, const Request& r, int start, int width) {
  const auto& path = net.paths.paths(r.source, r.destination)[0];
  st.grid.allocate(path.edges, start, width, r.id, r.arrival_time + r.holding_time);
  DefragConnection c{r, {0, start}, width, r.arrival_time + r.holding_time};
  st.active.push_back(c);
  return c;
}

}  // namespace

TEST_SUITE("bounds") {

TEST_CASE("min cut value matches the smallest crossing bipartition") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 4 + static_cast<int>(rng.below(4));
    const auto t = random_graph(n, static_cast<int>(rng.below(6)), rng);
    for (int a = 0; a < n; ++a) {
      for (int b = a + 1; b < n; ++b) {
        int best = 1 << 20;
        for (unsigned mask = 0; mask < (1U << n); ++mask) {
          if (!((mask >> a) & 1U) || ((mask >> b) & 1U)) continue;
          int crossing = 0;
          for (const auto& e : t.edges()) crossing += ((mask >> e.u) & 1U) != ((mask >> e.v) & 1U);
          best = std::min(best, crossing);
        }
        const MinCut mc = min_cut(t, a, b);
        CHECK(mc.value == best);
        CHECK(mc.source_side[static_cast<std::size_t>(a)]);
        CHECK_FALSE(mc.source_side[static_cast<std::size_t>(b)]);
        int crossing = 0;
        for (const auto& e : t.edges()) crossing += mc.source_side[static_cast<std::size_t>(e.u)] != mc.source_side[static_cast<std::size_t>(e.v)];
        CHECK(crossing == best);
      }
    }
  }
}

TEST_CASE("five-node graphs: ranked congestion matches every bipartition") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto t = random_graph(5, static_cast<int>(rng.below(6)), rng);
    const auto net = make_network(t, 3, PathSort::HopsThenKm);
    EnvConfig cfg = bound_config(16);
    cfg.load_erlang = 10.0 + static_cast<double>(trial);
    cfg.bitrates = {{100.0, 2.0}, {400.0, 1.0}};
    const Eigen::MatrixXd demand = pair_fsu_demand(*net, cfg);

    // Brute force: every bipartition with node 0 outside S.
    std::vector<double> want;
    for (unsigned mask = 1; mask < 32; ++mask) {
      if (mask & 1U) continue;
      int crossing = 0;
      for (const auto& e : t.edges()) crossing += ((mask >> e.u) & 1U) != ((mask >> e.v) & 1U);
      double load = 0.0;
      for (int s = 0; s < 5; ++s) {
        for (int d = 0; d < 5; ++d) {
          if (((mask >> s) & 1U) != ((mask >> d) & 1U)) load += demand(s, d);
        }
      }
      want.push_back(load / (16.0 * crossing));
    }
    std::sort(want.rbegin(), want.rend());

    const auto cuts = enumerate_cutsets(*net, cfg);
    REQUIRE(cuts.size() == want.size());
    std::set<std::vector<char>> sides;
    for (std::size_t i = 0; i < cuts.size(); ++i) {
      CHECK(cuts[i].congestion == doctest::Approx(want[i]).epsilon(1e-12));
      CHECK(cuts[i].capacity == 16 * static_cast<int>(cuts[i].crossing_edges.size()));
      CHECK_FALSE(cuts[i].side[0]);
      sides.insert(cuts[i].side);
      for (int e = 0; e < t.num_edges(); ++e) {
        const bool listed = std::find(cuts[i].crossing_edges.begin(), cuts[i].crossing_edges.end(), e) !=
                            cuts[i].crossing_edges.end();
        CHECK(listed == cuts[i].separates(t.edge(e).u, t.edge(e).v));
      }
    }
    CHECK(sides.size() == cuts.size());
    CHECK(enumerate_cutsets(*net, cfg, 4).size() == 4);
  }
}

TEST_CASE("pair demand uses the narrowest usable candidate") {
  // Direct 0-2 edge is 5000 km (BPSK, 8 FSU at 100 Gbps); the detour is 200 km (16QAM, 2 FSU).
  const auto t = make_topology(3, {{0, 1, 100}, {1, 2, 100}, {0, 2, 5000}});
  const auto net = make_network(t, 2, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config();
  cfg.load_erlang = 6.0;
  cfg.bitrates = {{100.0, 1.0}};
  const auto demand = pair_fsu_demand(*net, cfg);
  CHECK(demand(0, 2) == doctest::Approx(6.0 / 6.0 * 2.0));
  CHECK(demand(0, 1) == doctest::Approx(6.0 / 6.0 * 2.0));
  CHECK(demand(1, 1) == 0.0);
}

TEST_CASE("dumbbell: the bridge is the most congested cut") {
  const auto net = make_network(dumbbell(), 3, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config(20);
  const auto cuts = enumerate_cutsets(*net, cfg);
  REQUIRE_FALSE(cuts.empty());
  const CutSet& top = cuts.front();
  REQUIRE(top.crossing_edges.size() == 1);
  CHECK(net->topology.edge(top.crossing_edges[0]).u == 2);
  CHECK(net->topology.edge(top.crossing_edges[0]).v == 3);
  CHECK(top.capacity == 20);
}

TEST_CASE("cycle: every min cut has two crossing edges") {
  const auto t = ring(7);
  for (int a = 0; a < 7; ++a) {
    for (int b = a + 1; b < 7; ++b) CHECK(min_cut(t, a, b).value == 2);
  }
}

TEST_CASE("bridge topology: cut-set bound equals an M/M/C/C counter") {
  const auto net = make_network(single_edge(), 1, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config(10);
  cfg.bitrates = {{50.0, 1.0}, {100.0, 1.0}};  // 1 or 2 FSU
  const auto cuts = enumerate_cutsets(*net, cfg);
  REQUIRE(cuts.size() == 1);
  const Metrics m = cutset_bound_episode(cuts, net, cfg, 17);

  // Counter oracle on the same stream.
  RequestStream stream(*net, cfg, 17);
  std::multimap<double, int> live;
  int used = 0;
  std::int64_t blocked = 0;
  for (int i = 0; i < cfg.episode_length; ++i) {
    const Request r = stream.next();
    while (!live.empty() && live.begin()->first <= r.arrival_time) {
      used -= live.begin()->second;
      live.erase(live.begin());
    }
    const int w = r.bitrate_gbps > 60.0 ? 2 : 1;
    if (used + w <= 10) {
      used += w;
      live.emplace(r.arrival_time + r.holding_time, w);
    } else {
      ++blocked;
    }
  }
  CHECK(m.offered == cfg.episode_length);
  CHECK(m.blocked == blocked);
  CHECK(blocked > 0);
}

TEST_CASE("no cuts means no blocking") {
  const auto net = make_network(load_topology(data_path("topologies/nsfnet.json")), 3, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config(4);
  cfg.load_erlang = 500.0;
  CHECK(cutset_bound_episode({}, net, cfg, 1).sbp() == 0.0);
}

TEST_CASE("defrag on an empty state is a plain KSP-FF accept") {
  const auto net = make_network(load_topology(data_path("topologies/nsfnet.json")), 3, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config(16);
  DefragState st{SpectrumGrid(net->topology.num_edges(), 16), {}};
  const Request r = make_request(0, 0, 9, 100.0, 0.0);
  const auto out = defrag_reallocate(st, *net, cfg, r);
  CHECK(out.accepted);
  CHECK(out.placement == Placement{0, 0});
  CHECK(st.consistent(*net));
}

TEST_CASE("repacking frees a contiguous window that fragmentation hid") {
  const auto t = make_topology(3, {{0, 1, 100}, {1, 2, 100}});
  const auto net = make_network(t, 1, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config(4);
  cfg.bitrates = {{50.0, 1.0}, {100.0, 1.0}};
  DefragState st{SpectrumGrid(2, 4), {}};
  hold(*net, st, make_request(0, 0, 1, 50.0, 0.0), 1, 1);
  hold(*net, st, make_request(1, 1, 2, 50.0, 0.1), 2, 1);
  REQUIRE(st.consistent(*net));
  const Request incoming = make_request(2, 0, 2, 100.0, 0.2);  // 2 FSU on both edges

  // Exhaustive check that no contiguous window exists for plain first fit.
  const auto& path = net->paths.paths(0, 2)[0];
  for (int s = 0; s + 2 <= 4; ++s) CHECK_FALSE(st.grid.block_free(path.edges, s, 2));
  const std::vector<int> widths{2};
  CHECK_FALSE(ksp_ff_place(st.grid, net->paths.paths(0, 2), widths).has_value());

  const auto out = defrag_reallocate(st, *net, cfg, incoming);
  CHECK(out.accepted);
  CHECK(out.repacked);
  CHECK(out.placement == Placement{0, 0});
  CHECK(st.active.size() == 3);
  CHECK(st.consistent(*net));
  CHECK(st.grid.busy(0).count() == 3);
  CHECK(st.grid.busy(1).count() == 3);
}

TEST_CASE("a connection that cannot be re-placed rolls back bit-exactly") {
  const auto t = make_topology(3, {{0, 1, 100}, {1, 2, 100}});
  const auto net = make_network(t, 1, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config(4);
  cfg.bitrates = {{50.0, 1.0}, {100.0, 1.0}};
  DefragState st{SpectrumGrid(2, 4), {}};
  hold(*net, st, make_request(0, 0, 2, 50.0, 0.0), 3, 1);   // through, top slot
  hold(*net, st, make_request(1, 0, 1, 100.0, 0.1), 0, 2);
  hold(*net, st, make_request(2, 1, 2, 100.0, 0.2), 0, 2);
  REQUIRE(st.consistent(*net));
  const auto before = st.grid.hash();
  const auto active_before = st.active.size();
  // Repacking order: the two 2-FSU holders, then the newcomer takes [2, 4) on
  // the second edge, leaving the 1-FSU through connection nowhere to go.
  const auto out = defrag_reallocate(st, *net, cfg, make_request(3, 1, 2, 100.0, 0.3));
  CHECK(out.rolled_back);
  CHECK_FALSE(out.repacked);
  CHECK_FALSE(out.accepted);
  CHECK(st.grid.hash() == before);
  CHECK(st.active.size() == active_before);
}

TEST_CASE("defrag keeps the grid consistent over an episode") {
  const auto net = make_network(load_topology(data_path("topologies/nsfnet.json")), 3, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config(20);
  cfg.load_erlang = 120.0;
  cfg.bitrates = {{100.0, 1.0}, {200.0, 1.0}};
  RequestStream stream(*net, cfg, 5);
  DefragState st{SpectrumGrid(net->topology.num_edges(), 20), {}};
  int accepted = 0;
  for (int i = 0; i < 600; ++i) {
    const Request r = stream.next();
    defrag_release(st, *net, r.arrival_time);
    accepted += defrag_reallocate(st, *net, cfg, r).accepted;
    if (i % 25 == 0) REQUIRE(st.consistent(*net));
  }
  CHECK(st.consistent(*net));
  CHECK(accepted > 0);
}

TEST_CASE("both bounds sit at or below KSP-FF on NSFNET") {
  const auto net = make_network(load_topology(data_path("topologies/nsfnet.json")), 5, PathSort::HopsThenKm);
  EnvConfig cfg = bound_config(20);
  cfg.slot_aggregation = 5;
  cfg.load_erlang = 16.0;
  cfg.bitrates = {{100.0, 1.0}};
  cfg.episode_length = 3000;
  cfg.warmup_requests = 500;
  const auto cuts = enumerate_cutsets(*net, cfg);
  double heur = 0.0, cut = 0.0, defrag = 0.0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    heur += run_episode(heuristic_policy(HeuristicKind::KspFf), net, cfg, seed).sbp();
    cut += cutset_bound_episode(cuts, net, cfg, seed).sbp();
    defrag += defrag_bound_episode(net, cfg, seed).sbp();
  }
  CHECK(heur > 0.0);
  CHECK(cut <= heur);
  CHECK(defrag <= heur);
}

}  // TEST_SUITE
