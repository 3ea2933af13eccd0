#pragma once

#include "rmsa/env.hpp"
#include "rmsa/heuristics.hpp"

#include <span>
#include <string>
#include <vector>

namespace rmsa {

struct CutSet {
  std::vector<char> side;           // 1 for nodes in S; node 0 is always outside S
  std::vector<int> crossing_edges;  // ascending edge ids
  int capacity = 0;                 // num_fsu * crossing edges
  double crossing_load = 0.0;       // expected FSU demand of separated pairs
  double congestion = 0.0;          // crossing_load / capacity

  bool separates(int a, int b) const { return side[static_cast<std::size_t>(a)] != side[static_cast<std::size_t>(b)]; }
  std::string describe(const Topology& t) const;
};

/// Builds a cut from an arbitrary node subset (normalized so node 0 is outside S).
CutSet make_cut(const Topology& t, std::vector<char> side);

/// Expected FSU demand per ordered pair: load * P(s, d) * E[width on the
/// narrowest usable candidate]. Zero for pairs with no usable candidate.
Eigen::MatrixXd pair_fsu_demand(const Network& net, const EnvConfig& cfg);

/// Fills crossing_load and congestion.
void score_cut(CutSet& cut, const Eigen::MatrixXd& demand);

/// Candidates: every single node, every node pair, and a minimum cut for
/// every node pair; deduplicated and ranked by congestion (descending).
std::vector<CutSet> enumerate_cutsets(const Network& net, const EnvConfig& cfg, int max_cuts = 256);

/// Edge-disjoint path count between two nodes, with the source side of a minimum cut.
struct MinCut {
  int value = 0;
  std::vector<char> source_side;
};
MinCut min_cut(const Topology& t, int source, int target);

/// Relaxed admission: each cut is an FSU counter pool; a request takes its
/// width from every cut separating its end nodes, without contiguity or
/// continuity.
Metrics cutset_bound_episode(std::span<const CutSet> cuts, std::shared_ptr<const Network> net, const EnvConfig& cfg,
                             std::uint64_t seed);

struct DefragConnection {
  Request request;
  Placement placement;
  int width = 0;
  double expiry = 0.0;
};

struct DefragState {
  SpectrumGrid grid;
  std::vector<DefragConnection> active;

  bool consistent(const Network& net) const;
};

struct DefragOutcome {
  bool accepted = false;
  bool repacked = false;     // true if the full reallocation was committed
  bool rolled_back = false;  // an existing connection failed to re-place
  Placement placement;
};

/// Repacks every active connection plus the new request in descending width
/// order (earlier arrival first on ties) with KSP-FF. If an existing
/// connection cannot be re-placed, or the new one fails, the previous state is
/// restored and the new request gets a plain KSP-FF attempt.
DefragOutcome defrag_reallocate(DefragState& state, const Network& net, const EnvConfig& cfg, const Request& request,
                                int k_limit = -1);

/// Drops connections with expiry <= t.
void defrag_release(DefragState& state, const Network& net, double t);

Metrics defrag_bound_episode(std::shared_ptr<const Network> net, const EnvConfig& cfg, std::uint64_t seed,
                             int k_limit = -1);

}  // namespace rmsa
