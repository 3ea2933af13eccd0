#pragma once

#include "rmsa/env.hpp"

#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace rmsa {

enum class HeuristicKind { KspFf, FfKsp };

HeuristicKind parse_heuristic(std::string_view s);
std::string to_string(HeuristicKind k);

struct Placement {
  int path_index = -1;
  int start_fsu = -1;

  bool operator==(const Placement&) const = default;
};

// widths[k] is the FSU width on candidate k, or -1 if unusable.
// Only the first k_limit candidates are considered (all if k_limit < 0).
std::optional<Placement> ksp_ff_place(const SpectrumGrid& grid, std::span<const Path> paths, std::span<const int> widths,
                                      int k_limit = -1);
std::optional<Placement> ff_ksp_place(const SpectrumGrid& grid, std::span<const Path> paths, std::span<const int> widths,
                                      int k_limit = -1);

/// Per-candidate widths of the environment's current request.
std::vector<int> request_widths(const RmsaEnv& env);

/// Flat action for the current request (sub-band holding the first-fit start).
std::optional<int> ksp_ff_decide(const RmsaEnv& env, int k_limit = -1);
std::optional<int> ff_ksp_decide(const RmsaEnv& env, int k_limit = -1);

Policy heuristic_policy(HeuristicKind kind, int k_limit = -1);

struct SweepRow {
  double load_erlang = 0.0;
  std::uint64_t seed = 0;
  Metrics metrics;
};

struct SweepSummary {
  double load_erlang = 0.0;
  int runs = 0;
  double mean_sbp = 0.0;
  double stderr_sbp = 0.0;
  double mean_path_km = 0.0;
  double shortest_path_fraction = 0.0;
};

/// One episode per (load, seed). Rows come back load-major, seed-minor.
std::vector<SweepRow> heuristic_sweep(HeuristicKind kind, std::shared_ptr<const Network> net, const EnvConfig& cfg,
                                      std::span<const double> loads, std::span<const std::uint64_t> seeds,
                                      int k_limit = -1);

std::vector<SweepSummary> summarize(std::span<const SweepRow> rows);

}  // namespace rmsa
