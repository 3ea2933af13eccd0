#include "rmsa/heuristics.hpp"

#include <cmath>
#include <map>

namespace rmsa {

HeuristicKind parse_heuristic(std::string_view s) {
  if (s == "ksp-ff" || s == "ksp_ff" || s == "KSP-FF") return HeuristicKind::KspFf;
  if (s == "ff-ksp" || s == "ff_ksp" || s == "FF-KSP") return HeuristicKind::FfKsp;
  throw ConfigError("unknown heuristic '" + std::string(s) + "' (expected ksp-ff or ff-ksp)");
}

std::string to_string(HeuristicKind k) { return k == HeuristicKind::KspFf ? "ksp-ff" : "ff-ksp"; }

namespace {

int usable_paths(std::span<const Path> paths, std::span<const int> widths, int k_limit) {
  int n = static_cast<int>(std::min(paths.size(), widths.size()));
  if (k_limit >= 0) n = std::min(n, k_limit);
  return n;
}

}  // namespace

std::optional<Placement> ksp_ff_place(const SpectrumGrid& grid, std::span<const Path> paths, std::span<const int> widths,
                                      int k_limit) {
  const int n = usable_paths(paths, widths, k_limit);
  for (int k = 0; k < n; ++k) {
    const int w = widths[static_cast<std::size_t>(k)];
    if (w < 1) continue;
    const auto s = first_fit_in(grid.path_busy(paths[static_cast<std::size_t>(k)].edges), grid.num_fsu(), w, 0,
                                grid.num_fsu() - 1);
    if (s) return Placement{k, *s};
  }
  return std::nullopt;
}

std::optional<Placement> ff_ksp_place(const SpectrumGrid& grid, std::span<const Path> paths, std::span<const int> widths,
                                      int k_limit) {
  const int n = usable_paths(paths, widths, k_limit);
  std::optional<Placement> best;
  for (int k = 0; k < n; ++k) {
    const int w = widths[static_cast<std::size_t>(k)];
    if (w < 1) continue;
    // Only starts strictly before the incumbent can win; ties go to the lower path.
    const int hi = best ? best->start_fsu - 1 : grid.num_fsu() - 1;
    if (hi < 0) break;
    const auto s = first_fit_in(grid.path_busy(paths[static_cast<std::size_t>(k)].edges), grid.num_fsu(), w, 0, hi);
    if (s) best = Placement{k, *s};
  }
  return best;
}

std::vector<int> request_widths(const RmsaEnv& env) {
  const auto& paths = env.candidate_paths();
  std::vector<int> widths(paths.size(), -1);
  for (std::size_t k = 0; k < paths.size(); ++k) {
    if (const auto w = env.width_on_path(static_cast<int>(k))) widths[k] = *w;
  }
  return widths;
}

namespace {

std::optional<int> project(const RmsaEnv& env, const std::optional<Placement>& p) {
  if (!p) return std::nullopt;
  return Action{p->path_index, p->start_fsu / env.config().slot_aggregation}.flat(env.num_subbands());
}

int effective_limit(const RmsaEnv& env, int k_limit) { return k_limit < 0 ? env.k() : std::min(k_limit, env.k()); }

}  // namespace

std::optional<int> ksp_ff_decide(const RmsaEnv& env, int k_limit) {
  const auto widths = request_widths(env);
  return project(env, ksp_ff_place(env.grid(), env.candidate_paths(), widths, effective_limit(env, k_limit)));
}

std::optional<int> ff_ksp_decide(const RmsaEnv& env, int k_limit) {
  const auto widths = request_widths(env);
  return project(env, ff_ksp_place(env.grid(), env.candidate_paths(), widths, effective_limit(env, k_limit)));
}

Policy heuristic_policy(HeuristicKind kind, int k_limit) {
  if (kind == HeuristicKind::KspFf) {
    return [k_limit](const RmsaEnv& env) { return ksp_ff_decide(env, k_limit); };
  }
  return [k_limit](const RmsaEnv& env) { return ff_ksp_decide(env, k_limit); };
}

std::vector<SweepRow> heuristic_sweep(HeuristicKind kind, std::shared_ptr<const Network> net, const EnvConfig& cfg,
                                      std::span<const double> loads, std::span<const std::uint64_t> seeds,
                                      int k_limit) {
  std::vector<SweepRow> rows(loads.size() * seeds.size());
  const Policy policy = heuristic_policy(kind, k_limit);
  parallel_for(rows.size(), [&](std::size_t i) {
    EnvConfig c = cfg;
    c.load_erlang = loads[i / seeds.size()];
    rows[i].load_erlang = c.load_erlang;
    rows[i].seed = seeds[i % seeds.size()];
    rows[i].metrics = run_episode(policy, net, c, rows[i].seed);
  });
  return rows;
}

std::vector<SweepSummary> summarize(std::span<const SweepRow> rows) {
  std::vector<SweepSummary> out;
  std::map<double, std::vector<const SweepRow*>> by_load;
  for (const auto& r : rows) by_load[r.load_erlang].push_back(&r);
  for (const auto& [load, group] : by_load) {
    SweepSummary s;
    s.load_erlang = load;
    s.runs = static_cast<int>(group.size());
    for (const auto* r : group) {
      s.mean_sbp += r->metrics.sbp();
      s.mean_path_km += r->metrics.mean_path_km();
      s.shortest_path_fraction += r->metrics.shortest_path_fraction();
    }
    const double n = static_cast<double>(group.size());
    s.mean_sbp /= n;
    s.mean_path_km /= n;
    s.shortest_path_fraction /= n;
    if (group.size() > 1) {
      double ss = 0.0;
      for (const auto* r : group) ss += (r->metrics.sbp() - s.mean_sbp) * (r->metrics.sbp() - s.mean_sbp);
      s.stderr_sbp = std::sqrt(ss / (n - 1.0) / n);
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace rmsa
