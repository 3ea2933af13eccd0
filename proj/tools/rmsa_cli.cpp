// Command-line front end: topology statistics, heuristic sweeps, capacity
// bounds, training, evaluation and paired analysis.

#include "rmsa/bounds.hpp"
#include "rmsa/checkpoint.hpp"
#include "rmsa/experiment.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>

namespace fs = std::filesystem;
using namespace rmsa;

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

fs::path output_dir(const ExperimentConfig& cfg, const std::string& override_dir) {
  return override_dir.empty() ? cfg.output_dir : fs::path(override_dir);
}

void print_summary(const std::vector<BlockingRow>& rows) {
  std::map<std::pair<std::string, double>, std::vector<double>> groups;
  for (const auto& r : rows) groups[{r.policy, r.load_erlang}].push_back(r.sbp);
  std::cout << std::left << std::setw(10) << "policy" << std::setw(12) << "load" << std::setw(14) << "mean_sbp"
            << "stderr\n";
  for (const auto& [key, v] : groups) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double se = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size())) : 0.0;
    std::cout << std::left << std::setw(10) << key.first << std::setw(12) << key.second << std::setw(14) << mean << se
              << '\n';
  }
}

NamedPolicy resolve_policy(const std::string& name, const std::shared_ptr<const ActorParams<float>>& actor,
                           const ModelConfig& mcfg, bool greedy) {
  if (name == "model") {
    if (!actor) throw ConfigError("policy 'model' needs --checkpoint");
    return {"model", [actor, mcfg, greedy](std::uint64_t seed) { return model_policy(actor, mcfg, greedy, seed); }};
  }
  return builtin_policy(name);
}

int cmd_topo_stats(const std::vector<std::string>& paths) {
  std::cout << "name,nodes,directed_links,avg_degree,avg_sp_hops,avg_sp_km\n" << std::fixed;
  for (const auto& p : paths) {
    const Topology t = load_topology(p);
    const TopologyStats s = topology_stats(t);
    std::cout << t.name() << ',' << s.nodes << ',' << s.directed_links << ',' << std::setprecision(3) << s.avg_degree
              << ',' << s.avg_sp_hops << ',' << std::setprecision(1) << s.avg_sp_km << '\n';
  }
  return 0;
}

int cmd_heuristic_sweep(const std::string& config, std::vector<std::string> policies, const std::string& out_dir) {
  const ExperimentConfig cfg = load_experiment(config);
  const auto net = build_network(cfg);
  if (policies.empty()) policies = {"ksp-ff", "ff-ksp"};
  std::vector<NamedPolicy> named;
  for (const auto& p : policies) named.push_back(builtin_policy(p));
  const auto rows = blocking_vs_load(named, net, cfg.env, cfg.sweep.loads, cfg.sweep.seeds);
  auto out = open_out(output_dir(cfg, out_dir) / "blocking.csv");
  write_blocking_csv(out, rows, cfg.hash, cfg.sweep.seeds.front());
  print_summary(rows);
  return 0;
}

int cmd_bounds(const std::string& config, int max_cuts, const std::string& out_dir) {
  const ExperimentConfig cfg = load_experiment(config);
  const auto net = build_network(cfg);
  std::vector<BlockingRow> rows;
  nlohmann::json cuts_doc = nlohmann::json::array();
  for (double load : cfg.sweep.loads) {
    EnvConfig env = cfg.env;
    env.load_erlang = load;
    const auto cuts = enumerate_cutsets(*net, env, max_cuts);
    if (load == cfg.sweep.loads.front()) {
      for (const auto& c : cuts) {
        nlohmann::json side = nlohmann::json::array();
        for (std::size_t v = 0; v < c.side.size(); ++v) {
          if (c.side[v]) side.push_back(net->topology.node_names()[v]);
        }
        cuts_doc.push_back({{"nodes", side},
                            {"crossing_edges", c.crossing_edges},
                            {"capacity", c.capacity},
                            {"crossing_load", c.crossing_load},
                            {"congestion", c.congestion}});
      }
    }
    std::vector<BlockingRow> part(cfg.sweep.seeds.size() * 3);
    parallel_for(cfg.sweep.seeds.size(), [&](std::size_t i) {
      const auto seed = cfg.sweep.seeds[i];
      const Metrics cut = cutset_bound_episode(cuts, net, env, seed);
      const Metrics defrag = defrag_bound_episode(net, env, seed);
      const Metrics ksp = run_episode(heuristic_policy(HeuristicKind::KspFf), net, env, seed);
      part[3 * i] = {"cutset", load, seed, cut.sbp(), cut.bitrate_blocking()};
      part[3 * i + 1] = {"defrag", load, seed, defrag.sbp(), defrag.bitrate_blocking()};
      part[3 * i + 2] = {"ksp-ff", load, seed, ksp.sbp(), ksp.bitrate_blocking()};
    });
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const fs::path dir = output_dir(cfg, out_dir);
  auto out = open_out(dir / "bounds.csv");
  write_blocking_csv(out, rows, cfg.hash, cfg.sweep.seeds.front());
  auto cuts_out = open_out(dir / "cuts.json");
  cuts_out << nlohmann::json{{"config_hash", hex64(cfg.hash)}, {"version", kVersion}, {"cuts", cuts_doc}}.dump(2)
           << '\n';
  print_summary(rows);
  return 0;
}

int cmd_train(const std::string& config, const std::string& out_dir, const std::string& resume, bool force,
              bool resume_optimizer) {
  const ExperimentConfig cfg = load_experiment(config);
  const auto net = build_network(cfg);
  const ModelConfig mcfg = resolved_model_config(cfg, net);
  const fs::path dir = output_dir(cfg, out_dir);
  std::optional<Checkpoint> start;
  if (!resume.empty()) {
    // Fine-tuning may change hyperparameters, so only the model layout must match.
    start = load_checkpoint(resume, std::nullopt, force);
    if (start->model.hash() != mcfg.hash()) throw ConfigError("resume checkpoint has a different model layout");
  }
  auto log = open_out(dir / "train_log.ndjson");
  TrainOptions opts;
  opts.log = &log;
  opts.resume_optimizer = resume_optimizer;
  const auto t0 = std::chrono::steady_clock::now();
  opts.on_update = [&](const UpdateLog& u) {
    if (u.update % 50 != 0) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "update " << u.update << " step " << u.step << " sbp " << u.sbp_rolling << " mu " << u.loss.mean_mu
              << " entropy " << u.loss.mean_entropy << " (" << static_cast<int>(secs) << " s)\n";
  };
  Rng count_rng(0);
  std::cerr << "actor parameters " << parameter_count(init_actor<float>(mcfg, count_rng)) << '\n';
  TrainState state = train(net, cfg.env, mcfg, cfg.train, opts, start ? &start->state : nullptr);
  save_checkpoint(dir / "checkpoint.json", Checkpoint{mcfg, cfg.hash, std::move(state)});
  std::cout << "wrote " << (dir / "checkpoint.json").string() << '\n';
  return 0;
}

int cmd_eval(const std::string& config, const std::string& checkpoint, bool force, std::vector<std::string> baselines,
             const std::string& out_dir) {
  const ExperimentConfig cfg = load_experiment(config);
  const auto net = build_network(cfg);
  const ModelConfig mcfg = resolved_model_config(cfg, net);
  const Checkpoint ckpt = load_checkpoint(checkpoint, cfg.hash, force);
  if (ckpt.model.hash() != mcfg.hash()) throw ConfigError("checkpoint model layout does not match the config");
  auto actor = std::make_shared<const ActorParams<float>>(ckpt.state.actor);
  std::vector<NamedPolicy> named{resolve_policy("model", actor, mcfg, cfg.eval_greedy)};
  for (const auto& b : baselines) named.push_back(builtin_policy(b));
  const auto rows = blocking_vs_load(named, net, cfg.env, cfg.sweep.loads, cfg.sweep.seeds);
  auto out = open_out(output_dir(cfg, out_dir) / "eval.csv");
  write_blocking_csv(out, rows, cfg.hash, cfg.sweep.seeds.front());
  print_summary(rows);
  return 0;
}

int cmd_analyze(const std::string& config, const std::string& a, const std::string& b, const std::string& checkpoint,
                bool force, const std::string& out_dir) {
  const ExperimentConfig cfg = load_experiment(config);
  const auto net = build_network(cfg);
  std::shared_ptr<const ActorParams<float>> actor;
  ModelConfig mcfg;
  if (!checkpoint.empty()) {
    mcfg = resolved_model_config(cfg, net);
    const Checkpoint ckpt = load_checkpoint(checkpoint, cfg.hash, force);
    if (ckpt.model.hash() != mcfg.hash()) throw ConfigError("checkpoint model layout does not match the config");
    actor = std::make_shared<const ActorParams<float>>(ckpt.state.actor);
  }
  const NamedPolicy pa = resolve_policy(a, actor, mcfg, cfg.eval_greedy);
  const NamedPolicy pb = resolve_policy(b, actor, mcfg, cfg.eval_greedy);
  const fs::path dir = output_dir(cfg, out_dir);
  for (const auto seed : cfg.sweep.seeds) {
    const PairedEvalReport rep = paired_eval(pa, pb, net, cfg.env, seed);
    if (rep.stream_hash_a != rep.stream_hash_b) throw Error("paired evaluation saw different request streams");
    const std::string tag = "_seed" + std::to_string(seed) + ".csv";
    auto req = open_out(dir / ("paired_requests" + tag));
    write_paired_requests_csv(req, rep, cfg.hash);
    auto usage = open_out(dir / ("link_usage" + tag));
    write_link_usage_csv(usage, rep, cfg.hash);
    auto occ = open_out(dir / ("occupancy" + tag));
    write_occupancy_csv(occ, rep, cfg.hash);
    auto series = open_out(dir / ("path_series" + tag));
    write_path_series_csv(series, rep, cfg.hash);
    for (const PolicyRun* run : {&rep.a, &rep.b}) {
      auto br = open_out(dir / ("bitrate_series_" + run->policy + tag));
      write_series_csv(br, bitrate_blocking_series(run->metrics, cfg.series_window), cfg.hash, seed);
    }
    std::cout << "seed " << seed << ": " << rep.a.policy << " sbp " << rep.a.metrics.sbp() << " mean km "
              << rep.a.metrics.mean_path_km() << " | " << rep.b.policy << " sbp " << rep.b.metrics.sbp()
              << " mean km " << rep.b.metrics.mean_path_km() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic RMSA simulator, heuristics, bounds and PPO training"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto* topo = app.add_subcommand("topo", "Topology utilities");
  topo->require_subcommand(1);
  auto* topo_stats = topo->add_subcommand("stats", "Print node/link counts and shortest-path averages");
  std::vector<std::string> topo_paths;
  topo_stats->add_option("topology", topo_paths, "Topology JSON files")->required()->check(CLI::ExistingFile);

  auto* heur = app.add_subcommand("heuristic", "Heuristic baselines");
  heur->require_subcommand(1);
  auto* sweep = heur->add_subcommand("sweep", "Blocking versus load for KSP-FF / FF-KSP / random");
  std::string config, out_dir, checkpoint, resume, pol_a = "ksp-ff", pol_b = "ff-ksp";
  std::vector<std::string> policies, baselines;
  bool force = false, resume_optimizer = false;
  int max_cuts = 256;
  sweep->add_option("-c,--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  sweep->add_option("-p,--policy", policies, "Policies (ksp-ff, ff-ksp, random)");
  sweep->add_option("-o,--out", out_dir, "Output directory");

  auto* bounds = app.add_subcommand("bounds", "Cut-set and defragmentation blocking bounds");
  bounds->add_option("-c,--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  bounds->add_option("--max-cuts", max_cuts, "Number of most congested cuts kept")->check(CLI::NonNegativeNumber);
  bounds->add_option("-o,--out", out_dir, "Output directory");

  auto* train_cmd = app.add_subcommand("train", "Train the actor-critic with stabilized PPO");
  train_cmd->add_option("-c,--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("-o,--out", out_dir, "Output directory");
  train_cmd->add_option("--resume", resume, "Start from this checkpoint's parameters")->check(CLI::ExistingFile);
  train_cmd->add_flag("--resume-optimizer", resume_optimizer, "Also restore optimizer moments");
  train_cmd->add_flag("--force", force, "Accept a checkpoint from a different config");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint against baselines");
  eval->add_option("-c,--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("-b,--baseline", baselines, "Baseline policies");
  eval->add_flag("--force", force, "Accept a checkpoint from a different config");
  eval->add_option("-o,--out", out_dir, "Output directory");

  auto* analyze = app.add_subcommand("analyze", "Paired evaluation on identical request streams");
  analyze->add_option("-c,--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  analyze->add_option("-a,--policy-a", pol_a, "First policy (ksp-ff, ff-ksp, random, model)");
  analyze->add_option("-b,--policy-b", pol_b, "Second policy");
  analyze->add_option("--checkpoint", checkpoint, "Checkpoint for policy 'model'")->check(CLI::ExistingFile);
  analyze->add_flag("--force", force, "Accept a checkpoint from a different config");
  analyze->add_option("-o,--out", out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*topo_stats) return cmd_topo_stats(topo_paths);
    if (*sweep) return cmd_heuristic_sweep(config, policies, out_dir);
    if (*bounds) return cmd_bounds(config, max_cuts, out_dir);
    if (*train_cmd) return cmd_train(config, out_dir, resume, force, resume_optimizer);
    if (*eval) return cmd_eval(config, checkpoint, force, baselines, out_dir);
    if (*analyze) return cmd_analyze(config, pol_a, pol_b, checkpoint, force, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
