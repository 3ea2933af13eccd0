#include "rmsa/checkpoint.hpp"
#include "rmsa/experiment.hpp"
#include "support.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace rmsa;
using namespace rmsa::testing;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test case.
fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rmsa_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string small_config(const std::string& extra = "") {
  return "[topology]\npath = " + data_path("topologies/nsfnet.json").string() +
         "\nk_paths = 3\nk_spectral = 4\n"
         "[env]\nnum_fsu = 8\nslot_aggregation = 4\nload_erlang = 10\nepisode_length = 300\nwarmup_requests = 50\n"
         "[model]\nembed_dim = 8\nnum_layers = 1\nnum_heads = 2\n"
         "[train]\nrollout_length = 8\nnum_envs = 2\nnum_minibatches = 2\nepochs = 1\ntotal_timesteps = 32\n"
         "[sweep]\nloads = 5, 10\nseeds = 0..2\n" +
         extra;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(RMSA_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("config documents: sections, comments and includes") {
  const auto dir = scratch("include");
  write(dir / "base.cfg", "# shared\n[env]\nnum_fsu = 40\nload_erlang = 100\n[sweep]\nseeds = 1..3\n");
  write(dir / "run.cfg", "include = base.cfg\n[env]\nload_erlang = 250 # override\n");
  const auto doc = load_config_document(dir / "run.cfg");
  CHECK(doc.at("env").at("num_fsu") == "40");
  CHECK(doc.at("env").at("load_erlang") == "250");
  CHECK(doc.at("sweep").at("seeds") == "1..3");
  CHECK(canonical_text(doc) == "[env]\nload_erlang = 250\nnum_fsu = 40\n[sweep]\nseeds = 1..3\n");

  // File paths follow the file that names them.
  fs::create_directories(dir / "shared" / "topo");
  fs::copy_file(data_path("topologies/nsfnet.json"), dir / "shared" / "topo" / "n.json");
  write(dir / "shared" / "base.cfg", "[topology]\npath = topo/n.json\n");
  fs::create_directories(dir / "runs");
  write(dir / "runs" / "r.cfg", "include = ../shared/base.cfg\n[env]\nnum_fsu = 8\n");
  CHECK(load_config_document(dir / "runs" / "r.cfg").at("topology").at("path") == "../shared/topo/n.json");
  CHECK(fs::equivalent(load_experiment(dir / "runs" / "r.cfg").topology_path, dir / "shared" / "topo" / "n.json"));

  write(dir / "cycle.cfg", "include = cycle.cfg\n[env]\nnum_fsu = 4\n");
  CHECK_THROWS_AS(load_config_document(dir / "cycle.cfg"), ConfigError);
  CHECK_THROWS_AS(parse_config_document("[env]\nnum_fsuu = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_document("[envv]\nnum_fsu = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_document("num_fsu = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_document("[env\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_document("[env]\nnum_fsu\n"), ConfigError);
}

TEST_CASE("experiment configs resolve and hash their inputs") {
  const auto dir = scratch("experiment");
  write(dir / "a.cfg", small_config());
  const auto a = load_experiment(dir / "a.cfg");
  CHECK(a.k_paths == 3);
  CHECK(a.env.num_fsu == 8);
  CHECK(a.model.embed_dim == 8);
  CHECK(a.train.total_timesteps == 32);
  CHECK(a.sweep.loads == std::vector<double>{5.0, 10.0});
  CHECK(a.sweep.seeds == std::vector<std::uint64_t>{0, 1, 2});
  CHECK(load_experiment(dir / "a.cfg").hash == a.hash);

  // Reordering and comments do not change the canonical form.
  write(dir / "b.cfg", "# same content, other order\n[sweep]\nseeds = 0..2\nloads = 5, 10\n" + small_config().substr(0, small_config().find("[sweep]")));
  CHECK(load_experiment(dir / "b.cfg").hash == a.hash);

  write(dir / "c.cfg", small_config("[eval]\ngreedy = false\n"));
  const auto c = load_experiment(dir / "c.cfg");
  CHECK(c.hash != a.hash);
  CHECK_FALSE(c.eval_greedy);

  write(dir / "bad1.cfg", small_config("[train]\nk_min = 0\n"));
  CHECK_THROWS_AS(load_experiment(dir / "bad1.cfg"), ConfigError);
  write(dir / "bad2.cfg", small_config("[env]\nnum_fsu = eight\n"));
  CHECK_THROWS_AS(load_experiment(dir / "bad2.cfg"), ConfigError);
  write(dir / "bad3.cfg", small_config("[sweep]\nseeds = 4..2\n"));
  CHECK_THROWS_AS(load_experiment(dir / "bad3.cfg"), ConfigError);
  write(dir / "bad4.cfg", "[env]\nnum_fsu = 8\n");
  CHECK_THROWS_AS(load_experiment(dir / "bad4.cfg"), ConfigError);

  // Shipped configs parse.
  for (const char* name : {"nsfnet_desk.cfg", "tataind_heuristics.cfg"}) {
    CAPTURE(name);
    CHECK_NOTHROW(load_experiment(fs::path(RMSA_CONFIG_DIR) / name));
  }
}

TEST_CASE("checkpoints round-trip and refuse a different config hash") {
  const auto dir = scratch("checkpoint");
  write(dir / "a.cfg", small_config());
  const auto cfg = load_experiment(dir / "a.cfg");
  const auto net = build_network(cfg);
  const ModelConfig mcfg = resolved_model_config(cfg, net);
  TrainState st = init_train_state(mcfg, cfg.train);
  Rng rng(3);
  visit(st.actor, [&](const std::string&, auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += static_cast<float>(rng.normal());
  });
  Eigen::VectorXf g = Eigen::VectorXf::Random(parameter_count(st.actor));
  Eigen::VectorXf p = flatten(st.actor);
  st.actor_opt.step(p, g, 1e-3);
  unflatten(st.actor, p);
  st.step = 1234;
  st.update = 7;
  save_checkpoint(dir / "ck.json", Checkpoint{mcfg, cfg.hash, st});

  const Checkpoint back = load_checkpoint(dir / "ck.json", cfg.hash);
  CHECK(back.config_hash == cfg.hash);
  CHECK(back.model.hash() == mcfg.hash());
  CHECK((flatten(back.state.actor) - flatten(st.actor)).norm() == 0.0f);
  CHECK((flatten(back.state.critic) - flatten(st.critic)).norm() == 0.0f);
  CHECK((back.state.actor_opt.m() - st.actor_opt.m()).norm() == 0.0f);
  CHECK((back.state.actor_opt.v() - st.actor_opt.v()).norm() == 0.0f);
  CHECK(back.state.actor_opt.t() == 1);
  CHECK(back.state.step == 1234);
  CHECK(back.state.update == 7);

  CHECK_THROWS_AS(load_checkpoint(dir / "ck.json", cfg.hash ^ 1), ConfigError);
  CHECK_NOTHROW(load_checkpoint(dir / "ck.json", cfg.hash ^ 1, true));
  write(dir / "broken.json", "{\"version\": 1");
  CHECK_THROWS(load_checkpoint(dir / "broken.json"));
}

TEST_CASE("blocking sweep: one row per policy, load and seed") {
  const auto dir = scratch("sweep");
  write(dir / "a.cfg", small_config());
  const auto cfg = load_experiment(dir / "a.cfg");
  const auto net = build_network(cfg);
  const std::vector<NamedPolicy> pols{builtin_policy("ksp-ff"), builtin_policy("random")};
  // A vanishing load is the degenerate no-blocking limit.
  const std::vector<double> loads{1e-6, 5.0, 40.0};
  const auto rows = blocking_vs_load(pols, net, cfg.env, loads, cfg.sweep.seeds);
  REQUIRE(rows.size() == 2 * 3 * 3);
  for (const auto& r : rows) {
    if (r.load_erlang == 1e-6) CHECK(r.sbp == 0.0);
  }
  CHECK(rows[0].policy == "ksp-ff");
  CHECK(rows[9].policy == "random");
  const auto again = blocking_vs_load(pols, net, cfg.env, loads, cfg.sweep.seeds);
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].sbp == again[i].sbp);
  std::ostringstream os;
  write_blocking_csv(os, rows, cfg.hash, 0);
  const std::string text = os.str();
  CHECK(text.rfind(stamp_line(cfg.hash, 0) + "\npolicy,load_erlang,seed,sbp,bitrate_blocking\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 2 + 18);
  CHECK_THROWS_AS(builtin_policy("best-fit"), ConfigError);
}

TEST_CASE("paired evaluation replays identical streams") {
  auto net = make_network(load_topology(data_path("topologies/nsfnet.json")), 5, PathSort::HopsThenKm);
  EnvConfig cfg;
  cfg.num_fsu = 20;
  cfg.slot_aggregation = 5;
  cfg.load_erlang = 18.0;
  cfg.episode_length = 2000;
  cfg.warmup_requests = 200;
  const auto ksp = builtin_policy("ksp-ff");
  const auto ff = builtin_policy("ff-ksp");

  const auto self = paired_eval(ksp, ksp, net, cfg, 4);
  CHECK(self.stream_hash_a == self.stream_hash_b);
  for (const auto& [id, d] : self.path_deltas()) CHECK(d == 0.0);
  CHECK(self.path_deltas().size() == static_cast<std::size_t>(self.a.metrics.accepted));
  CHECK(self.a.metrics.link_usage == self.b.metrics.link_usage);
  CHECK(self.a.metrics.occupancy_integral == self.b.metrics.occupancy_integral);

  const auto rep = paired_eval(ksp, ff, net, cfg, 4);
  CHECK(rep.stream_hash_a == rep.stream_hash_b);
  CHECK(rep.stream_hash_a == self.stream_hash_a);
  // Aggregates agree with recomputation from the per-request records.
  for (const PolicyRun* run : {&rep.a, &rep.b}) {
    const auto& m = run->metrics;
    REQUIRE(m.records.size() == static_cast<std::size_t>(cfg.episode_length));
    std::int64_t acc = 0;
    double km = 0.0;
    for (const auto& r : m.records) {
      acc += r.accepted;
      if (r.accepted) km += r.path_km;
    }
    CHECK(acc == m.accepted);
    CHECK(m.mean_path_km() == doctest::Approx(km / static_cast<double>(acc)));
    const auto series = PairedEvalReport::mean_path_series(m);
    CHECK(series.back() == doctest::Approx(m.mean_path_km()));
  }
  CHECK(rep.b.metrics.mean_path_km() > rep.a.metrics.mean_path_km());

  std::ostringstream req, usage, occ, ps;
  write_paired_requests_csv(req, rep, 99);
  write_link_usage_csv(usage, rep, 99);
  write_occupancy_csv(occ, rep, 99);
  write_path_series_csv(ps, rep, 99);
  const std::string r = req.str();
  CHECK(std::count(r.begin(), r.end(), '\n') == 2 + 2 * cfg.episode_length);
  const std::string o = occ.str();
  CHECK(std::count(o.begin(), o.end(), '\n') == 2 + 2 * 21 * 20);
  CHECK(usage.str().find("link_id,policy,count") != std::string::npos);
  CHECK(ps.str().find("index,policy,mean_path_km") != std::string::npos);
}

TEST_CASE("bitrate blocking series") {
  Metrics m;
  for (int i = 0; i < 6; ++i) {
    RequestRecord r;
    r.req_id = i;
    r.bitrate_gbps = 100.0 * (1 + i % 2);
    r.accepted = i < 3 || i == 5;
    m.records.push_back(r);
  }
  const auto s = bitrate_blocking_series(m, 2);
  REQUIRE(s.size() == 6);
  for (int i = 0; i < 3; ++i) {
    CHECK(s[static_cast<std::size_t>(i)].cumulative == 0.0);
    CHECK(s[static_cast<std::size_t>(i)].windowed == 0.0);
  }
  CHECK(s[3].cumulative == doctest::Approx(200.0 / 600.0));
  CHECK(s[4].windowed == doctest::Approx(1.0));
  CHECK(s[5].windowed == doctest::Approx(100.0 / 300.0));
  CHECK(s[5].cumulative == doctest::Approx(300.0 / 900.0));
  CHECK_THROWS_AS(bitrate_blocking_series(m, 0), ConfigError);

  // On a real episode the last cumulative point is the episode's bitrate blocking.
  auto net = make_network(load_topology(data_path("topologies/nsfnet.json")), 3, PathSort::HopsThenKm);
  EnvConfig cfg;
  cfg.num_fsu = 16;
  cfg.slot_aggregation = 4;
  cfg.load_erlang = 40.0;
  cfg.bitrates = {{100.0, 1.0}, {400.0, 1.0}};
  cfg.episode_length = 1500;
  cfg.warmup_requests = 100;
  cfg.record_requests = true;
  const Metrics run = run_episode(heuristic_policy(HeuristicKind::KspFf), net, cfg, 2);
  const auto series = bitrate_blocking_series(run, 100);
  REQUIRE(series.size() == 1500);
  CHECK(run.bitrate_blocking() > 0.0);
  CHECK(series.back().cumulative == doctest::Approx(run.bitrate_blocking()).epsilon(1e-12));
}

TEST_CASE("command line: artifacts, stamps and exit codes") {
  const auto dir = scratch("cli");
  write(dir / "a.cfg", small_config());
  const auto cfg = load_experiment(dir / "a.cfg");
  const fs::path log = dir / "log.txt";

  CHECK(run_cli("topo stats " + data_path("topologies/nsfnet.json").string(), log) == 0);
  CHECK(slurp(log).find("NSFNET,14,42,") != std::string::npos);

  CHECK(run_cli("heuristic sweep -c " + (dir / "a.cfg").string() + " -o " + (dir / "sweep").string(), log) == 0);
  const std::string csv = slurp(dir / "sweep" / "blocking.csv");
  CHECK(csv.rfind(stamp_line(cfg.hash, 0), 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2 + 2 * 2 * 3);
  // Bit-exact reruns.
  CHECK(run_cli("heuristic sweep -c " + (dir / "a.cfg").string() + " -o " + (dir / "sweep2").string(), log) == 0);
  CHECK(slurp(dir / "sweep2" / "blocking.csv") == csv);

  CHECK(run_cli("train -c " + (dir / "a.cfg").string() + " -o " + (dir / "run").string(), log) == 0);
  CHECK(fs::exists(dir / "run" / "checkpoint.json"));
  CHECK(fs::exists(dir / "run" / "train_log.ndjson"));
  CHECK(run_cli("eval -c " + (dir / "a.cfg").string() + " --checkpoint " + (dir / "run" / "checkpoint.json").string() +
                    " -b ksp-ff -o " + (dir / "eval").string(),
                log) == 0);
  CHECK(fs::exists(dir / "eval" / "eval.csv"));

  // A different config hash is refused unless forced.
  write(dir / "b.cfg", small_config("[eval]\nseries_window = 50\n"));
  CHECK(run_cli("eval -c " + (dir / "b.cfg").string() + " --checkpoint " + (dir / "run" / "checkpoint.json").string() +
                    " -o " + (dir / "eval_b").string(),
                log) == 2);
  CHECK(run_cli("eval -c " + (dir / "b.cfg").string() + " --checkpoint " + (dir / "run" / "checkpoint.json").string() +
                    " --force -o " + (dir / "eval_b").string(),
                log) == 0);

  CHECK(run_cli("analyze -c " + (dir / "a.cfg").string() + " -a ksp-ff -b ff-ksp -o " + (dir / "an").string(), log) == 0);
  for (const char* f : {"paired_requests_seed0.csv", "link_usage_seed1.csv", "occupancy_seed2.csv",
                        "path_series_seed0.csv", "bitrate_series_ff-ksp_seed0.csv"}) {
    CAPTURE(f);
    CHECK(slurp(dir / "an" / f).rfind("# config_hash=" + hex64(cfg.hash), 0) == 0);
  }

  CHECK(run_cli("bounds -c " + (dir / "a.cfg").string() + " -o " + (dir / "bounds").string(), log) == 0);
  CHECK(fs::exists(dir / "bounds" / "cuts.json"));

  // Usage and config errors exit 2; runtime failures exit 3.
  CHECK(run_cli("heuristic sweep --no-such-flag", log) == 2);
  CHECK(run_cli("frobnicate", log) == 2);
  write(dir / "unknown.cfg", small_config("[bogus]\nx = 1\n"));
  CHECK(run_cli("heuristic sweep -c " + (dir / "unknown.cfg").string(), log) == 2);
  CHECK(run_cli("analyze -c " + (dir / "a.cfg").string() + " -a model -b ksp-ff -o " + (dir / "x").string(), log) == 2);
  write(dir / "missing_topo.cfg", "[topology]\npath = nowhere.json\n");
  CHECK(run_cli("heuristic sweep -c " + (dir / "missing_topo.cfg").string(), log) == 2);
  write(dir / "blocker", "a file where the output directory should go");
  CHECK(run_cli("heuristic sweep -c " + (dir / "a.cfg").string() + " -o " + (dir / "blocker" / "out").string(), log) == 3);
}

}  // TEST_SUITE
