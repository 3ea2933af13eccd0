#include "rmsa/experiment.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace rmsa {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto next = s.find(sep, pos);
    const auto piece = trim(s.substr(pos, next == std::string_view::npos ? s.size() - pos : next - pos));
    if (!piece.empty()) out.push_back(piece);
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void merge_into(ConfigDocument& dst, const ConfigDocument& src) {
  for (const auto& [section, kv] : src) {
    for (const auto& [k, v] : kv) dst[section][k] = v;
  }
}

// File paths in an included document are relative to that document; make
// them relative to the includer. Same-directory includes stay untouched.
void rebase_paths(ConfigDocument& doc, const std::filesystem::path& prefix) {
  if (prefix.empty()) return;
  for (const auto& [section, key] : {std::pair{"topology", "path"}, std::pair{"env", "traffic_matrix"}}) {
    const auto s = doc.find(section);
    if (s == doc.end()) continue;
    const auto k = s->second.find(key);
    if (k == s->second.end() || std::filesystem::path(k->second).is_absolute()) continue;
    k->second = (prefix / k->second).lexically_normal().generic_string();
  }
}

ConfigDocument parse_impl(std::string_view text, const std::filesystem::path& base_dir, int depth) {
  if (depth > 16) throw ConfigError("config: include depth exceeds 16 (cycle?)");
  ConfigDocument included;
  ConfigDocument own;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // Trailing comments need whitespace before the '#'.
    for (std::size_t i = 1; i < line.size(); ++i) {
      if (line[i] == '#' && (line[i - 1] == ' ' || line[i - 1] == '\t')) {
        line.resize(i);
        break;
      }
    }
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      if (section.empty()) throw ConfigError(where + "empty section name");
      own[section];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (section.empty()) {
      if (key != "include") throw ConfigError(where + "key '" + key + "' outside any section");
      const auto path = base_dir / value;
      ConfigDocument child = parse_impl(read_file(path), path.parent_path(), depth + 1);
      rebase_paths(child, std::filesystem::path(value).parent_path());
      merge_into(included, child);
      continue;
    }
    own[section][key] = value;
  }
  merge_into(included, own);
  return included;
}

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"topology", {"path", "k_paths", "path_sort", "k_spectral"}},
      {"modulation", {"formats", "slot_width_ghz"}},
      {"env",
       {"num_fsu", "slot_aggregation", "load_erlang", "mean_holding_time", "bitrates", "traffic_matrix",
        "episode_length", "warmup_requests", "guardband_fsu", "occupancy_clip"}},
      {"model",
       {"embed_dim", "num_layers", "num_heads", "mlp_multiplier", "head_hidden", "wire", "wire_scale_min",
        "wire_scale_max"}},
      {"train",
       {"clip_eps", "gamma", "gae_lambda", "c_value", "c_ent", "ent_schedule", "c_vm", "vm_schedule",
        "vm_end_fraction", "mu_target", "k_min", "actor_lr", "critic_lr", "lr_schedule", "rollout_length", "num_envs",
        "num_minibatches", "epochs", "total_timesteps", "max_grad_norm", "seed", "sbp_window", "off_policy_iam",
        "damping", "gating", "vml"}},
      {"sweep", {"loads", "seeds", "episodes"}},
      {"eval", {"greedy", "series_window"}},
      {"output", {"dir"}},
  };
  return keys;
}

class Reader {
 public:
  explicit Reader(const ConfigDocument& doc) : doc_(doc) {}

  const std::string* find(const std::string& section, const std::string& key) const {
    const auto s = doc_.find(section);
    if (s == doc_.end()) return nullptr;
    const auto k = s->second.find(key);
    return k == s->second.end() ? nullptr : &k->second;
  }

  template <typename T>
  void get(const std::string& section, const std::string& key, T& out) const {
    const std::string* v = find(section, key);
    if (!v) return;
    out = parse<T>(*v, section + "." + key);
  }

  template <typename T>
  static T parse(const std::string& v, const std::string& what) {
    if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
      if (v == "false" || v == "0" || v == "no" || v == "off") return false;
      throw ConfigError(what + ": expected a boolean, got '" + v + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_floating_point_v<T>) {
      try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<T>(d);
      } catch (const std::exception&) {
        throw ConfigError(what + ": expected a number, got '" + v + "'");
      }
    } else {
      std::string digits;
      for (char c : v) {
        if (c != '_' && c != '\'') digits.push_back(c);
      }
      T out{};
      const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out);
      if (ec != std::errc() || ptr != digits.data() + digits.size()) {
        // Accept integral values written in scientific notation, e.g. 2e6.
        const double d = parse<double>(v, what);
        if (d != std::floor(d)) throw ConfigError(what + ": expected an integer, got '" + v + "'");
        return static_cast<T>(d);
      }
      return out;
    }
  }

 private:
  const ConfigDocument& doc_;
};

std::vector<std::uint64_t> parse_seeds(const std::string& v) {
  std::vector<std::uint64_t> seeds;
  for (const auto& piece : split(v, ',')) {
    const auto dots = piece.find("..");
    if (dots != std::string::npos) {
      const auto lo = Reader::parse<std::uint64_t>(trim(piece.substr(0, dots)), "sweep.seeds");
      const auto hi = Reader::parse<std::uint64_t>(trim(piece.substr(dots + 2)), "sweep.seeds");
      if (hi < lo) throw ConfigError("sweep.seeds: empty range " + piece);
      for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
    } else {
      seeds.push_back(Reader::parse<std::uint64_t>(piece, "sweep.seeds"));
    }
  }
  return seeds;
}

Eigen::MatrixXd load_matrix_csv(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::vector<double> row;
    for (const auto& cell : split(t, ',')) row.push_back(Reader::parse<double>(cell, path.string()));
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != m.cols()) throw ConfigError(path.string() + ": ragged matrix");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

}  // namespace

ConfigDocument parse_config_document(std::string_view text, const std::filesystem::path& base_dir) {
  ConfigDocument doc = parse_impl(text, base_dir, 0);
  for (const auto& [section, kv] : doc) {
    const auto known = known_keys().find(section);
    if (known == known_keys().end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [k, v] : kv) {
      if (!known->second.contains(k)) throw ConfigError("config: unknown key '" + k + "' in [" + section + "]");
    }
  }
  return doc;
}

ConfigDocument load_config_document(const std::filesystem::path& path) {
  return parse_config_document(read_file(path), path.parent_path());
}

std::string canonical_text(const ConfigDocument& doc) {
  std::ostringstream os;
  for (const auto& [section, kv] : doc) {
    os << '[' << section << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  }
  return os.str();
}

ExperimentConfig experiment_from_document(const ConfigDocument& doc, const std::filesystem::path& base_dir) {
  const Reader r(doc);
  ExperimentConfig c;
  std::string path;
  r.get("topology", "path", path);
  if (path.empty()) throw ConfigError("config: [topology] path is required");
  c.topology_path = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path) : base_dir / path;
  r.get("topology", "k_paths", c.k_paths);
  if (const auto* s = r.find("topology", "path_sort")) c.path_sort = parse_path_sort(*s);
  r.get("topology", "k_spectral", c.k_spectral);
  if (c.k_paths < 1) throw ConfigError("topology.k_paths must be positive");

  if (const auto* f = r.find("modulation", "formats")) {
    c.modulations.formats.clear();
    for (const auto& entry : split(*f, ',')) {
      const auto parts = split(entry, ':');
      if (parts.size() != 3) throw ConfigError("modulation.formats: expected name:bits:reach_km, got '" + entry + "'");
      c.modulations.formats.push_back(
          {parts[0], Reader::parse<int>(parts[1], "modulation.formats"), Reader::parse<double>(parts[2], "modulation.formats")});
    }
  }
  r.get("modulation", "slot_width_ghz", c.modulations.slot_width_ghz);
  c.modulations.validate();

  EnvConfig& e = c.env;
  r.get("env", "num_fsu", e.num_fsu);
  r.get("env", "slot_aggregation", e.slot_aggregation);
  r.get("env", "load_erlang", e.load_erlang);
  r.get("env", "mean_holding_time", e.mean_holding_time);
  r.get("env", "episode_length", e.episode_length);
  r.get("env", "warmup_requests", e.warmup_requests);
  r.get("env", "guardband_fsu", e.guardband_fsu);
  r.get("env", "occupancy_clip", e.occupancy_clip);
  if (const auto* b = r.find("env", "bitrates")) {
    e.bitrates.clear();
    for (const auto& entry : split(*b, ',')) {
      const auto parts = split(entry, ':');
      if (parts.empty() || parts.size() > 2) throw ConfigError("env.bitrates: expected gbps[:weight], got '" + entry + "'");
      e.bitrates.push_back({Reader::parse<double>(parts[0], "env.bitrates"),
                            parts.size() == 2 ? Reader::parse<double>(parts[1], "env.bitrates") : 1.0});
    }
  }
  if (const auto* tm = r.find("env", "traffic_matrix")) {
    const std::filesystem::path p = std::filesystem::path(*tm).is_absolute() ? std::filesystem::path(*tm) : base_dir / *tm;
    e.traffic_matrix = load_matrix_csv(p);
  }

  ModelConfig& m = c.model;
  r.get("model", "embed_dim", m.embed_dim);
  r.get("model", "num_layers", m.num_layers);
  r.get("model", "num_heads", m.num_heads);
  r.get("model", "mlp_multiplier", m.mlp_multiplier);
  r.get("model", "head_hidden", m.head_hidden);
  r.get("model", "wire", m.wire);
  r.get("model", "wire_scale_min", m.wire_scale_min);
  r.get("model", "wire_scale_max", m.wire_scale_max);

  TrainConfig& t = c.train;
  r.get("train", "clip_eps", t.clip_eps);
  r.get("train", "gamma", t.gamma);
  r.get("train", "gae_lambda", t.gae_lambda);
  r.get("train", "c_value", t.c_value);
  r.get("train", "c_ent", t.c_ent);
  if (const auto* s = r.find("train", "ent_schedule")) t.ent_schedule = parse_schedule(*s);
  r.get("train", "c_vm", t.c_vm);
  if (const auto* s = r.find("train", "vm_schedule")) t.vm_schedule = parse_schedule(*s);
  r.get("train", "vm_end_fraction", t.vm_end_fraction);
  r.get("train", "mu_target", t.mu_target);
  r.get("train", "k_min", t.k_min);
  r.get("train", "actor_lr", t.actor_lr);
  r.get("train", "critic_lr", t.critic_lr);
  if (const auto* s = r.find("train", "lr_schedule")) t.lr_schedule = parse_schedule(*s);
  r.get("train", "rollout_length", t.rollout_length);
  r.get("train", "num_envs", t.num_envs);
  r.get("train", "num_minibatches", t.num_minibatches);
  r.get("train", "epochs", t.epochs);
  r.get("train", "total_timesteps", t.total_timesteps);
  r.get("train", "max_grad_norm", t.max_grad_norm);
  r.get("train", "seed", t.seed);
  r.get("train", "sbp_window", t.sbp_window);
  r.get("train", "off_policy_iam", t.ablation.off_policy_iam);
  r.get("train", "damping", t.ablation.damping);
  r.get("train", "gating", t.ablation.gating);
  r.get("train", "vml", t.ablation.vml);
  t.validate();

  if (const auto* l = r.find("sweep", "loads")) {
    for (const auto& piece : split(*l, ',')) c.sweep.loads.push_back(Reader::parse<double>(piece, "sweep.loads"));
  }
  if (const auto* s = r.find("sweep", "seeds")) c.sweep.seeds = parse_seeds(*s);
  if (const auto* n = r.find("sweep", "episodes")) {
    const int episodes = Reader::parse<int>(*n, "sweep.episodes");
    if (c.sweep.seeds.empty()) {
      for (int i = 0; i < episodes; ++i) c.sweep.seeds.push_back(static_cast<std::uint64_t>(i));
    } else if (static_cast<int>(c.sweep.seeds.size()) != episodes) {
      throw ConfigError("sweep: episodes does not match the number of seeds");
    }
  }
  if (c.sweep.loads.empty()) c.sweep.loads.push_back(e.load_erlang);
  if (c.sweep.seeds.empty()) c.sweep.seeds.push_back(0);

  r.get("eval", "greedy", c.eval_greedy);
  r.get("eval", "series_window", c.series_window);
  std::string out;
  r.get("output", "dir", out);
  if (!out.empty()) c.output_dir = out;

  std::uint64_t h = fnv1a(canonical_text(doc));
  h = fnv1a(read_file(c.topology_path), h);
  c.hash = fnv1a(kVersion, h);
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return experiment_from_document(load_config_document(path), path.parent_path());
}

std::shared_ptr<const Network> build_network(const ExperimentConfig& cfg) {
  auto net = make_network(load_topology(cfg.topology_path), cfg.k_paths, cfg.path_sort, cfg.modulations, cfg.k_spectral);
  cfg.env.validate(*net);
  return net;
}

ModelConfig resolved_model_config(const ExperimentConfig& cfg, const std::shared_ptr<const Network>& net) {
  RmsaEnv env(net, cfg.env);
  return model_config_for(env, cfg.model);
}

std::string stamp_line(std::uint64_t config_hash, std::uint64_t seed) {
  return "# config_hash=" + hex64(config_hash) + " seed=" + std::to_string(seed) + " version=" + kVersion;
}

NamedPolicy builtin_policy(const std::string& name) {
  if (name == "random") return {name, [](std::uint64_t seed) { return random_masked_policy(mix_seed(seed, 0x72616e64)); }};
  const HeuristicKind kind = parse_heuristic(name);
  return {to_string(kind), [kind](std::uint64_t) { return heuristic_policy(kind); }};
}

std::vector<BlockingRow> blocking_vs_load(std::span<const NamedPolicy> policies, std::shared_ptr<const Network> net,
                                          const EnvConfig& cfg, std::span<const double> loads,
                                          std::span<const std::uint64_t> seeds) {
  const std::size_t cells = policies.size() * loads.size() * seeds.size();
  std::vector<BlockingRow> rows(cells);
  parallel_for(cells, [&](std::size_t i) {
    const auto& pol = policies[i / (loads.size() * seeds.size())];
    const double load = loads[(i / seeds.size()) % loads.size()];
    const std::uint64_t seed = seeds[i % seeds.size()];
    EnvConfig c = cfg;
    c.load_erlang = load;
    const Metrics m = run_episode(pol.make(seed), net, c, seed);
    rows[i] = {pol.name, load, seed, m.sbp(), m.bitrate_blocking()};
  });
  return rows;
}

namespace {

void write_header(std::ostream& os, std::uint64_t config_hash, std::uint64_t seed, const char* columns) {
  os << stamp_line(config_hash, seed) << '\n' << columns << '\n';
  os << std::setprecision(10);
}

}  // namespace

void write_blocking_csv(std::ostream& os, std::span<const BlockingRow> rows, std::uint64_t config_hash,
                        std::uint64_t seed) {
  write_header(os, config_hash, seed, "policy,load_erlang,seed,sbp,bitrate_blocking");
  for (const auto& r : rows) {
    os << r.policy << ',' << r.load_erlang << ',' << r.seed << ',' << r.sbp << ',' << r.bitrate_blocking << '\n';
  }
}

std::vector<Request> generate_requests(const Network& net, const EnvConfig& cfg, std::uint64_t seed) {
  RequestStream stream(net, cfg, seed);
  std::vector<Request> out;
  out.reserve(static_cast<std::size_t>(cfg.total_requests()) + 1);
  // One extra request: the environment draws the next request after the last step.
  for (std::int64_t i = 0; i <= cfg.total_requests(); ++i) out.push_back(stream.next());
  return out;
}

std::vector<double> PairedEvalReport::mean_path_series(const Metrics& m) {
  std::vector<double> out;
  out.reserve(m.records.size());
  double sum = 0.0;
  std::int64_t n = 0;
  for (const auto& rec : m.records) {
    if (rec.accepted) {
      sum += rec.path_km;
      ++n;
    }
    out.push_back(n ? sum / static_cast<double>(n) : 0.0);
  }
  return out;
}

std::vector<std::pair<std::int64_t, double>> PairedEvalReport::path_deltas() const {
  std::vector<std::pair<std::int64_t, double>> out;
  const auto& ra = a.metrics.records;
  const auto& rb = b.metrics.records;
  for (std::size_t i = 0; i < std::min(ra.size(), rb.size()); ++i) {
    if (ra[i].accepted && rb[i].accepted) out.emplace_back(ra[i].req_id, rb[i].path_km - ra[i].path_km);
  }
  return out;
}

PairedEvalReport paired_eval(const NamedPolicy& a, const NamedPolicy& b, std::shared_ptr<const Network> net,
                             const EnvConfig& cfg, std::uint64_t seed) {
  EnvConfig c = cfg;
  c.record_requests = true;
  c.track_occupancy = true;
  const std::vector<Request> stream = generate_requests(*net, c, seed);
  PairedEvalReport rep;
  rep.seed = seed;
  rep.num_fsu = c.num_fsu;
  auto run = [&](const NamedPolicy& p, std::uint64_t& hash) {
    std::vector<Request> copy = stream;
    hash = hash_requests(copy);
    RmsaEnv env(net, c);
    env.reset(std::move(copy));
    return PolicyRun{p.name, run_episode(p.make(seed), env)};
  };
  rep.a = run(a, rep.stream_hash_a);
  rep.b = run(b, rep.stream_hash_b);
  return rep;
}

void write_paired_requests_csv(std::ostream& os, const PairedEvalReport& r, std::uint64_t config_hash) {
  write_header(os, config_hash, r.seed, "req_id,policy,accepted,path_km,path_hops,path_index,start_fsu");
  for (const PolicyRun* run : {&r.a, &r.b}) {
    for (const auto& rec : run->metrics.records) {
      os << rec.req_id << ',' << run->policy << ',' << (rec.accepted ? 1 : 0) << ',' << rec.path_km << ','
         << rec.path_hops << ',' << rec.path_index << ',' << rec.start_fsu << '\n';
    }
  }
}

void write_link_usage_csv(std::ostream& os, const PairedEvalReport& r, std::uint64_t config_hash) {
  write_header(os, config_hash, r.seed, "link_id,policy,count");
  for (const PolicyRun* run : {&r.a, &r.b}) {
    for (std::size_t e = 0; e < run->metrics.link_usage.size(); ++e) {
      os << e << ',' << run->policy << ',' << run->metrics.link_usage[e] << '\n';
    }
  }
}

void write_occupancy_csv(std::ostream& os, const PairedEvalReport& r, std::uint64_t config_hash) {
  write_header(os, config_hash, r.seed, "link_id,fsu,policy,time_integral");
  for (const PolicyRun* run : {&r.a, &r.b}) {
    const auto& occ = run->metrics.occupancy_integral;
    for (std::size_t i = 0; i < occ.size(); ++i) {
      os << i / static_cast<std::size_t>(r.num_fsu) << ',' << i % static_cast<std::size_t>(r.num_fsu) << ','
         << run->policy << ',' << occ[i] << '\n';
    }
  }
}

void write_path_series_csv(std::ostream& os, const PairedEvalReport& r, std::uint64_t config_hash) {
  write_header(os, config_hash, r.seed, "index,policy,mean_path_km");
  for (const PolicyRun* run : {&r.a, &r.b}) {
    const auto s = PairedEvalReport::mean_path_series(run->metrics);
    for (std::size_t i = 0; i < s.size(); ++i) os << i << ',' << run->policy << ',' << s[i] << '\n';
  }
}

std::vector<SeriesPoint> bitrate_blocking_series(const Metrics& m, int window) {
  if (window < 1) throw ConfigError("series window must be positive");
  std::vector<SeriesPoint> out;
  out.reserve(m.records.size());
  double offered = 0.0, blocked = 0.0, w_offered = 0.0, w_blocked = 0.0;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& rec = m.records[i];
    offered += rec.bitrate_gbps;
    w_offered += rec.bitrate_gbps;
    if (!rec.accepted) {
      blocked += rec.bitrate_gbps;
      w_blocked += rec.bitrate_gbps;
    }
    if (i >= static_cast<std::size_t>(window)) {
      const auto& old = m.records[i - static_cast<std::size_t>(window)];
      w_offered -= old.bitrate_gbps;
      if (!old.accepted) w_blocked -= old.bitrate_gbps;
    }
    out.push_back({static_cast<std::int64_t>(i), offered > 0 ? blocked / offered : 0.0,
                   w_offered > 0 ? w_blocked / w_offered : 0.0});
  }
  return out;
}

std::vector<SeriesPoint> bitrate_blocking_series(const Policy& policy, std::shared_ptr<const Network> net,
                                                 const EnvConfig& cfg, std::uint64_t seed, int window) {
  EnvConfig c = cfg;
  c.record_requests = true;
  return bitrate_blocking_series(run_episode(policy, std::move(net), c, seed), window);
}

void write_series_csv(std::ostream& os, std::span<const SeriesPoint> s, std::uint64_t config_hash, std::uint64_t seed) {
  write_header(os, config_hash, seed, "index,cumulative,windowed");
  for (const auto& p : s) os << p.index << ',' << p.cumulative << ',' << p.windowed << '\n';
}

}  // namespace rmsa
