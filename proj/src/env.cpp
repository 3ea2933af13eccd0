#include "rmsa/env.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rmsa {

Eigen::MatrixXd Network::link_coordinates() const {
  return link_basis.eigenvectors * std::sqrt(static_cast<double>(link_basis.eigenvectors.rows()));
}

Eigen::MatrixXd Network::node_coordinates() const {
  return node_basis.eigenvectors * std::sqrt(static_cast<double>(node_basis.eigenvectors.rows()));
}

std::shared_ptr<const Network> make_network(Topology topology, int k, PathSort sort, ModulationTable modulations,
                                            int k_spectral) {
  modulations.validate();
  auto net = std::make_shared<Network>();
  net->k_spectral = std::min({k_spectral, topology.num_edges(), topology.num_nodes()});
  if (net->k_spectral < 1) throw ConfigError("k_spectral must be at least 1");
  net->paths = yen_k_shortest_paths(topology, k, sort);
  net->paths.assign_modulations(modulations);
  net->link_basis = spectral_basis(build_line_graph(topology), net->k_spectral);
  net->node_basis = spectral_basis(node_laplacian(topology), net->k_spectral);
  net->modulations = std::move(modulations);
  net->topology = std::move(topology);
  return net;
}

void EnvConfig::validate(const Network& net) const {
  if (num_fsu < 1 || num_fsu > kMaxFsu) throw ConfigError("num_fsu must lie in [1, 512]");
  if (slot_aggregation < 1 || num_fsu % slot_aggregation != 0) {
    throw ConfigError("num_fsu must be divisible by slot_aggregation");
  }
  if (!(load_erlang > 0.0)) throw ConfigError("load_erlang must be positive");
  if (!(mean_holding_time > 0.0)) throw ConfigError("mean_holding_time must be positive");
  if (bitrates.empty()) throw ConfigError("bitrate distribution is empty");
  for (const auto& b : bitrates) {
    if (!(b.gbps > 0.0) || !(b.weight > 0.0)) throw ConfigError("bitrates and weights must be positive");
  }
  if (episode_length < 1 || warmup_requests < 0) throw ConfigError("invalid episode length or warm-up");
  if (guardband_fsu < 0) throw ConfigError("guardband must be non-negative");
  if (!(occupancy_clip > 0.0)) throw ConfigError("occupancy clip must be positive");
  const int n = net.topology.num_nodes();
  if (traffic_matrix.size() != 0) {
    if (traffic_matrix.rows() != n || traffic_matrix.cols() != n) throw ConfigError("traffic matrix shape mismatch");
    if ((traffic_matrix.array() < 0.0).any() || traffic_matrix.diagonal().cwiseAbs().maxCoeff() > 0.0 ||
        !(traffic_matrix.sum() > 0.0)) {
      throw ConfigError("traffic matrix must be non-negative with a zero diagonal and positive total");
    }
  }
}

RequestStream::RequestStream(const Network& net, const EnvConfig& cfg, std::uint64_t seed)
    : num_nodes_(net.topology.num_nodes()), arrival_rate_(cfg.load_erlang / cfg.mean_holding_time),
      mean_holding_(cfg.mean_holding_time), bitrates_(cfg.bitrates), rng_(mix_seed(seed, 0x7261666669630001ULL)) {
  for (const auto& b : bitrates_) bitrate_total_ += b.weight;
  if (cfg.traffic_matrix.size() != 0) {
    pair_cdf_.reserve(static_cast<std::size_t>(num_nodes_ * num_nodes_));
    double acc = 0.0;
    for (int s = 0; s < num_nodes_; ++s) {
      for (int d = 0; d < num_nodes_; ++d) {
        acc += cfg.traffic_matrix(s, d);
        pair_cdf_.push_back(acc);
      }
    }
    for (auto& c : pair_cdf_) c /= acc;
  }
}

Request RequestStream::next() {
  Request r;
  r.id = next_id_++;
  clock_ += rng_.exponential(arrival_rate_);
  r.arrival_time = clock_;
  r.holding_time = rng_.exponential(1.0 / mean_holding_);
  if (pair_cdf_.empty()) {
    const auto n = static_cast<std::uint64_t>(num_nodes_);
    r.source = static_cast<int>(rng_.below(n));
    const int other = static_cast<int>(rng_.below(n - 1));
    r.destination = other >= r.source ? other + 1 : other;
  } else {
    const double u = rng_.uniform();
    auto it = std::upper_bound(pair_cdf_.begin(), pair_cdf_.end(), u);
    auto idx = static_cast<int>(std::min<std::ptrdiff_t>(it - pair_cdf_.begin(), static_cast<std::ptrdiff_t>(pair_cdf_.size()) - 1));
    // Skip zero-weight entries that upper_bound can land on only at the tail.
    while (pair_cdf_[static_cast<std::size_t>(idx)] <= u && idx + 1 < static_cast<int>(pair_cdf_.size())) ++idx;
    r.source = idx / num_nodes_;
    r.destination = idx % num_nodes_;
    rng_.below(2);  // keep the draw count equal to the uniform branch
  }
  double pick = rng_.uniform() * bitrate_total_;
  r.bitrate_gbps = bitrates_.back().gbps;
  for (const auto& b : bitrates_) {
    if (pick < b.weight) {
      r.bitrate_gbps = b.gbps;
      break;
    }
    pick -= b.weight;
  }
  return r;
}

std::uint64_t hash_requests(const std::vector<Request>& requests) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& r : requests) {
    h = fnv1a_value(r.id, h);
    h = fnv1a_value(r.source, h);
    h = fnv1a_value(r.destination, h);
    h = fnv1a_value(r.bitrate_gbps, h);
    h = fnv1a_value(r.arrival_time, h);
    h = fnv1a_value(r.holding_time, h);
  }
  return h;
}

double Metrics::mean_path_km() const {
  return path_km.empty() ? 0.0 : std::accumulate(path_km.begin(), path_km.end(), 0.0) / static_cast<double>(path_km.size());
}

double Metrics::mean_path_hops() const {
  return path_hops.empty() ? 0.0
                           : static_cast<double>(std::accumulate(path_hops.begin(), path_hops.end(), 0LL)) /
                                 static_cast<double>(path_hops.size());
}

std::optional<int> first_fit_start(const SpectrumGrid& grid, std::span<const int> path_edges, int subband_index,
                                   int slot_aggregation, int width) {
  const int lo = subband_index * slot_aggregation;
  return first_fit_in(grid.path_busy(path_edges), grid.num_fsu(), width, lo, lo + slot_aggregation - 1);
}

RmsaEnv::RmsaEnv(std::shared_ptr<const Network> net, EnvConfig cfg)
    : net_(std::move(net)), cfg_(std::move(cfg)), k_(net_->k()), num_subbands_(cfg_.num_subbands()),
      grid_(net_->topology.num_edges(), cfg_.num_fsu) {
  cfg_.validate(*net_);
  max_bitrate_ = 0.0;
  for (const auto& b : cfg_.bitrates) max_bitrate_ = std::max(max_bitrate_, b.gbps);
}

const std::vector<Path>& RmsaEnv::candidate_paths() const {
  return net_->paths.paths(request_.source, request_.destination);
}

std::optional<int> RmsaEnv::width_on_path(const Request& r, int k) const {
  const auto& paths = net_->paths.paths(r.source, r.destination);
  if (k < 0 || k >= static_cast<int>(paths.size())) return std::nullopt;
  const auto& mod = paths[static_cast<std::size_t>(k)].modulation;
  if (!mod) return std::nullopt;
  return required_fsus(r.bitrate_gbps, net_->modulations.formats[*mod], net_->modulations.slot_width_ghz,
                       cfg_.guardband_fsu);
}

std::optional<int> RmsaEnv::width_on_path(int k) const { return width_on_path(request_, k); }

void RmsaEnv::reset(std::uint64_t seed) {
  stream_.emplace(*net_, cfg_, seed);
  replay_.clear();
  replay_pos_ = 0;
  grid_.clear();
  active_.clear();
  expiries_ = {};
  processed_ = 0;
  metrics_ = Metrics{};
  metrics_.link_usage.assign(static_cast<std::size_t>(net_->topology.num_edges()), 0);
  if (cfg_.track_occupancy) {
    metrics_.occupancy_integral.assign(static_cast<std::size_t>(net_->topology.num_edges() * cfg_.num_fsu), 0.0);
  }
  request_ = stream_->next();
  now_ = request_.arrival_time;
  measure_start_ = now_;
  mask_ = compute_mask(request_);
}

void RmsaEnv::reset(std::vector<Request> replay) {
  if (replay.empty()) throw Error("reset: replay sequence is empty");
  reset(std::uint64_t{0});
  stream_.reset();
  replay_ = std::move(replay);
  replay_pos_ = 1;
  request_ = replay_.front();
  now_ = request_.arrival_time;
  measure_start_ = now_;
  mask_ = compute_mask(request_);
}

ActionMask RmsaEnv::compute_mask(const Request& r) const {
  ActionMask m;
  m.valid.assign(static_cast<std::size_t>(num_actions()), 0);
  const auto& paths = net_->paths.paths(r.source, r.destination);
  const int usable = std::min<int>(k_, static_cast<int>(paths.size()));
  for (int k = 0; k < usable; ++k) {
    const auto width = width_on_path(r, k);
    if (!width) continue;
    const SlotMask busy = grid_.path_busy(paths[static_cast<std::size_t>(k)].edges);
    for (int sb = 0; sb < num_subbands_; ++sb) {
      const int lo = sb * cfg_.slot_aggregation;
      if (first_fit_in(busy, cfg_.num_fsu, *width, lo, lo + cfg_.slot_aggregation - 1)) {
        m.valid[static_cast<std::size_t>(k * num_subbands_ + sb)] = 1;
        ++m.valid_count;
      }
    }
  }
  return m;
}

TokenBatch RmsaEnv::observe() const {
  const Network& net = *net_;
  const int tokens = net.topology.num_edges();
  const int ks = net.k_spectral;
  const int f = cfg_.num_fsu;
  TokenBatch tb;
  tb.features = Eigen::MatrixXf::Zero(tokens, token_feature_width(f, ks, k_));
  const float clip = static_cast<float>(cfg_.occupancy_clip);
  const double inv_hold = 1.0 / cfg_.mean_holding_time;
  for (int e = 0; e < tokens; ++e) {
    const SlotMask& busy = grid_.busy(e);
    for (int s = 0; s < f; ++s) {
      if (!busy.test(s)) continue;
      const double remaining = std::max(0.0, grid_.expiry(e, s) - now_) * inv_hold;
      tb.features(e, s) = std::min(static_cast<float>(remaining), clip);
    }
  }
  const Eigen::MatrixXf link = net.link_coordinates().cast<float>();
  const Eigen::MatrixXf node = net.node_coordinates().cast<float>();
  tb.features.middleCols(f, ks) = link;
  tb.features.middleCols(f + ks, ks).rowwise() = node.row(request_.source);
  tb.features.middleCols(f + 2 * ks, ks).rowwise() = node.row(request_.destination);
  tb.features.col(f + 3 * ks).setConstant(static_cast<float>(request_.bitrate_gbps / max_bitrate_));
  tb.spectral = link;
  const auto& paths = candidate_paths();
  tb.path_edges.assign(static_cast<std::size_t>(k_), {});
  for (int k = 0; k < k_ && k < static_cast<int>(paths.size()); ++k) {
    tb.path_edges[static_cast<std::size_t>(k)] = paths[static_cast<std::size_t>(k)].edges;
    for (int e : paths[static_cast<std::size_t>(k)].edges) tb.features(e, f + 3 * ks + 1 + k) = 1.0f;
  }
  return tb;
}

StepResult RmsaEnv::step(int flat_action) {
  if (flat_action < 0 || flat_action >= num_actions()) {
    throw Error("step: action " + std::to_string(flat_action) + " outside [0, " + std::to_string(num_actions()) + ")");
  }
  if (!mask_[flat_action]) return finish(request_, false, {});
  const Action a = Action::from_flat(flat_action, num_subbands_);
  const Path& path = candidate_paths()[static_cast<std::size_t>(a.path_index)];
  const int width = *width_on_path(a.path_index);
  const auto start = first_fit_start(grid_, path.edges, a.subband_index, cfg_.slot_aggregation, width);
  if (!start) throw Error("step: mask and first-fit disagree");  // unreachable while the mask is current
  Connection c{path.edges, *start, width, now_, request_.arrival_time + request_.holding_time};
  grid_.allocate(c.edges, c.start, c.width, request_.id, c.expiry);
  expiries_.emplace(c.expiry, request_.id);
  active_.emplace(request_.id, std::move(c));
  return finish(request_, true, {a.path_index, *start, width});
}

StepResult RmsaEnv::block() { return finish(request_, false, {}); }

StepResult RmsaEnv::finish(const Request& served, bool accepted, Allocation alloc) {
  StepResult out;
  out.accepted = accepted;
  out.reward = accepted ? 0.0 : -1.0;
  out.allocation = alloc;
  if (processed_ == cfg_.warmup_requests) measure_start_ = served.arrival_time;
  if (processed_ >= cfg_.warmup_requests) {
    Metrics& m = metrics_;
    ++m.offered;
    m.offered_gbps += served.bitrate_gbps;
    RequestRecord rec{served.id, accepted, served.bitrate_gbps, 0.0, 0, -1, -1};
    if (accepted) {
      ++m.accepted;
      const Path& p = candidate_paths()[static_cast<std::size_t>(alloc.path_index)];
      m.path_km.push_back(p.length_km);
      m.path_hops.push_back(p.hops);
      if (alloc.path_index == 0) ++m.shortest_path_used;
      for (int e : p.edges) ++m.link_usage[static_cast<std::size_t>(e)];
      rec.path_km = p.length_km;
      rec.path_hops = p.hops;
      rec.path_index = alloc.path_index;
      rec.start_fsu = alloc.start_fsu;
    } else {
      ++m.blocked;
      m.blocked_gbps += served.bitrate_gbps;
    }
    if (cfg_.record_requests) m.records.push_back(rec);
  }
  ++processed_;
  out.episode_done = processed_ >= cfg_.total_requests();
  advance();
  return out;
}

void RmsaEnv::advance() {
  if (stream_) {
    request_ = stream_->next();
  } else {
    if (replay_pos_ >= replay_.size()) return;
    request_ = replay_[replay_pos_++];
  }
  now_ = request_.arrival_time;
  release_expired(now_);
  mask_ = compute_mask(request_);
}

void RmsaEnv::release(std::int64_t id) {
  auto it = active_.find(id);
  if (it == active_.end()) return;
  const Connection& c = it->second;
  if (cfg_.track_occupancy && processed_ > cfg_.warmup_requests) {
    const double span = c.expiry - std::max(c.alloc_time, measure_start_);
    if (span > 0.0) {
      for (int e : c.edges) {
        for (int f = c.start; f < c.start + c.width; ++f) {
          metrics_.occupancy_integral[static_cast<std::size_t>(e * cfg_.num_fsu + f)] += span;
        }
      }
    }
  }
  grid_.release(c.edges, c.start, c.width);
  active_.erase(it);
}

int RmsaEnv::release_expired(double t) {
  int count = 0;
  while (!expiries_.empty() && expiries_.top().first <= t) {
    const auto id = expiries_.top().second;
    expiries_.pop();
    if (active_.contains(id)) {
      release(id);
      ++count;
    }
  }
  return count;
}

void RmsaEnv::close_metrics() {
  if (!cfg_.track_occupancy || processed_ <= cfg_.warmup_requests) return;
  for (const auto& [id, c] : active_) {
    const double span = std::min(c.expiry, now_) - std::max(c.alloc_time, measure_start_);
    if (span <= 0.0) continue;
    for (int e : c.edges) {
      for (int f = c.start; f < c.start + c.width; ++f) {
        metrics_.occupancy_integral[static_cast<std::size_t>(e * cfg_.num_fsu + f)] += span;
      }
    }
  }
}

void RmsaEnv::force_allocate(std::span<const int> edges, int start, int width, double expiry) {
  const std::int64_t id = forced_id_--;
  Connection c{std::vector<int>(edges.begin(), edges.end()), start, width, now_, expiry};
  grid_.allocate(c.edges, start, width, id, expiry);
  expiries_.emplace(expiry, id);
  active_.emplace(id, std::move(c));
  mask_ = compute_mask(request_);
}

Metrics run_episode(const Policy& policy, RmsaEnv& env) {
  const auto total = env.config().total_requests();
  while (env.requests_seen() < total) {
    const auto a = policy(env);
    if (a) {
      env.step(*a);
    } else {
      env.block();
    }
  }
  env.close_metrics();
  return env.metrics();
}

Metrics run_episode(const Policy& policy, std::shared_ptr<const Network> net, const EnvConfig& cfg,
                    std::uint64_t seed) {
  RmsaEnv env(std::move(net), cfg);
  env.reset(seed);
  return run_episode(policy, env);
}

Policy random_masked_policy(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](const RmsaEnv& env) -> std::optional<int> {
    const auto& m = env.mask();
    if (m.valid_count == 0) return std::nullopt;
    auto pick = static_cast<int>(rng->below(static_cast<std::uint64_t>(m.valid_count)));
    for (int a = 0; a < m.size(); ++a) {
      if (m[a] && pick-- == 0) return a;
    }
    return std::nullopt;
  };
}

}  // namespace rmsa
