#pragma once

#include "rmsa/common.hpp"
#include "rmsa/spectrum.hpp"
#include "rmsa/topology.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <queue>
#include <span>
#include <unordered_map>
#include <vector>

namespace rmsa {

/// Immutable per-topology data shared by every environment instance.
struct Network {
  Topology topology;
  PathTable paths;
  ModulationTable modulations;
  SpectralBasis link_basis;  // line-graph eigenvectors, one row per edge token
  SpectralBasis node_basis;  // node-graph eigenvectors, for request encoding
  int k_spectral = 0;

  int k() const { return paths.k(); }
  /// Line-graph coordinates scaled to unit RMS, tokens x k_spectral.
  Eigen::MatrixXd link_coordinates() const;
  Eigen::MatrixXd node_coordinates() const;
};

std::shared_ptr<const Network> make_network(Topology topology, int k, PathSort sort,
                                            ModulationTable modulations = ModulationTable::standard(),
                                            int k_spectral = 8);

struct BitrateOption {
  double gbps = 100.0;
  double weight = 1.0;
};

struct EnvConfig {
  int num_fsu = 320;
  int slot_aggregation = 1;  // sub-band width in FSU
  double load_erlang = 100.0;
  double mean_holding_time = 1.0;
  std::vector<BitrateOption> bitrates{{100.0, 1.0}};
  /// Weights over ordered pairs (num_nodes x num_nodes, zero diagonal);
  /// empty means uniform over s != d.
  Eigen::MatrixXd traffic_matrix;
  /// Measured requests per episode; the warm-up precedes them.
  int episode_length = 10000;
  int warmup_requests = 0;
  int guardband_fsu = 0;
  double occupancy_clip = 2.0;
  bool track_occupancy = false;
  bool record_requests = false;

  int num_subbands() const { return num_fsu / slot_aggregation; }
  std::int64_t total_requests() const { return static_cast<std::int64_t>(warmup_requests) + episode_length; }
  void validate(const Network& net) const;
};

struct Request {
  std::int64_t id = 0;
  int source = 0;
  int destination = 0;
  double bitrate_gbps = 0.0;
  double arrival_time = 0.0;
  double holding_time = 0.0;

  bool operator==(const Request&) const = default;
};

/// Poisson arrivals with exponential holding times. The stream depends only
/// on (config, seed), never on allocation decisions.
class RequestStream {
 public:
  RequestStream(const Network& net, const EnvConfig& cfg, std::uint64_t seed);
  Request next();

 private:
  int num_nodes_;
  double arrival_rate_;
  double mean_holding_;
  std::vector<BitrateOption> bitrates_;
  double bitrate_total_ = 0.0;
  std::vector<double> pair_cdf_;  // empty for uniform
  Rng rng_;
  double clock_ = 0.0;
  std::int64_t next_id_ = 0;
};

std::uint64_t hash_requests(const std::vector<Request>& requests);

struct Action {
  int path_index = 0;
  int subband_index = 0;

  static Action from_flat(int flat, int num_subbands) { return {flat / num_subbands, flat % num_subbands}; }
  int flat(int num_subbands) const { return path_index * num_subbands + subband_index; }
};

struct ActionMask {
  std::vector<char> valid;
  int valid_count = 0;

  bool operator[](int a) const { return valid[static_cast<std::size_t>(a)] != 0; }
  int size() const { return static_cast<int>(valid.size()); }
};

/// Per-token observation. Feature columns are laid out as
/// [occupancy (num_fsu) | link spectral (k) | source spectral (k) |
///  destination spectral (k) | bitrate (1) | on candidate path (K)].
struct TokenBatch {
  Eigen::MatrixXf features;
  Eigen::MatrixXf spectral;  // tokens x k, the WiRE coordinates
  std::vector<std::vector<int>> path_edges;  // K entries, empty if the pair has fewer paths

  int num_tokens() const { return static_cast<int>(features.rows()); }
};

inline int token_feature_width(int num_fsu, int k_spectral, int k_paths) {
  return num_fsu + 3 * k_spectral + 1 + k_paths;
}

struct Allocation {
  int path_index = -1;
  int start_fsu = -1;
  int width = 0;
};

struct StepResult {
  double reward = 0.0;
  bool accepted = false;
  Allocation allocation;
  bool episode_done = false;
};

struct RequestRecord {
  std::int64_t req_id = 0;
  bool accepted = false;
  double bitrate_gbps = 0.0;
  double path_km = 0.0;
  int path_hops = 0;
  int path_index = -1;
  int start_fsu = -1;
};

struct Metrics {
  std::int64_t offered = 0;
  std::int64_t accepted = 0;
  std::int64_t blocked = 0;
  double offered_gbps = 0.0;
  double blocked_gbps = 0.0;
  std::vector<std::int64_t> link_usage;    // per edge
  std::vector<double> occupancy_integral;  // edge * num_fsu + fsu
  std::vector<double> path_km;             // accepted requests
  std::vector<int> path_hops;
  std::int64_t shortest_path_used = 0;     // accepted on candidate path 0
  std::vector<RequestRecord> records;

  double sbp() const { return offered ? static_cast<double>(blocked) / static_cast<double>(offered) : 0.0; }
  double bitrate_blocking() const { return offered_gbps > 0 ? blocked_gbps / offered_gbps : 0.0; }
  double mean_path_km() const;
  double mean_path_hops() const;
  double shortest_path_fraction() const {
    return accepted ? static_cast<double>(shortest_path_used) / static_cast<double>(accepted) : 0.0;
  }
};

/// First-fit start for a path inside one sub-band: smallest s with
/// lo <= s < lo + aggregation, [s, s + width) free on every edge and
/// s + width <= num_fsu.
std::optional<int> first_fit_start(const SpectrumGrid& grid, std::span<const int> path_edges, int subband_index,
                                   int slot_aggregation, int width);

/// Discrete-event dynamic RMSA environment. Single owner, not thread-safe;
/// independent instances share only the immutable Network.
class RmsaEnv {
 public:
  RmsaEnv(std::shared_ptr<const Network> net, EnvConfig cfg);

  /// Greenfield reset; draws the first request.
  void reset(std::uint64_t seed);
  /// Reset replaying a fixed request sequence instead of sampling.
  void reset(std::vector<Request> replay);

  StepResult step(int flat_action);
  /// Blocks the current request without an action.
  StepResult block();

  const Request& request() const { return request_; }
  const ActionMask& mask() const { return mask_; }
  TokenBatch observe() const;

  int num_actions() const { return k_ * num_subbands_; }
  int num_subbands() const { return num_subbands_; }
  int k() const { return k_; }
  double now() const { return now_; }
  const SpectrumGrid& grid() const { return grid_; }
  const Network& network() const { return *net_; }
  const EnvConfig& config() const { return cfg_; }
  const std::vector<Path>& candidate_paths() const;
  /// FSU width of the current request on candidate path k (nullopt if unusable).
  std::optional<int> width_on_path(int k) const;
  std::optional<int> width_on_path(const Request& r, int k) const;

  const Metrics& metrics() const { return metrics_; }
  std::int64_t requests_seen() const { return processed_; }
  std::int64_t active_connections() const { return static_cast<std::int64_t>(active_.size()); }

  /// Releases every connection with expiry <= t; returns how many.
  int release_expired(double t);
  /// Recomputes the mask of the current request.
  ActionMask compute_mask(const Request& r) const;
  /// Finalizes occupancy integrals for still-active connections.
  void close_metrics();

  /// Mutation hook for tests: allocate a block for an arbitrary set of edges.
  void force_allocate(std::span<const int> edges, int start, int width, double expiry);

 private:
  struct Connection {
    std::vector<int> edges;
    int start = 0;
    int width = 0;
    double alloc_time = 0.0;
    double expiry = 0.0;
  };

  StepResult finish(const Request& served, bool accepted, Allocation alloc);
  void advance();
  void release(std::int64_t id);

  std::shared_ptr<const Network> net_;
  EnvConfig cfg_;
  int k_;
  int num_subbands_;
  double max_bitrate_;
  std::int64_t forced_id_ = -2;  // ids for force_allocate, never clash with requests
  std::optional<RequestStream> stream_;
  std::vector<Request> replay_;
  std::size_t replay_pos_ = 0;
  SpectrumGrid grid_;
  std::unordered_map<std::int64_t, Connection> active_;
  using Expiry = std::pair<double, std::int64_t>;
  std::priority_queue<Expiry, std::vector<Expiry>, std::greater<>> expiries_;
  Request request_;
  ActionMask mask_;
  double now_ = 0.0;
  double measure_start_ = 0.0;
  std::int64_t processed_ = 0;
  Metrics metrics_;
};

using Policy = std::function<std::optional<int>(const RmsaEnv&)>;

/// Runs one episode of cfg.episode_length requests after reset(seed);
/// metrics cover requests after the warm-up only.
Metrics run_episode(const Policy& policy, std::shared_ptr<const Network> net, const EnvConfig& cfg,
                    std::uint64_t seed);
Metrics run_episode(const Policy& policy, RmsaEnv& env);

/// Uniform choice among valid actions.
Policy random_masked_policy(std::uint64_t seed);

}  // namespace rmsa
