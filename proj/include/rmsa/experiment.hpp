#pragma once

#include "rmsa/bounds.hpp"
#include "rmsa/env.hpp"
#include "rmsa/heuristics.hpp"
#include "rmsa/model.hpp"
#include "rmsa/ppo.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace rmsa {

/// Sectioned key/value document:
///
///   # comment
///   include = base.cfg
///   [env]
///   num_fsu = 20
///
/// Includes are resolved relative to the including file and applied before
/// the including file's own keys, which override them. File paths inside an
/// included file are relative to that file.
using ConfigDocument = std::map<std::string, std::map<std::string, std::string>>;

ConfigDocument parse_config_document(std::string_view text, const std::filesystem::path& base_dir = {});
ConfigDocument load_config_document(const std::filesystem::path& path);
/// Canonical text (sorted sections and keys); the hash is computed over it.
std::string canonical_text(const ConfigDocument& doc);

struct SweepConfig {
  std::vector<double> loads;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
  std::filesystem::path topology_path;
  int k_paths = 5;
  PathSort path_sort = PathSort::HopsThenKm;
  int k_spectral = 8;
  ModulationTable modulations = ModulationTable::standard();
  EnvConfig env;
  ModelConfig model;
  TrainConfig train;
  SweepConfig sweep;
  bool eval_greedy = true;
  int series_window = 1000;
  std::filesystem::path output_dir = "out";
  std::uint64_t hash = 0;
};

ExperimentConfig experiment_from_document(const ConfigDocument& doc, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment(const std::filesystem::path& path);

std::shared_ptr<const Network> build_network(const ExperimentConfig& cfg);
/// Model config completed with the observation layout of cfg's environment.
ModelConfig resolved_model_config(const ExperimentConfig& cfg, const std::shared_ptr<const Network>& net);

/// "# config_hash=<hex> seed=<n> version=<v>"
std::string stamp_line(std::uint64_t config_hash, std::uint64_t seed);

using PolicyFactory = std::function<Policy(std::uint64_t seed)>;

struct NamedPolicy {
  std::string name;
  PolicyFactory make;
};

/// Built-in policy names: ksp-ff, ff-ksp, random.
NamedPolicy builtin_policy(const std::string& name);

struct BlockingRow {
  std::string policy;
  double load_erlang = 0.0;
  std::uint64_t seed = 0;
  double sbp = 0.0;
  double bitrate_blocking = 0.0;
};

std::vector<BlockingRow> blocking_vs_load(std::span<const NamedPolicy> policies, std::shared_ptr<const Network> net,
                                          const EnvConfig& cfg, std::span<const double> loads,
                                          std::span<const std::uint64_t> seeds);

void write_blocking_csv(std::ostream& os, std::span<const BlockingRow> rows, std::uint64_t config_hash,
                        std::uint64_t seed);

/// Pre-generates the request stream of one episode.
std::vector<Request> generate_requests(const Network& net, const EnvConfig& cfg, std::uint64_t seed);

struct PolicyRun {
  std::string policy;
  Metrics metrics;  // with records and occupancy
};

struct PairedEvalReport {
  std::uint64_t seed = 0;
  std::uint64_t stream_hash_a = 0;
  std::uint64_t stream_hash_b = 0;
  PolicyRun a, b;
  int num_fsu = 0;

  /// Cumulative mean path km over accepted requests, one entry per request.
  static std::vector<double> mean_path_series(const Metrics& m);
  /// b minus a path km per request, for requests accepted by both.
  std::vector<std::pair<std::int64_t, double>> path_deltas() const;
};

PairedEvalReport paired_eval(const NamedPolicy& a, const NamedPolicy& b, std::shared_ptr<const Network> net,
                             const EnvConfig& cfg, std::uint64_t seed);

void write_paired_requests_csv(std::ostream& os, const PairedEvalReport& r, std::uint64_t config_hash);
void write_link_usage_csv(std::ostream& os, const PairedEvalReport& r, std::uint64_t config_hash);
void write_occupancy_csv(std::ostream& os, const PairedEvalReport& r, std::uint64_t config_hash);
void write_path_series_csv(std::ostream& os, const PairedEvalReport& r, std::uint64_t config_hash);

struct SeriesPoint {
  std::int64_t index = 0;
  double cumulative = 0.0;
  double windowed = 0.0;
};

/// Bitrate blocking per request index: cumulative and over the trailing window.
std::vector<SeriesPoint> bitrate_blocking_series(const Metrics& m, int window);
std::vector<SeriesPoint> bitrate_blocking_series(const Policy& policy, std::shared_ptr<const Network> net,
                                                 const EnvConfig& cfg, std::uint64_t seed, int window);

void write_series_csv(std::ostream& os, std::span<const SeriesPoint> s, std::uint64_t config_hash, std::uint64_t seed);

}  // namespace rmsa
