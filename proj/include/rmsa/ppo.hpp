#pragma once

#include "rmsa/env.hpp"
#include "rmsa/model.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace rmsa {

enum class ScheduleKind { Cosine, Linear, Constant };

ScheduleKind parse_schedule(std::string_view s);
std::string to_string(ScheduleKind k);

/// Coefficient at step t of T. Linear decays to 0 at end_fraction * T.
double schedule_value(ScheduleKind kind, double t, double T, double start, double end_fraction = 1.0);

struct Ablation {
  bool off_policy_iam = true;  // false: ratios from masked log-probs
  bool damping = true;
  bool gating = true;
  bool vml = true;
};

struct TrainConfig {
  double clip_eps = 0.04;
  double gamma = 0.996;
  double gae_lambda = 0.99;
  double c_value = 0.1;
  double c_ent = 0.01;
  ScheduleKind ent_schedule = ScheduleKind::Cosine;
  double c_vm = 0.001;
  ScheduleKind vm_schedule = ScheduleKind::Linear;
  double vm_end_fraction = 0.5;
  double mu_target = 0.05;
  int k_min = 2;
  double actor_lr = 1.5e-3;
  double critic_lr = 5e-5;
  ScheduleKind lr_schedule = ScheduleKind::Cosine;
  int rollout_length = 64;
  int num_envs = 12;
  int num_minibatches = 4;
  int epochs = 4;
  std::int64_t total_timesteps = 2'000'000;
  double max_grad_norm = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int sbp_window = 10000;  // requests in the rolling blocking estimate
  Ablation ablation;

  void validate() const;
  std::uint64_t hash() const;
};

struct Transition {
  TokenBatch obs;
  ActionMask mask;
  int action = -1;  // -1 for forced blocks (no valid action)
  double reward = 0.0;
  bool done = false;
  double logp_unmasked = 0.0;  // behavior policy
  double logp_masked = 0.0;
  double value = 0.0;
  double mu = 0.0;
  int valid_count = 0;
  double advantage = 0.0;
  double ret = 0.0;
};

/// Time-major: step t of env e lives at t * num_envs + e.
struct RolloutBuffer {
  int length = 0;
  int num_envs = 0;
  std::vector<Transition> steps;
  Eigen::VectorXd bootstrap;  // V(s_T) per env

  Transition& at(int t, int e) { return steps[static_cast<std::size_t>(t * num_envs + e)]; }
  const Transition& at(int t, int e) const { return steps[static_cast<std::size_t>(t * num_envs + e)]; }
};

/// GAE over one stream. dones[t] cuts bootstrapping after step t.
Eigen::VectorXd gae(std::span<const double> rewards, std::span<const double> values, std::span<const char> dones,
                    double bootstrap, double gamma, double lambda);

/// Fills advantage and ret of every transition.
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda);

/// Parallel environments with automatic episode resets and a rolling
/// blocking estimate over the most recent requests.
class VecEnv {
 public:
  VecEnv(std::shared_ptr<const Network> net, const EnvConfig& cfg, int num_envs, std::uint64_t seed, int sbp_window);

  int size() const { return static_cast<int>(envs_.size()); }
  RmsaEnv& env(int i) { return envs_[static_cast<std::size_t>(i)]; }
  const RmsaEnv& env(int i) const { return envs_[static_cast<std::size_t>(i)]; }
  /// Records the outcome and resets the env when its episode ends.
  void after_step(int i, const StepResult& r);
  double rolling_sbp() const;
  std::int64_t episodes_finished() const { return episodes_; }

 private:
  std::vector<RmsaEnv> envs_;
  std::vector<std::int64_t> episode_index_;
  std::uint64_t seed_;
  std::vector<char> window_;
  std::size_t window_pos_ = 0;
  std::size_t window_fill_ = 0;
  std::int64_t window_blocked_ = 0;
  std::int64_t episodes_ = 0;
};

/// One rollout of cfg.rollout_length steps from every env. Sampling uses
/// one stream per env so results do not depend on stepping order.
RolloutBuffer collect_rollout(VecEnv& envs, const ActorParams<float>& actor, const CriticParams<float>& critic,
                              const ModelConfig& mcfg, const TrainConfig& cfg, std::vector<Rng>& rngs);

struct LossBreakdown {
  double actor = 0.0;
  double value = 0.0;
  double entropy = 0.0;     // already scaled by c_ent and the weights
  double valid_mass = 0.0;  // unscaled
  double total = 0.0;
  double mean_entropy = 0.0;
  double mean_mu = 0.0;
  double mean_w = 0.0;
  double gated_fraction = 0.0;
  double clip_fraction = 0.0;
  double grad_norm_actor = 0.0;
  double grad_norm_critic = 0.0;
};

struct LossCoefficients {
  double c_ent = 0.0;
  double c_vm = 0.0;
};

/// Which terms feed the returned gradients (all of them in training).
struct GradTerms {
  bool actor = true;
  bool value = true;
  bool entropy = true;
  bool valid_mass = true;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

/// Losses and gradients on one minibatch. The damping weight is treated as a
/// constant with respect to the parameters.
template <typename S>
LossBreakdown ppo_losses(const ActorParams<S>& actor, const CriticParams<S>& critic, const ModelConfig& mcfg,
                         std::span<const Transition* const> batch, const TrainConfig& cfg, const LossCoefficients& coef,
                         ActorParams<S>* actor_grad, CriticParams<S>* critic_grad, const GradTerms& terms = {});

/// First-order adaptive-moment optimizer over a flattened parameter vector.
template <typename S>
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index n, double beta1, double beta2, double eps)
      : m_(VectorX<S>::Zero(n)), v_(VectorX<S>::Zero(n)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(VectorX<S>& params, const VectorX<S>& grad, double lr);

  std::int64_t t() const { return t_; }
  const VectorX<S>& m() const { return m_; }
  const VectorX<S>& v() const { return v_; }
  void restore(VectorX<S> m, VectorX<S> v, std::int64_t t);

 private:
  VectorX<S> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
};

/// Scales grad to norm at most max_norm; returns the norm before clipping.
template <typename S>
double clip_grad_norm(VectorX<S>& grad, double max_norm);

struct TrainState {
  ActorParams<float> actor;
  CriticParams<float> critic;
  Adam<float> actor_opt;
  Adam<float> critic_opt;
  std::int64_t step = 0;  // environment steps taken
  std::int64_t update = 0;
};

TrainState init_train_state(const ModelConfig& mcfg, const TrainConfig& cfg);

/// Applies cfg.epochs passes of shuffled minibatch steps; returns the
/// minibatch-averaged breakdown.
LossBreakdown update(TrainState& state, const ModelConfig& mcfg, RolloutBuffer& buffer, const TrainConfig& cfg,
                     Rng& shuffle_rng);

struct UpdateLog {
  std::int64_t update = 0;
  std::int64_t step = 0;
  double sbp_rolling = 0.0;
  LossBreakdown loss;
  double lr_actor = 0.0;
  double lr_critic = 0.0;
  double c_ent = 0.0;
  double c_vm = 0.0;
  double mean_mu_behavior = 0.0;
};

std::string to_json_line(const UpdateLog& log);

struct TrainOptions {
  std::ostream* log = nullptr;  // NDJSON, one line per update
  std::function<void(const UpdateLog&)> on_update;
  bool resume_optimizer = false;
};

/// Runs collect/update until cfg.total_timesteps. Starting from `initial`
/// (if given) continues from its parameters with a fresh schedule.
TrainState train(std::shared_ptr<const Network> net, const EnvConfig& env_cfg, const ModelConfig& mcfg,
                 const TrainConfig& cfg, const TrainOptions& opts = {}, const TrainState* initial = nullptr);

/// Policy backed by an actor network; greedy or sampled from the masked distribution.
Policy model_policy(std::shared_ptr<const ActorParams<float>> actor, const ModelConfig& mcfg, bool greedy,
                    std::uint64_t seed = 0);

}  // namespace rmsa
