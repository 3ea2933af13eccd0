#include "rmsa/ppo.hpp"

#include <json.hpp>

#include <cmath>
#include <numeric>
#include <sstream>

namespace rmsa {

ScheduleKind parse_schedule(std::string_view s) {
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "constant") return ScheduleKind::Constant;
  throw ConfigError("unknown schedule '" + std::string(s) + "'");
}

std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Cosine:
      return "cosine";
    case ScheduleKind::Linear:
      return "linear";
    case ScheduleKind::Constant:
      return "constant";
  }
  return "constant";
}

double schedule_value(ScheduleKind kind, double t, double T, double start, double end_fraction) {
  switch (kind) {
    case ScheduleKind::Cosine:
      return start * 0.5 * (1.0 + std::cos(M_PI * std::min(T > 0 ? t / T : 1.0, 1.0)));
    case ScheduleKind::Linear: {
      const double end = end_fraction * T;
      return start * (1.0 - std::min(end > 0 ? t / end : 1.0, 1.0));
    }
    case ScheduleKind::Constant:
      return start;
  }
  return start;
}

void TrainConfig::validate() const {
  if (!(clip_eps > 0 && clip_eps < 1)) throw ConfigError("train: clip_eps must lie in (0, 1)");
  if (!(gamma > 0 && gamma <= 1)) throw ConfigError("train: gamma must lie in (0, 1]");
  if (!(gae_lambda >= 0 && gae_lambda <= 1)) throw ConfigError("train: gae_lambda must lie in [0, 1]");
  if (!(mu_target > 0 && mu_target <= 1)) throw ConfigError("train: mu_target must lie in (0, 1]");
  if (k_min < 1) throw ConfigError("train: k_min must be at least 1");
  if (rollout_length < 1 || num_envs < 1 || num_minibatches < 1 || epochs < 1) {
    throw ConfigError("train: rollout sizes must be positive");
  }
  if (num_minibatches > rollout_length * num_envs) throw ConfigError("train: more minibatches than transitions");
  if (total_timesteps < 1) throw ConfigError("train: total_timesteps must be positive");
  if (!(vm_end_fraction > 0 && vm_end_fraction <= 1)) throw ConfigError("train: vm_end_fraction must lie in (0, 1]");
  if (c_value < 0 || c_ent < 0 || c_vm < 0 || actor_lr < 0 || critic_lr < 0 || !(max_grad_norm > 0)) {
    throw ConfigError("train: coefficients and learning rates must be non-negative");
  }
  if (sbp_window < 1) throw ConfigError("train: sbp_window must be positive");
}

std::uint64_t TrainConfig::hash() const {
  std::uint64_t h = fnv1a("train-config");
  for (double v : {clip_eps, gamma, gae_lambda, c_value, c_ent, c_vm, vm_end_fraction, mu_target, actor_lr, critic_lr,
                   max_grad_norm, adam_beta1, adam_beta2, adam_eps}) {
    h = fnv1a_value(v, h);
  }
  for (int v : {static_cast<int>(ent_schedule), static_cast<int>(vm_schedule), static_cast<int>(lr_schedule), k_min,
                rollout_length, num_envs, num_minibatches, epochs, static_cast<int>(ablation.off_policy_iam),
                static_cast<int>(ablation.damping), static_cast<int>(ablation.gating), static_cast<int>(ablation.vml)}) {
    h = fnv1a_value(v, h);
  }
  h = fnv1a_value(total_timesteps, h);
  return fnv1a_value(seed, h);
}

Eigen::VectorXd gae(std::span<const double> rewards, std::span<const double> values, std::span<const char> dones,
                    double bootstrap, double gamma, double lambda) {
  const auto n = rewards.size();
  if (values.size() != n || dones.size() != n) throw Error("gae: length mismatch");
  Eigen::VectorXd adv(static_cast<Eigen::Index>(n));
  double next_adv = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double next_value = t + 1 == n ? bootstrap : values[t + 1];
    const double live = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * next_value * live - values[t];
    next_adv = delta + gamma * lambda * live * next_adv;
    adv(static_cast<Eigen::Index>(t)) = next_adv;
  }
  return adv;
}

void compute_gae(RolloutBuffer& buffer, double gamma, double lambda) {
  const auto L = static_cast<std::size_t>(buffer.length);
  std::vector<double> r(L), v(L);
  std::vector<char> d(L);
  for (int e = 0; e < buffer.num_envs; ++e) {
    for (int t = 0; t < buffer.length; ++t) {
      const auto& tr = buffer.at(t, e);
      r[static_cast<std::size_t>(t)] = tr.reward;
      v[static_cast<std::size_t>(t)] = tr.value;
      d[static_cast<std::size_t>(t)] = tr.done;
    }
    const Eigen::VectorXd adv = gae(r, v, d, buffer.bootstrap(e), gamma, lambda);
    for (int t = 0; t < buffer.length; ++t) {
      auto& tr = buffer.at(t, e);
      tr.advantage = adv(t);
      tr.ret = adv(t) + tr.value;
    }
  }
}

VecEnv::VecEnv(std::shared_ptr<const Network> net, const EnvConfig& cfg, int num_envs, std::uint64_t seed,
               int sbp_window)
    : episode_index_(static_cast<std::size_t>(num_envs), 0), seed_(seed),
      window_(static_cast<std::size_t>(sbp_window), 0) {
  envs_.reserve(static_cast<std::size_t>(num_envs));
  for (int i = 0; i < num_envs; ++i) {
    envs_.emplace_back(net, cfg);
    envs_.back().reset(mix_seed(mix_seed(seed_, static_cast<std::uint64_t>(i)), 0));
  }
}

void VecEnv::after_step(int i, const StepResult& r) {
  const char blocked = r.accepted ? 0 : 1;
  if (window_fill_ == window_.size()) {
    window_blocked_ -= window_[window_pos_];
  } else {
    ++window_fill_;
  }
  window_[window_pos_] = blocked;
  window_blocked_ += blocked;
  window_pos_ = (window_pos_ + 1) % window_.size();
  if (r.episode_done) {
    auto& ep = episode_index_[static_cast<std::size_t>(i)];
    ++ep;
    ++episodes_;
    envs_[static_cast<std::size_t>(i)].reset(
        mix_seed(mix_seed(seed_, static_cast<std::uint64_t>(i)), static_cast<std::uint64_t>(ep)));
  }
}

double VecEnv::rolling_sbp() const {
  return window_fill_ ? static_cast<double>(window_blocked_) / static_cast<double>(window_fill_) : 0.0;
}

RolloutBuffer collect_rollout(VecEnv& envs, const ActorParams<float>& actor, const CriticParams<float>& critic,
                              const ModelConfig& mcfg, const TrainConfig& cfg, std::vector<Rng>& rngs) {
  const int n = envs.size();
  if (static_cast<int>(rngs.size()) != n) throw Error("collect_rollout: one rng per env required");
  RolloutBuffer buf;
  buf.length = cfg.rollout_length;
  buf.num_envs = n;
  buf.steps.resize(static_cast<std::size_t>(buf.length * n));
  std::vector<TokenBatch> obs(static_cast<std::size_t>(n));
  std::vector<const TokenBatch*> ptrs(static_cast<std::size_t>(n));
  auto observe_all = [&] {
    for (int e = 0; e < n; ++e) {
      obs[static_cast<std::size_t>(e)] = envs.env(e).observe();
      ptrs[static_cast<std::size_t>(e)] = &obs[static_cast<std::size_t>(e)];
    }
    return stack_observations<float>(ptrs);
  };
  for (int t = 0; t < buf.length; ++t) {
    const BatchInput<float> in = observe_all();
    const MatrixX<float> logits = actor_forward(actor, mcfg, in);
    const VectorX<float> values = critic_forward(critic, mcfg, in);
    for (int e = 0; e < n; ++e) {
      RmsaEnv& env = envs.env(e);
      Transition& tr = buf.at(t, e);
      tr.mask = env.mask();
      tr.valid_count = tr.mask.valid_count;
      tr.value = values(e);
      const VectorX<float> row = logits.row(e).transpose();
      const auto dist = masked_distribution<float>(row, tr.mask);
      tr.mu = dist.mu;
      StepResult res;
      if (tr.valid_count == 0) {
        tr.action = -1;
        tr.logp_unmasked = dist.logp_unmasked(0);
        tr.logp_masked = 0.0;
        res = env.block();
      } else {
        tr.action = sample_action(dist, rngs[static_cast<std::size_t>(e)]);
        tr.logp_unmasked = dist.logp_unmasked(tr.action);
        tr.logp_masked = dist.logp_masked(tr.action);
        res = env.step(tr.action);
      }
      tr.reward = res.reward;
      tr.done = res.episode_done;
      tr.obs = std::move(obs[static_cast<std::size_t>(e)]);
      envs.after_step(e, res);
    }
  }
  const BatchInput<float> last = observe_all();
  buf.bootstrap = critic_forward(critic, mcfg, last).cast<double>();
  return buf;
}

template <typename S>
LossBreakdown ppo_losses(const ActorParams<S>& actor, const CriticParams<S>& critic, const ModelConfig& mcfg,
                         std::span<const Transition* const> batch, const TrainConfig& cfg, const LossCoefficients& coef,
                         ActorParams<S>* actor_grad, CriticParams<S>* critic_grad, const GradTerms& terms) {
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw Error("ppo_losses: empty minibatch");
  std::vector<const TokenBatch*> obs(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) obs[i] = &batch[i]->obs;
  const BatchInput<S> in = stack_observations<S>(obs);
  ActorCache<S> acache;
  CriticCache<S> ccache;
  const MatrixX<S> logits = actor_forward(actor, mcfg, in, &acache);
  const VectorX<S> values = critic_forward(critic, mcfg, in, &ccache);

  const Ablation& ab = cfg.ablation;
  auto gated = [&](const Transition& t) {
    return t.valid_count == 0 || (ab.gating && t.valid_count < cfg.k_min);
  };

  // Advantage standardization over non-gated transitions.
  double mean = 0.0, sq = 0.0;
  int active = 0;
  for (const auto* t : batch) {
    if (gated(*t)) continue;
    mean += t->advantage;
    ++active;
  }
  if (active) mean /= active;
  for (const auto* t : batch) {
    if (!gated(*t)) sq += (t->advantage - mean) * (t->advantage - mean);
  }
  const double stdev = active > 1 ? std::sqrt(sq / active) : 0.0;

  int vm_count = 0;
  for (const auto* t : batch) vm_count += t->valid_count > 0 ? 1 : 0;

  LossBreakdown out;
  MatrixX<S> d_logits = MatrixX<S>::Zero(logits.rows(), logits.cols());
  VectorX<S> d_values = VectorX<S>::Zero(B);
  const double inv_b = 1.0 / B;
  int gated_count = 0, clipped = 0;
  double mu_sum = 0.0;
  for (int b = 0; b < B; ++b) {
    const Transition& t = *batch[static_cast<std::size_t>(b)];
    const double err = t.ret - static_cast<double>(values(b));
    out.value += err * err * inv_b;
    d_values(b) = static_cast<S>(-2.0 * err * inv_b * cfg.c_value);
    if (t.valid_count == 0) {
      ++gated_count;
      continue;
    }
    const VectorX<S> row = logits.row(b).transpose();
    const auto dist = masked_distribution<S>(row, t.mask);
    const VectorX<S> p_u = dist.logp_unmasked.array().exp();
    const double mu = dist.mu;
    mu_sum += mu;

    double w = ab.damping ? std::clamp(mu / cfg.mu_target, 0.0, 1.0) : 1.0;
    if (gated(t)) {
      w = 0.0;
      ++gated_count;
    }
    out.mean_w += w;

    const double adv = active > 0 ? (stdev > 0 ? (t.advantage - mean) / (stdev + 1e-8) : t.advantage - mean) : 0.0;
    const double lp_new = ab.off_policy_iam ? dist.logp_unmasked(t.action) : dist.logp_masked(t.action);
    const double lp_old = ab.off_policy_iam ? t.logp_unmasked : t.logp_masked;
    const double ratio = std::exp(lp_new - lp_old);
    const double surr1 = ratio * adv;
    const double surr2 = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
    out.actor += -w * std::min(surr1, surr2) * inv_b;
    if (w > 0 && std::abs(ratio - 1.0) > cfg.clip_eps) ++clipped;
    VectorX<S> g = VectorX<S>::Zero(row.size());
    if (terms.actor && w > 0 && surr1 <= surr2) {
      // d(-w r A)/d logits = -w r A (e_a - p)
      const double scale = -w * ratio * adv * inv_b;
      g -= static_cast<S>(scale) * (ab.off_policy_iam ? p_u : dist.p_masked);
      g(t.action) += static_cast<S>(scale);
    }

    const double h = masked_entropy(dist);
    out.mean_entropy += h * inv_b;
    out.entropy += -coef.c_ent * w * h * inv_b;
    if (terms.entropy && w > 0 && coef.c_ent > 0) {
      // dH/dl_j = -p_j (log p_j + H) on valid actions.
      const double scale = -coef.c_ent * w * inv_b;
      for (Eigen::Index a = 0; a < row.size(); ++a) {
        if (dist.p_masked(a) > S(0)) g(a) += static_cast<S>(scale * -dist.p_masked(a) * (dist.logp_masked(a) + h));
      }
    }

    if (ab.vml) {
      // Log space: -log mu stays finite and keeps its gradient however small mu
      // gets. A floor on mu would zero the gradient exactly where the barrier
      // has to pull mass back, and training then never recovers.
      out.valid_mass += -static_cast<double>(dist.log_mu) / vm_count;
      if (terms.valid_mass && coef.c_vm > 0) {
        // d(-log mu)/dl = p_unmasked - p_masked.
        g += static_cast<S>(coef.c_vm / vm_count) * (p_u - dist.p_masked);
      }
    }
    d_logits.row(b) = g.transpose();
  }
  const int non_forced = vm_count;
  out.mean_mu = non_forced ? mu_sum / non_forced : 0.0;
  out.mean_w = non_forced ? out.mean_w / non_forced : 0.0;
  out.gated_fraction = static_cast<double>(gated_count) / B;
  out.clip_fraction = active ? static_cast<double>(clipped) / active : 0.0;
  out.total = out.actor + cfg.c_value * out.value + out.entropy + coef.c_vm * out.valid_mass;
  if (!std::isfinite(out.total)) {
    std::ostringstream os;
    os << "non-finite loss: actor=" << out.actor << " value=" << out.value << " entropy=" << out.entropy
       << " valid_mass=" << out.valid_mass << " batch=" << B << " mean_mu=" << out.mean_mu
       << " adv_mean=" << mean << " adv_std=" << stdev;
    throw NonFiniteLoss(os.str());
  }
  if (actor_grad) actor_backward(actor, mcfg, in, acache, d_logits, *actor_grad);
  if (critic_grad) {
    if (!terms.value) d_values.setZero();
    critic_backward(critic, mcfg, in, ccache, d_values, *critic_grad);
  }
  return out;
}

template <typename S>
void Adam<S>::step(VectorX<S>& params, const VectorX<S>& grad, double lr) {
  if (m_.size() != params.size()) {
    m_ = VectorX<S>::Zero(params.size());
    v_ = VectorX<S>::Zero(params.size());
  }
  ++t_;
  m_ = static_cast<S>(beta1_) * m_ + static_cast<S>(1.0 - beta1_) * grad;
  v_ = static_cast<S>(beta2_) * v_ + static_cast<S>(1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto step = static_cast<S>(lr / c1);
  const auto root = static_cast<S>(1.0 / std::sqrt(c2));
  params.array() -= step * m_.array() / (v_.array().sqrt() * root + static_cast<S>(eps_));
}

template <typename S>
void Adam<S>::restore(VectorX<S> m, VectorX<S> v, std::int64_t t) {
  if (m.size() != v.size()) throw Error("Adam::restore: moment sizes differ");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

template <typename S>
double clip_grad_norm(VectorX<S>& grad, double max_norm) {
  const double norm = std::sqrt(grad.template cast<double>().squaredNorm());
  if (norm > max_norm) grad *= static_cast<S>(max_norm / (norm + 1e-12));
  return norm;
}

TrainState init_train_state(const ModelConfig& mcfg, const TrainConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, 0x696e6974));
  TrainState s;
  s.actor = init_actor<float>(mcfg, rng);
  s.critic = init_critic<float>(mcfg, rng);
  s.actor_opt = Adam<float>(parameter_count(s.actor), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  s.critic_opt = Adam<float>(parameter_count(s.critic), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  return s;
}

LossBreakdown update(TrainState& state, const ModelConfig& mcfg, RolloutBuffer& buffer, const TrainConfig& cfg,
                     Rng& shuffle_rng) {
  const double T = static_cast<double>(cfg.total_timesteps);
  const double t = static_cast<double>(state.step);
  LossCoefficients coef;
  coef.c_ent = schedule_value(cfg.ent_schedule, t, T, cfg.c_ent);
  coef.c_vm = cfg.ablation.vml ? schedule_value(cfg.vm_schedule, t, T, cfg.c_vm, cfg.vm_end_fraction) : 0.0;
  const double lr_a = schedule_value(cfg.lr_schedule, t, T, cfg.actor_lr);
  const double lr_c = schedule_value(cfg.lr_schedule, t, T, cfg.critic_lr);

  const std::size_t n = buffer.steps.size();
  std::vector<std::size_t> order(n);
  LossBreakdown avg;
  int count = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    for (int mb = 0; mb < cfg.num_minibatches; ++mb) {
      const std::size_t lo = n * static_cast<std::size_t>(mb) / static_cast<std::size_t>(cfg.num_minibatches);
      const std::size_t hi = n * static_cast<std::size_t>(mb + 1) / static_cast<std::size_t>(cfg.num_minibatches);
      std::vector<const Transition*> batch;
      batch.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&buffer.steps[order[i]]);
      ActorParams<float> ga = zeros_like(state.actor);
      CriticParams<float> gc = zeros_like(state.critic);
      LossBreakdown lb = ppo_losses<float>(state.actor, state.critic, mcfg, batch, cfg, coef, &ga, &gc);
      VectorX<float> ga_flat = flatten(ga);
      VectorX<float> gc_flat = flatten(gc);
      lb.grad_norm_actor = clip_grad_norm(ga_flat, cfg.max_grad_norm);
      lb.grad_norm_critic = clip_grad_norm(gc_flat, cfg.max_grad_norm);
      VectorX<float> pa = flatten(state.actor);
      VectorX<float> pc = flatten(state.critic);
      state.actor_opt.step(pa, ga_flat, lr_a);
      state.critic_opt.step(pc, gc_flat, lr_c);
      unflatten(state.actor, pa);
      unflatten(state.critic, pc);
      if (!mcfg.wire) {
        for (auto& L : state.actor.trunk.layers) L.wire.setZero();
        for (auto& L : state.critic.trunk.layers) L.wire.setZero();
      }
      avg.actor += lb.actor;
      avg.value += lb.value;
      avg.entropy += lb.entropy;
      avg.valid_mass += lb.valid_mass;
      avg.total += lb.total;
      avg.mean_entropy += lb.mean_entropy;
      avg.mean_mu += lb.mean_mu;
      avg.mean_w += lb.mean_w;
      avg.gated_fraction += lb.gated_fraction;
      avg.clip_fraction += lb.clip_fraction;
      avg.grad_norm_actor += lb.grad_norm_actor;
      avg.grad_norm_critic += lb.grad_norm_critic;
      ++count;
    }
  }
  for (double* f : {&avg.actor, &avg.value, &avg.entropy, &avg.valid_mass, &avg.total, &avg.mean_entropy,
                    &avg.mean_mu, &avg.mean_w, &avg.gated_fraction, &avg.clip_fraction, &avg.grad_norm_actor,
                    &avg.grad_norm_critic}) {
    *f /= count;
  }
  ++state.update;
  return avg;
}

std::string to_json_line(const UpdateLog& log) {
  nlohmann::json j;
  j["update"] = log.update;
  j["step"] = log.step;
  j["sbp_rolling"] = log.sbp_rolling;
  j["actor_loss"] = log.loss.actor;
  j["value_loss"] = log.loss.value;
  j["entropy_loss"] = log.loss.entropy;
  j["valid_mass_loss"] = log.loss.valid_mass;
  j["total_loss"] = log.loss.total;
  j["entropy"] = log.loss.mean_entropy;
  j["mean_mu"] = log.loss.mean_mu;
  j["mean_mu_behavior"] = log.mean_mu_behavior;
  j["mean_w"] = log.loss.mean_w;
  j["gated_frac"] = log.loss.gated_fraction;
  j["clip_frac"] = log.loss.clip_fraction;
  j["grad_norm_actor"] = log.loss.grad_norm_actor;
  j["grad_norm_critic"] = log.loss.grad_norm_critic;
  j["lr"] = log.lr_actor;
  j["lr_critic"] = log.lr_critic;
  j["c_ent"] = log.c_ent;
  j["c_vm"] = log.c_vm;
  return j.dump();
}

TrainState train(std::shared_ptr<const Network> net, const EnvConfig& env_cfg, const ModelConfig& mcfg,
                 const TrainConfig& cfg, const TrainOptions& opts, const TrainState* initial) {
  cfg.validate();
  mcfg.validate();
  env_cfg.validate(*net);
  TrainState state = init_train_state(mcfg, cfg);
  if (initial) {
    state.actor = initial->actor;
    state.critic = initial->critic;
    if (opts.resume_optimizer) {
      state.actor_opt = initial->actor_opt;
      state.critic_opt = initial->critic_opt;
    }
  }
  VecEnv envs(net, env_cfg, cfg.num_envs, mix_seed(cfg.seed, 0x656e7673), cfg.sbp_window);
  if (model_config_for(envs.env(0), mcfg).hash() != mcfg.hash()) {
    throw ConfigError("model config does not match the environment's observation layout");
  }
  std::vector<Rng> rngs;
  for (int e = 0; e < cfg.num_envs; ++e) rngs.emplace_back(mix_seed(cfg.seed, 0x73616d70ULL + static_cast<std::uint64_t>(e)));
  Rng shuffle(mix_seed(cfg.seed, 0x73687566));
  const std::int64_t per_update = static_cast<std::int64_t>(cfg.rollout_length) * cfg.num_envs;
  const double T = static_cast<double>(cfg.total_timesteps);
  while (state.step < cfg.total_timesteps) {
    RolloutBuffer buf = collect_rollout(envs, state.actor, state.critic, mcfg, cfg, rngs);
    compute_gae(buf, cfg.gamma, cfg.gae_lambda);
    double mu_b = 0.0;
    int live = 0;
    for (const auto& tr : buf.steps) {
      if (tr.valid_count > 0) {
        mu_b += tr.mu;
        ++live;
      }
    }
    UpdateLog log;
    log.step = state.step;
    log.c_ent = schedule_value(cfg.ent_schedule, static_cast<double>(state.step), T, cfg.c_ent);
    log.c_vm = cfg.ablation.vml
                   ? schedule_value(cfg.vm_schedule, static_cast<double>(state.step), T, cfg.c_vm, cfg.vm_end_fraction)
                   : 0.0;
    log.lr_actor = schedule_value(cfg.lr_schedule, static_cast<double>(state.step), T, cfg.actor_lr);
    log.lr_critic = schedule_value(cfg.lr_schedule, static_cast<double>(state.step), T, cfg.critic_lr);
    log.loss = update(state, mcfg, buf, cfg, shuffle);
    state.step += per_update;
    log.update = state.update;
    log.sbp_rolling = envs.rolling_sbp();
    log.mean_mu_behavior = live ? mu_b / live : 0.0;
    if (opts.log) *opts.log << to_json_line(log) << '\n';
    if (opts.on_update) opts.on_update(log);
  }
  if (opts.log) opts.log->flush();
  return state;
}

Policy model_policy(std::shared_ptr<const ActorParams<float>> actor, const ModelConfig& mcfg, bool greedy,
                    std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [actor = std::move(actor), mcfg, greedy, rng](const RmsaEnv& env) -> std::optional<int> {
    if (env.mask().valid_count == 0) return std::nullopt;
    const BatchInput<float> in = stack_observations<float>(env.observe());
    const MatrixX<float> logits = actor_forward(*actor, mcfg, in);
    const VectorX<float> row = logits.row(0).transpose();
    const auto dist = masked_distribution<float>(row, env.mask());
    return greedy ? greedy_action(dist) : sample_action(dist, *rng);
  };
}

template LossBreakdown ppo_losses<float>(const ActorParams<float>&, const CriticParams<float>&, const ModelConfig&,
                                         std::span<const Transition* const>, const TrainConfig&,
                                         const LossCoefficients&, ActorParams<float>*, CriticParams<float>*,
                                         const GradTerms&);
template LossBreakdown ppo_losses<double>(const ActorParams<double>&, const CriticParams<double>&, const ModelConfig&,
                                          std::span<const Transition* const>, const TrainConfig&,
                                          const LossCoefficients&, ActorParams<double>*, CriticParams<double>*,
                                          const GradTerms&);
template class Adam<float>;
template class Adam<double>;
template double clip_grad_norm<float>(VectorX<float>&, double);
template double clip_grad_norm<double>(VectorX<double>&, double);

}  // namespace rmsa
