#pragma once

#include "rmsa/common.hpp"
#include "rmsa/env.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rmsa {

struct ModelConfig {
  int embed_dim = 128;
  int num_layers = 2;
  int num_heads = 8;
  int mlp_multiplier = 4;
  int head_hidden = 0;  // 0 means 3 * embed_dim
  int k_spectral = 8;
  int num_paths = 5;
  int num_subbands = 4;
  int feature_width = 0;  // token_feature_width(num_fsu, k_spectral, num_paths)
  double wire_scale_min = 0.1;
  double wire_scale_max = 10.0;
  bool wire = true;  // false fixes all rotation scales at zero

  int head_dim() const { return embed_dim / num_heads; }
  int hidden() const { return head_hidden > 0 ? head_hidden : 3 * embed_dim; }
  int num_actions() const { return num_paths * num_subbands; }
  void validate() const;
  std::uint64_t hash() const;
};

/// Config matching an environment's observation and action layout.
ModelConfig model_config_for(const RmsaEnv& env, ModelConfig base = {});

// All parameters are stored as matrices; biases and vectors are 1 x n.
template <typename S>
struct LayerParams {
  MatrixX<S> ln1_g, ln1_b;
  MatrixX<S> wq, bq, wk, bk, wv, bv, wo, bo;
  MatrixX<S> wire;  // (head_dim / 2) x k_spectral, shared by all heads
  MatrixX<S> ln2_g, ln2_b;
  MatrixX<S> w1, b1, w2, b2;
};

template <typename S>
struct TrunkParams {
  MatrixX<S> w_in, b_in;
  std::vector<LayerParams<S>> layers;
};

template <typename S>
struct ActorParams {
  TrunkParams<S> trunk;
  MatrixX<S> w1, b1, w2, b2;  // pooled path (3d) -> hidden -> num_subbands
};

template <typename S>
struct CriticParams {
  TrunkParams<S> trunk;
  MatrixX<S> query;  // 1 x d pooling query
  MatrixX<S> w1, b1, w2, b2, w3, b3;  // d -> hidden -> hidden -> 1
};

template <typename S, typename Fn>
void visit(TrunkParams<S>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + "in.w", p.w_in);
  fn(prefix + "in.b", p.b_in);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string n = prefix + "layer" + std::to_string(l) + ".";
    fn(n + "ln1.g", L.ln1_g);
    fn(n + "ln1.b", L.ln1_b);
    fn(n + "q.w", L.wq);
    fn(n + "q.b", L.bq);
    fn(n + "k.w", L.wk);
    fn(n + "k.b", L.bk);
    fn(n + "v.w", L.wv);
    fn(n + "v.b", L.bv);
    fn(n + "o.w", L.wo);
    fn(n + "o.b", L.bo);
    fn(n + "wire", L.wire);
    fn(n + "ln2.g", L.ln2_g);
    fn(n + "ln2.b", L.ln2_b);
    fn(n + "ff1.w", L.w1);
    fn(n + "ff1.b", L.b1);
    fn(n + "ff2.w", L.w2);
    fn(n + "ff2.b", L.b2);
  }
}

template <typename S, typename Fn>
void visit(ActorParams<S>& p, Fn&& fn) {
  visit(p.trunk, "trunk.", fn);
  fn("head1.w", p.w1);
  fn("head1.b", p.b1);
  fn("head2.w", p.w2);
  fn("head2.b", p.b2);
}

template <typename S, typename Fn>
void visit(CriticParams<S>& p, Fn&& fn) {
  visit(p.trunk, "trunk.", fn);
  fn("query", p.query);
  fn("value1.w", p.w1);
  fn("value1.b", p.b1);
  fn("value2.w", p.w2);
  fn("value2.b", p.b2);
  fn("value3.w", p.w3);
  fn("value3.b", p.b3);
}

template <typename P, typename Fn>
void visit_const(const P& p, Fn&& fn) {
  visit(const_cast<P&>(p), [&](const std::string& name, auto& m) { fn(name, std::as_const(m)); });
}

template <typename P>
std::int64_t parameter_count(const P& p) {
  std::int64_t n = 0;
  visit_const(p, [&](const std::string&, const auto& m) { n += m.size(); });
  return n;
}

/// Same shapes, all zeros.
template <typename P>
P zeros_like(const P& p) {
  P z = p;
  visit(z, [](const std::string&, auto& m) { m.setZero(); });
  return z;
}

/// Flattens in visiting order.
template <typename P, typename S = typename std::remove_reference_t<decltype(std::declval<P>().trunk.w_in)>::Scalar>
VectorX<S> flatten(const P& p) {
  VectorX<S> v(parameter_count(p));
  Eigen::Index off = 0;
  visit_const(p, [&](const std::string&, const auto& m) {
    v.segment(off, m.size()) = m.reshaped();
    off += m.size();
  });
  return v;
}

template <typename P, typename S>
void unflatten(P& p, const VectorX<S>& v) {
  Eigen::Index off = 0;
  visit(p, [&](const std::string&, auto& m) {
    m.reshaped() = v.segment(off, m.size());
    off += m.size();
  });
}

/// Converts a parameter tree to another scalar type.
template <typename To, template <class> class P, typename From>
P<To> cast_params(const P<From>& p) {
  P<To> out;
  out.trunk.layers.resize(p.trunk.layers.size());
  std::vector<MatrixX<To>*> dst;
  visit(out, [&](const std::string&, MatrixX<To>& m) { dst.push_back(&m); });
  std::size_t i = 0;
  visit_const(p, [&](const std::string&, const auto& m) { *dst[i++] = m.template cast<To>(); });
  return out;
}

template <typename S>
ActorParams<S> init_actor(const ModelConfig& cfg, Rng& rng);
template <typename S>
CriticParams<S> init_critic(const ModelConfig& cfg, Rng& rng);

/// Observations stacked sample-major: rows [b * tokens, (b + 1) * tokens).
template <typename S>
struct BatchInput {
  MatrixX<S> features;
  MatrixX<S> spectral;
  int batch = 0;
  int tokens = 0;
  std::vector<std::vector<std::vector<int>>> paths;  // [sample][path] -> token ids
};

template <typename S>
BatchInput<S> stack_observations(std::span<const TokenBatch* const> obs);
template <typename S>
BatchInput<S> stack_observations(const TokenBatch& obs);

/// Rotates consecutive pairs (2j, 2j+1) of each row of x by
/// theta(i, j) = sum_m scales(j, m) * coords(i, m).
template <typename S>
void apply_wire(Eigen::Ref<MatrixX<S>> x, const MatrixX<S>& coords, const MatrixX<S>& scales);

// Forward caches. Filled by the forward pass and consumed by backward.
template <typename S>
struct LayerNormCache {
  MatrixX<S> xhat;
  VectorX<S> inv_std;
};

template <typename S>
struct LayerCache {
  MatrixX<S> x, y, q, k, v, cos, sin, o, h1, z, u, a;
  LayerNormCache<S> ln1, ln2;
  std::vector<MatrixX<S>> probs;  // [sample * heads + head]
};

template <typename S>
struct TrunkCache {
  std::vector<LayerCache<S>> layers;
  MatrixX<S> out;
};

template <typename S>
struct ActorCache {
  TrunkCache<S> trunk;
  MatrixX<S> pooled, hidden_pre, hidden;
  std::vector<std::vector<int>> arg_min, arg_max;  // [sample * K + path] -> token per dim
  std::vector<char> present;                       // [sample * K + path]
};

template <typename S>
struct CriticCache {
  TrunkCache<S> trunk;
  MatrixX<S> alpha;  // batch x tokens
  MatrixX<S> pooled, u1, a1, u2, a2;
};

/// Transformer trunk: token embedding then Pre-LN blocks.
template <typename S>
MatrixX<S> trunk_forward(const TrunkParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                         TrunkCache<S>* cache = nullptr);
template <typename S>
void trunk_backward(const TrunkParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                    const TrunkCache<S>& cache, const MatrixX<S>& d_out, TrunkParams<S>& grad);

/// Flat logits, batch x (num_paths * num_subbands), path-major.
template <typename S>
MatrixX<S> actor_forward(const ActorParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                         ActorCache<S>* cache = nullptr);
template <typename S>
void actor_backward(const ActorParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                    const ActorCache<S>& cache, const MatrixX<S>& d_logits, ActorParams<S>& grad);

/// Values, one per sample.
template <typename S>
VectorX<S> critic_forward(const CriticParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                          CriticCache<S>* cache = nullptr);
template <typename S>
void critic_backward(const CriticParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                     const CriticCache<S>& cache, const VectorX<S>& d_values, CriticParams<S>& grad);

inline constexpr double kMaskedLogit = -1e9;

/// Masked categorical distribution over one row of logits.
template <typename S>
struct ActorOutput {
  VectorX<S> logits;
  VectorX<S> logp_unmasked;
  VectorX<S> logp_masked;  // kMaskedLogit at invalid actions
  VectorX<S> p_masked;     // exactly 0 at invalid actions
  S mu = 0;                // valid mass under the unmasked policy
  S log_mu = 0;
  int valid_count = 0;
};

template <typename S>
ActorOutput<S> masked_distribution(const Eigen::Ref<const VectorX<S>>& logits, const ActionMask& mask);

/// Draws from the masked distribution; throws if no action is valid.
template <typename S>
int sample_action(const ActorOutput<S>& d, Rng& rng);
template <typename S>
int greedy_action(const ActorOutput<S>& d);
/// Entropy of the masked distribution.
template <typename S>
S masked_entropy(const ActorOutput<S>& d);

/// Central-difference check of an analytic gradient over a flat parameter
/// vector. loss(x, grad_out) returns the loss and writes the gradient.
struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Eigen::Index worst_index = -1;
  Eigen::Index checked = 0;
};

GradCheckResult grad_check(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>& loss,
                           const Eigen::VectorXd& x0, double step = 1e-4, Eigen::Index max_coords = -1,
                           std::uint64_t seed = 0);

}  // namespace rmsa
