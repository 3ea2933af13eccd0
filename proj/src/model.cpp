#include "rmsa/model.hpp"

#include <cmath>
#include <limits>

namespace rmsa {

void ModelConfig::validate() const {
  if (embed_dim < 2 || num_layers < 0 || num_heads < 1) throw ConfigError("model: invalid embed_dim/num_layers/num_heads");
  if (embed_dim % num_heads != 0) throw ConfigError("model: embed_dim must be divisible by num_heads");
  if (head_dim() % 2 != 0) throw ConfigError("model: rotary encoding needs an even head dimension");
  if (mlp_multiplier < 1 || head_hidden < 0) throw ConfigError("model: invalid hidden sizes");
  if (k_spectral < 1 || num_paths < 1 || num_subbands < 1) throw ConfigError("model: invalid action or spectral sizes");
  if (feature_width < 1) throw ConfigError("model: feature_width not set");
  if (!(wire_scale_min > 0.0) || wire_scale_max < wire_scale_min) throw ConfigError("model: invalid rotary scale range");
}

std::uint64_t ModelConfig::hash() const {
  std::uint64_t h = fnv1a("model-config");
  for (int v : {embed_dim, num_layers, num_heads, mlp_multiplier, hidden(), k_spectral, num_paths, num_subbands,
                feature_width, static_cast<int>(wire)}) {
    h = fnv1a_value(v, h);
  }
  h = fnv1a_value(wire_scale_min, h);
  return fnv1a_value(wire_scale_max, h);
}

ModelConfig model_config_for(const RmsaEnv& env, ModelConfig base) {
  base.k_spectral = env.network().k_spectral;
  base.num_paths = env.k();
  base.num_subbands = env.num_subbands();
  base.feature_width = token_feature_width(env.config().num_fsu, base.k_spectral, base.num_paths);
  base.validate();
  return base;
}

namespace {

template <typename S>
MatrixX<S> orthogonal(int rows, int cols, Rng& rng) {
  const int n = std::max(rows, cols);
  const int m = std::min(rows, cols);
  Eigen::MatrixXd a(n, m);
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, m);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(m).triangularView<Eigen::Upper>();
  for (int j = 0; j < m; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  if (rows < cols) return q.transpose().cast<S>();
  return q.cast<S>();
}

template <typename S>
MatrixX<S> zeros(int rows, int cols) {
  return MatrixX<S>::Zero(rows, cols);
}

template <typename S>
TrunkParams<S> init_trunk(const ModelConfig& cfg, Rng& rng) {
  const int d = cfg.embed_dim;
  const int f = d * cfg.mlp_multiplier;
  TrunkParams<S> p;
  p.w_in = orthogonal<S>(cfg.feature_width, d, rng);
  p.b_in = zeros<S>(1, d);
  const double lo = std::log(cfg.wire_scale_min);
  const double hi = std::log(cfg.wire_scale_max);
  for (int l = 0; l < cfg.num_layers; ++l) {
    LayerParams<S> L;
    L.ln1_g = MatrixX<S>::Ones(1, d);
    L.ln1_b = zeros<S>(1, d);
    L.wq = orthogonal<S>(d, d, rng);
    L.wk = orthogonal<S>(d, d, rng);
    L.wv = orthogonal<S>(d, d, rng);
    L.wo = orthogonal<S>(d, d, rng);
    L.bq = L.bk = L.bv = L.bo = zeros<S>(1, d);
    L.wire = zeros<S>(cfg.head_dim() / 2, cfg.k_spectral);
    if (cfg.wire) {
      for (Eigen::Index j = 0; j < L.wire.cols(); ++j) {
        for (Eigen::Index i = 0; i < L.wire.rows(); ++i) L.wire(i, j) = static_cast<S>(std::exp(lo + (hi - lo) * rng.uniform()));
      }
    }
    L.ln2_g = MatrixX<S>::Ones(1, d);
    L.ln2_b = zeros<S>(1, d);
    L.w1 = orthogonal<S>(d, f, rng);
    L.b1 = zeros<S>(1, f);
    L.w2 = orthogonal<S>(f, d, rng);
    L.b2 = zeros<S>(1, d);
    p.layers.push_back(std::move(L));
  }
  return p;
}

template <typename S>
MatrixX<S> affine(const MatrixX<S>& x, const MatrixX<S>& w, const MatrixX<S>& b) {
  MatrixX<S> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename S>
MatrixX<S> relu(const MatrixX<S>& x) {
  return x.cwiseMax(S(0));
}

template <typename S>
MatrixX<S> relu_grad(const MatrixX<S>& d, const MatrixX<S>& pre) {
  return (pre.array() > S(0)).select(d, S(0));
}

template <typename S>
void add_colsum(MatrixX<S>& g, const MatrixX<S>& d) {
  g.row(0) += d.colwise().sum();
}

constexpr double kLnEps = 1e-5;

template <typename S>
MatrixX<S> layer_norm(const MatrixX<S>& x, const MatrixX<S>& g, const MatrixX<S>& b, LayerNormCache<S>& c) {
  const auto n = x.rows();
  const auto d = static_cast<S>(x.cols());
  c.xhat.resize(x.rows(), x.cols());
  c.inv_std.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).sum() / d;
    const auto centred = (x.row(i).array() - mean).eval();
    const S var = centred.square().sum() / d;
    c.inv_std(i) = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    c.xhat.row(i) = centred * c.inv_std(i);
  }
  MatrixX<S> y = c.xhat.array().rowwise() * g.row(0).array();
  y.rowwise() += b.row(0);
  return y;
}

template <typename S>
MatrixX<S> layer_norm_backward(const MatrixX<S>& dy, const LayerNormCache<S>& c, const MatrixX<S>& g,
                               MatrixX<S>& dg, MatrixX<S>& db) {
  dg.row(0) += (dy.array() * c.xhat.array()).matrix().colwise().sum();
  add_colsum(db, dy);
  const MatrixX<S> dxhat = dy.array().rowwise() * g.row(0).array();
  const auto d = static_cast<S>(dy.cols());
  MatrixX<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const S s1 = dxhat.row(i).sum();
    const S s2 = dxhat.row(i).dot(c.xhat.row(i));
    dx.row(i) = (c.inv_std(i) / d) * (d * dxhat.row(i).array() - s1 - c.xhat.row(i).array() * s2);
  }
  return dx;
}

// Rotates pairs of a head block in place; sign -1 applies the inverse.
template <typename S, typename Block>
void rotate_block(Block&& x, const MatrixX<S>& cos, const MatrixX<S>& sin, Eigen::Index row0, S sign) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < cos.cols(); ++j) {
      const S c = cos(row0 + i, j);
      const S s = sign * sin(row0 + i, j);
      const S a = x(i, 2 * j);
      const S b = x(i, 2 * j + 1);
      x(i, 2 * j) = a * c - b * s;
      x(i, 2 * j + 1) = a * s + b * c;
    }
  }
}

template <typename S>
void softmax_rows(MatrixX<S>& a) {
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const S m = a.row(i).maxCoeff();
    a.row(i) = (a.row(i).array() - m).exp();
    a.row(i) /= a.row(i).sum();
  }
}

template <typename S>
MatrixX<S> layer_forward(const LayerParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                         const MatrixX<S>& x, LayerCache<S>& c) {
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int T = in.tokens;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  c.x = x;
  c.y = layer_norm(x, p.ln1_g, p.ln1_b, c.ln1);
  c.q = affine(c.y, p.wq, p.bq);
  c.k = affine(c.y, p.wk, p.bk);
  c.v = affine(c.y, p.wv, p.bv);
  if (cfg.wire) {
    const MatrixX<S> theta = in.spectral * p.wire.transpose();
    c.cos = theta.array().cos();
    c.sin = theta.array().sin();
    for (int h = 0; h < heads; ++h) {
      rotate_block<S>(c.q.middleCols(h * dh, dh), c.cos, c.sin, 0, S(1));
      rotate_block<S>(c.k.middleCols(h * dh, dh), c.cos, c.sin, 0, S(1));
    }
  }
  c.o = MatrixX<S>::Zero(x.rows(), x.cols());
  c.probs.resize(static_cast<std::size_t>(in.batch * heads));
  for (int b = 0; b < in.batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto& prob = c.probs[static_cast<std::size_t>(b * heads + h)];
      prob = c.q.block(b * T, h * dh, T, dh) * c.k.block(b * T, h * dh, T, dh).transpose() * scale;
      softmax_rows(prob);
      c.o.block(b * T, h * dh, T, dh) = prob * c.v.block(b * T, h * dh, T, dh);
    }
  }
  c.h1 = x + affine(c.o, p.wo, p.bo);
  c.z = layer_norm(c.h1, p.ln2_g, p.ln2_b, c.ln2);
  c.u = affine(c.z, p.w1, p.b1);
  c.a = relu(c.u);
  return c.h1 + affine(c.a, p.w2, p.b2);
}

template <typename S>
MatrixX<S> layer_backward(const LayerParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                          const LayerCache<S>& c, const MatrixX<S>& d_out, LayerParams<S>& g) {
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int T = in.tokens;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  MatrixX<S> dh1 = d_out;
  g.w2.noalias() += c.a.transpose() * d_out;
  add_colsum(g.b2, d_out);
  const MatrixX<S> du = relu_grad<S>(d_out * p.w2.transpose(), c.u);
  g.w1.noalias() += c.z.transpose() * du;
  add_colsum(g.b1, du);
  dh1 += layer_norm_backward<S>(du * p.w1.transpose(), c.ln2, p.ln2_g, g.ln2_g, g.ln2_b);

  g.wo.noalias() += c.o.transpose() * dh1;
  add_colsum(g.bo, dh1);
  const MatrixX<S> d_o = dh1 * p.wo.transpose();
  MatrixX<S> dq = MatrixX<S>::Zero(c.q.rows(), c.q.cols());
  MatrixX<S> dk = dq;
  MatrixX<S> dv = dq;
  for (int b = 0; b < in.batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto& prob = c.probs[static_cast<std::size_t>(b * heads + h)];
      const auto dob = d_o.block(b * T, h * dh, T, dh);
      MatrixX<S> dp = dob * c.v.block(b * T, h * dh, T, dh).transpose();
      dv.block(b * T, h * dh, T, dh).noalias() += prob.transpose() * dob;
      const VectorX<S> row_dot = (dp.array() * prob.array()).rowwise().sum();
      dp = (prob.array() * (dp.colwise() - row_dot).array()) * scale;
      dq.block(b * T, h * dh, T, dh).noalias() += dp * c.k.block(b * T, h * dh, T, dh);
      dk.block(b * T, h * dh, T, dh).noalias() += dp.transpose() * c.q.block(b * T, h * dh, T, dh);
    }
  }
  if (cfg.wire) {
    // c.q / c.k hold rotated vectors; d theta = dx0' * (-x1') + dx1' * x0'.
    MatrixX<S> dtheta = MatrixX<S>::Zero(c.cos.rows(), c.cos.cols());
    for (int h = 0; h < heads; ++h) {
      for (Eigen::Index i = 0; i < dq.rows(); ++i) {
        for (Eigen::Index j = 0; j < dtheta.cols(); ++j) {
          const Eigen::Index c0 = h * dh + 2 * j;
          dtheta(i, j) += dq(i, c0 + 1) * c.q(i, c0) - dq(i, c0) * c.q(i, c0 + 1);
          dtheta(i, j) += dk(i, c0 + 1) * c.k(i, c0) - dk(i, c0) * c.k(i, c0 + 1);
        }
      }
      rotate_block<S>(dq.middleCols(h * dh, dh), c.cos, c.sin, 0, S(-1));
      rotate_block<S>(dk.middleCols(h * dh, dh), c.cos, c.sin, 0, S(-1));
    }
    g.wire.noalias() += dtheta.transpose() * in.spectral;
  }
  g.wq.noalias() += c.y.transpose() * dq;
  g.wk.noalias() += c.y.transpose() * dk;
  g.wv.noalias() += c.y.transpose() * dv;
  add_colsum(g.bq, dq);
  add_colsum(g.bk, dk);
  add_colsum(g.bv, dv);
  const MatrixX<S> dy = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
  return dh1 + layer_norm_backward<S>(dy, c.ln1, p.ln1_g, g.ln1_g, g.ln1_b);
}

}  // namespace

template <typename S>
ActorParams<S> init_actor(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ActorParams<S> p;
  p.trunk = init_trunk<S>(cfg, rng);
  p.w1 = orthogonal<S>(3 * cfg.embed_dim, cfg.hidden(), rng);
  p.b1 = zeros<S>(1, cfg.hidden());
  p.w2 = zeros<S>(cfg.hidden(), cfg.num_subbands);
  p.b2 = zeros<S>(1, cfg.num_subbands);
  return p;
}

template <typename S>
CriticParams<S> init_critic(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  CriticParams<S> p;
  p.trunk = init_trunk<S>(cfg, rng);
  p.query = zeros<S>(1, cfg.embed_dim);
  p.w1 = orthogonal<S>(cfg.embed_dim, cfg.hidden(), rng);
  p.b1 = zeros<S>(1, cfg.hidden());
  p.w2 = orthogonal<S>(cfg.hidden(), cfg.hidden(), rng);
  p.b2 = zeros<S>(1, cfg.hidden());
  p.w3 = zeros<S>(cfg.hidden(), 1);
  p.b3 = zeros<S>(1, 1);
  return p;
}

template <typename S>
BatchInput<S> stack_observations(std::span<const TokenBatch* const> obs) {
  if (obs.empty()) throw Error("stack_observations: empty batch");
  BatchInput<S> in;
  in.batch = static_cast<int>(obs.size());
  in.tokens = obs[0]->num_tokens();
  const auto fw = obs[0]->features.cols();
  const auto ks = obs[0]->spectral.cols();
  in.features.resize(static_cast<Eigen::Index>(in.batch) * in.tokens, fw);
  in.spectral.resize(in.features.rows(), ks);
  in.paths.reserve(obs.size());
  for (int b = 0; b < in.batch; ++b) {
    const TokenBatch& o = *obs[static_cast<std::size_t>(b)];
    if (o.num_tokens() != in.tokens || o.features.cols() != fw || o.spectral.cols() != ks ||
        o.spectral.rows() != in.tokens) {
      throw Error("stack_observations: observation shapes differ within the batch");
    }
    in.features.middleRows(b * in.tokens, in.tokens) = o.features.cast<S>();
    in.spectral.middleRows(b * in.tokens, in.tokens) = o.spectral.cast<S>();
    in.paths.push_back(o.path_edges);
  }
  return in;
}

template <typename S>
BatchInput<S> stack_observations(const TokenBatch& obs) {
  const TokenBatch* p = &obs;
  return stack_observations<S>(std::span<const TokenBatch* const>(&p, 1));
}

template <typename S>
void apply_wire(Eigen::Ref<MatrixX<S>> x, const MatrixX<S>& coords, const MatrixX<S>& scales) {
  if (x.cols() != 2 * scales.rows() || coords.cols() != scales.cols() || coords.rows() != x.rows()) {
    throw Error("apply_wire: shape mismatch");
  }
  const MatrixX<S> theta = coords * scales.transpose();
  const MatrixX<S> c = theta.array().cos();
  const MatrixX<S> s = theta.array().sin();
  rotate_block<S>(x, c, s, 0, S(1));
}

template <typename S>
MatrixX<S> trunk_forward(const TrunkParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                         TrunkCache<S>* cache) {
  if (in.features.cols() != p.w_in.rows()) {
    throw Error("trunk_forward: feature width " + std::to_string(in.features.cols()) + " != " +
                std::to_string(p.w_in.rows()));
  }
  if (in.spectral.cols() != cfg.k_spectral) throw Error("trunk_forward: spectral width mismatch");
  TrunkCache<S> local;
  TrunkCache<S>& c = cache ? *cache : local;
  c.layers.resize(p.layers.size());
  MatrixX<S> h = affine(in.features, p.w_in, p.b_in);
  for (std::size_t l = 0; l < p.layers.size(); ++l) h = layer_forward(p.layers[l], cfg, in, h, c.layers[l]);
  c.out = h;
  return h;
}

template <typename S>
void trunk_backward(const TrunkParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                    const TrunkCache<S>& cache, const MatrixX<S>& d_out, TrunkParams<S>& grad) {
  MatrixX<S> d = d_out;
  for (std::size_t l = p.layers.size(); l-- > 0;) d = layer_backward(p.layers[l], cfg, in, cache.layers[l], d, grad.layers[l]);
  grad.w_in.noalias() += in.features.transpose() * d;
  add_colsum(grad.b_in, d);
}

template <typename S>
MatrixX<S> actor_forward(const ActorParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                         ActorCache<S>* cache) {
  ActorCache<S> local;
  ActorCache<S>& c = cache ? *cache : local;
  const MatrixX<S> h = trunk_forward(p.trunk, cfg, in, &c.trunk);
  const int d = cfg.embed_dim;
  const int K = cfg.num_paths;
  const int T = in.tokens;
  const auto rows = static_cast<Eigen::Index>(in.batch) * K;
  c.pooled = MatrixX<S>::Zero(rows, 3 * d);
  c.arg_min.assign(static_cast<std::size_t>(rows), {});
  c.arg_max.assign(static_cast<std::size_t>(rows), {});
  c.present.assign(static_cast<std::size_t>(rows), 0);
  for (int b = 0; b < in.batch; ++b) {
    const auto& paths = in.paths[static_cast<std::size_t>(b)];
    for (int k = 0; k < K && k < static_cast<int>(paths.size()); ++k) {
      const auto& edges = paths[static_cast<std::size_t>(k)];
      if (edges.empty()) continue;
      const auto r = static_cast<std::size_t>(b * K + k);
      c.present[r] = 1;
      auto& amin = c.arg_min[r];
      auto& amax = c.arg_max[r];
      amin.assign(static_cast<std::size_t>(d), b * T + edges[0]);
      amax = amin;
      for (int col = 0; col < d; ++col) {
        S lo = h(amin[static_cast<std::size_t>(col)], col);
        S hi = lo;
        S sum = 0;
        for (int e : edges) {
          const int t = b * T + e;
          const S v = h(t, col);
          sum += v;
          if (v < lo) {
            lo = v;
            amin[static_cast<std::size_t>(col)] = t;
          }
          if (v > hi) {
            hi = v;
            amax[static_cast<std::size_t>(col)] = t;
          }
        }
        c.pooled(static_cast<Eigen::Index>(r), col) = lo;
        c.pooled(static_cast<Eigen::Index>(r), d + col) = sum / static_cast<S>(edges.size());
        c.pooled(static_cast<Eigen::Index>(r), 2 * d + col) = hi;
      }
    }
  }
  c.hidden_pre = affine(c.pooled, p.w1, p.b1);
  c.hidden = relu(c.hidden_pre);
  const MatrixX<S> per_path = affine(c.hidden, p.w2, p.b2);  // (batch * K) x subbands
  MatrixX<S> logits(in.batch, K * cfg.num_subbands);
  for (int b = 0; b < in.batch; ++b) {
    for (int k = 0; k < K; ++k) {
      logits.row(b).segment(k * cfg.num_subbands, cfg.num_subbands) = per_path.row(b * K + k);
    }
  }
  return logits;
}

template <typename S>
void actor_backward(const ActorParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                    const ActorCache<S>& c, const MatrixX<S>& d_logits, ActorParams<S>& g) {
  const int d = cfg.embed_dim;
  const int K = cfg.num_paths;
  const int nsb = cfg.num_subbands;
  MatrixX<S> d_pp(static_cast<Eigen::Index>(in.batch) * K, nsb);
  for (int b = 0; b < in.batch; ++b) {
    for (int k = 0; k < K; ++k) d_pp.row(b * K + k) = d_logits.row(b).segment(k * nsb, nsb);
  }
  g.w2.noalias() += c.hidden.transpose() * d_pp;
  add_colsum(g.b2, d_pp);
  const MatrixX<S> d_hid = relu_grad<S>(d_pp * p.w2.transpose(), c.hidden_pre);
  g.w1.noalias() += c.pooled.transpose() * d_hid;
  add_colsum(g.b1, d_hid);
  const MatrixX<S> d_pooled = d_hid * p.w1.transpose();
  MatrixX<S> dh = MatrixX<S>::Zero(c.trunk.out.rows(), c.trunk.out.cols());
  const int T = in.tokens;
  for (int b = 0; b < in.batch; ++b) {
    for (int k = 0; k < K; ++k) {
      const auto r = static_cast<std::size_t>(b * K + k);
      if (!c.present[r]) continue;
      const auto& edges = in.paths[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)];
      const auto row = static_cast<Eigen::Index>(r);
      const S inv_n = S(1) / static_cast<S>(edges.size());
      for (int col = 0; col < d; ++col) {
        dh(c.arg_min[r][static_cast<std::size_t>(col)], col) += d_pooled(row, col);
        dh(c.arg_max[r][static_cast<std::size_t>(col)], col) += d_pooled(row, 2 * d + col);
      }
      for (int e : edges) dh.row(b * T + e) += d_pooled.row(row).segment(d, d) * inv_n;
    }
  }
  trunk_backward(p.trunk, cfg, in, c.trunk, dh, g.trunk);
}

template <typename S>
VectorX<S> critic_forward(const CriticParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                          CriticCache<S>* cache) {
  CriticCache<S> local;
  CriticCache<S>& c = cache ? *cache : local;
  const MatrixX<S> h = trunk_forward(p.trunk, cfg, in, &c.trunk);
  const int T = in.tokens;
  const S scale = S(1) / std::sqrt(static_cast<S>(cfg.embed_dim));
  c.alpha.resize(in.batch, T);
  c.pooled.resize(in.batch, cfg.embed_dim);
  for (int b = 0; b < in.batch; ++b) {
    const auto hb = h.middleRows(b * T, T);
    RowVectorX<S> s = (hb * p.query.row(0).transpose()).transpose() * scale;
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    c.alpha.row(b) = s;
    c.pooled.row(b) = s * hb;
  }
  c.u1 = affine(c.pooled, p.w1, p.b1);
  c.a1 = relu(c.u1);
  c.u2 = affine(c.a1, p.w2, p.b2);
  c.a2 = relu(c.u2);
  return affine(c.a2, p.w3, p.b3).col(0);
}

template <typename S>
void critic_backward(const CriticParams<S>& p, const ModelConfig& cfg, const BatchInput<S>& in,
                     const CriticCache<S>& c, const VectorX<S>& d_values, CriticParams<S>& g) {
  const MatrixX<S> dv = d_values;
  g.w3.noalias() += c.a2.transpose() * dv;
  add_colsum(g.b3, dv);
  const MatrixX<S> du2 = relu_grad<S>(dv * p.w3.transpose(), c.u2);
  g.w2.noalias() += c.a1.transpose() * du2;
  add_colsum(g.b2, du2);
  const MatrixX<S> du1 = relu_grad<S>(du2 * p.w2.transpose(), c.u1);
  g.w1.noalias() += c.pooled.transpose() * du1;
  add_colsum(g.b1, du1);
  const MatrixX<S> dpool = du1 * p.w1.transpose();
  const MatrixX<S>& h = c.trunk.out;
  MatrixX<S> dh(h.rows(), h.cols());
  const int T = in.tokens;
  const S scale = S(1) / std::sqrt(static_cast<S>(cfg.embed_dim));
  for (int b = 0; b < in.batch; ++b) {
    const auto hb = h.middleRows(b * T, T);
    const RowVectorX<S> alpha = c.alpha.row(b);
    dh.middleRows(b * T, T) = alpha.transpose() * dpool.row(b);
    const VectorX<S> dalpha = hb * dpool.row(b).transpose();
    const VectorX<S> ds = alpha.transpose().cwiseProduct((dalpha.array() - alpha.dot(dalpha)).matrix()) * scale;
    dh.middleRows(b * T, T) += ds * p.query.row(0);
    g.query.row(0) += ds.transpose() * hb;
  }
  trunk_backward(p.trunk, cfg, in, c.trunk, dh, g.trunk);
}

template <typename S>
ActorOutput<S> masked_distribution(const Eigen::Ref<const VectorX<S>>& logits, const ActionMask& mask) {
  if (mask.size() != logits.size()) throw Error("masked_distribution: mask and logits sizes differ");
  ActorOutput<S> out;
  out.logits = logits;
  const S m_all = logits.maxCoeff();
  const S lse_all = m_all + std::log((logits.array() - m_all).exp().sum());
  out.logp_unmasked = logits.array() - lse_all;
  out.logp_masked = VectorX<S>::Constant(logits.size(), static_cast<S>(kMaskedLogit));
  out.p_masked = VectorX<S>::Zero(logits.size());
  out.valid_count = mask.valid_count;
  if (mask.valid_count == 0) {
    out.mu = 0;
    out.log_mu = static_cast<S>(kMaskedLogit);
    return out;
  }
  S m_valid = -std::numeric_limits<S>::infinity();
  for (Eigen::Index a = 0; a < logits.size(); ++a) {
    if (mask[static_cast<int>(a)]) m_valid = std::max(m_valid, logits(a));
  }
  S sum = 0;
  for (Eigen::Index a = 0; a < logits.size(); ++a) {
    if (mask[static_cast<int>(a)]) sum += std::exp(logits(a) - m_valid);
  }
  const S lse_valid = m_valid + std::log(sum);
  for (Eigen::Index a = 0; a < logits.size(); ++a) {
    if (!mask[static_cast<int>(a)]) continue;
    out.logp_masked(a) = logits(a) - lse_valid;
    out.p_masked(a) = std::exp(out.logp_masked(a));
  }
  out.log_mu = lse_valid - lse_all;
  out.mu = std::exp(out.log_mu);
  return out;
}

template <typename S>
int sample_action(const ActorOutput<S>& d, Rng& rng) {
  if (d.valid_count == 0) throw Error("sample_action: no valid action");
  const double u = rng.uniform();
  double acc = 0.0;
  int last = -1;
  for (Eigen::Index a = 0; a < d.p_masked.size(); ++a) {
    if (d.p_masked(a) <= S(0)) continue;
    acc += static_cast<double>(d.p_masked(a));
    last = static_cast<int>(a);
    if (u < acc) return last;
  }
  if (last < 0) {
    // Every valid probability underflowed; fall back to the best valid logit.
    return greedy_action(d);
  }
  return last;
}

template <typename S>
int greedy_action(const ActorOutput<S>& d) {
  if (d.valid_count == 0) throw Error("greedy_action: no valid action");
  int best = -1;
  for (Eigen::Index a = 0; a < d.logp_masked.size(); ++a) {
    if (d.logp_masked(a) <= static_cast<S>(kMaskedLogit)) continue;
    if (best < 0 || d.logits(a) > d.logits(best)) best = static_cast<int>(a);
  }
  return best;
}

template <typename S>
S masked_entropy(const ActorOutput<S>& d) {
  S h = 0;
  for (Eigen::Index a = 0; a < d.p_masked.size(); ++a) {
    if (d.p_masked(a) > S(0)) h -= d.p_masked(a) * d.logp_masked(a);
  }
  return h;
}

GradCheckResult grad_check(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>& loss,
                           const Eigen::VectorXd& x0, double step, Eigen::Index max_coords, std::uint64_t seed) {
  Eigen::VectorXd analytic(x0.size());
  loss(x0, &analytic);
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(x0.size()));
  for (Eigen::Index i = 0; i < x0.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
  if (max_coords >= 0 && max_coords < x0.size()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < static_cast<std::size_t>(max_coords); ++i) {
      const auto j = i + rng.below(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(static_cast<std::size_t>(max_coords));
  }
  GradCheckResult r;
  Eigen::VectorXd x = x0;
  for (const auto i : coords) {
    x(i) = x0(i) + step;
    const double up = loss(x, nullptr);
    x(i) = x0(i) - step;
    const double down = loss(x, nullptr);
    x(i) = x0(i);
    const double fd = (up - down) / (2.0 * step);
    const double abs_err = std::abs(fd - analytic(i));
    const double rel = abs_err / std::max({std::abs(fd), std::abs(analytic(i)), 1e-6});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
    }
    ++r.checked;
  }
  return r;
}

#define RMSA_INSTANTIATE(S)                                                                                          \
  template ActorParams<S> init_actor<S>(const ModelConfig&, Rng&);                                                   \
  template CriticParams<S> init_critic<S>(const ModelConfig&, Rng&);                                                 \
  template BatchInput<S> stack_observations<S>(std::span<const TokenBatch* const>);                                  \
  template BatchInput<S> stack_observations<S>(const TokenBatch&);                                                   \
  template void apply_wire<S>(Eigen::Ref<MatrixX<S>>, const MatrixX<S>&, const MatrixX<S>&);                         \
  template MatrixX<S> trunk_forward<S>(const TrunkParams<S>&, const ModelConfig&, const BatchInput<S>&,              \
                                       TrunkCache<S>*);                                                              \
  template void trunk_backward<S>(const TrunkParams<S>&, const ModelConfig&, const BatchInput<S>&,                  \
                                  const TrunkCache<S>&, const MatrixX<S>&, TrunkParams<S>&);                         \
  template MatrixX<S> actor_forward<S>(const ActorParams<S>&, const ModelConfig&, const BatchInput<S>&,              \
                                       ActorCache<S>*);                                                              \
  template void actor_backward<S>(const ActorParams<S>&, const ModelConfig&, const BatchInput<S>&,                  \
                                  const ActorCache<S>&, const MatrixX<S>&, ActorParams<S>&);                         \
  template VectorX<S> critic_forward<S>(const CriticParams<S>&, const ModelConfig&, const BatchInput<S>&,            \
                                        CriticCache<S>*);                                                            \
  template void critic_backward<S>(const CriticParams<S>&, const ModelConfig&, const BatchInput<S>&,                \
                                   const CriticCache<S>&, const VectorX<S>&, CriticParams<S>&);                      \
  template ActorOutput<S> masked_distribution<S>(const Eigen::Ref<const VectorX<S>>&, const ActionMask&);           \
  template int sample_action<S>(const ActorOutput<S>&, Rng&);                                                        \
  template int greedy_action<S>(const ActorOutput<S>&);                                                              \
  template S masked_entropy<S>(const ActorOutput<S>&);

RMSA_INSTANTIATE(float)
RMSA_INSTANTIATE(double)

#undef RMSA_INSTANTIATE

}  // namespace rmsa
