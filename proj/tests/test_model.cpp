#include "rmsa/heuristics.hpp"
#include "rmsa/model.hpp"
#include "support.hpp"

#include <doctest.h>

#include <numeric>

using namespace rmsa;
using namespace rmsa::testing;

namespace {

struct Fixture {
  std::shared_ptr<const Network> net;
  EnvConfig cfg;
  ModelConfig mcfg;
  std::vector<TokenBatch> obs;
  std::vector<ActionMask> masks;
};

// A few observations from a partly filled NSFNET grid.
Fixture make_fixture(int layers = 1, int samples = 3) {
  Fixture f;
  f.net = make_network(load_topology(data_path("topologies/nsfnet.json")), 3, PathSort::HopsThenKm, ModulationTable::standard(), 4);
  f.cfg.num_fsu = 8;
  f.cfg.slot_aggregation = 4;
  f.cfg.load_erlang = 30.0;
  f.cfg.episode_length = 1000;
  RmsaEnv env(f.net, f.cfg);
  env.reset(std::uint64_t{4});
  auto policy = heuristic_policy(HeuristicKind::KspFf);
  for (int i = 0; i < 40 + 7 * samples; ++i) {
    if (i >= 40 && (i - 40) % 7 == 0) {
      f.obs.push_back(env.observe());
      f.masks.push_back(env.mask());
    }
    if (auto a = policy(env)) env.step(*a); else env.block();
  }
  ModelConfig base;
  base.embed_dim = 8;
  base.num_layers = layers;
  base.num_heads = 2;
  base.mlp_multiplier = 2;
  base.head_hidden = 12;
  f.mcfg = model_config_for(env, base);
  return f;
}

template <typename P>
void perturb(P& p, Rng& rng, double scale) {
  visit(p, [&](const std::string&, auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += static_cast<typename std::decay_t<decltype(m)>::Scalar>(scale * rng.normal());
  });
}

BatchInput<double> batch_of(const Fixture& f) {
  std::vector<const TokenBatch*> ptrs;
  for (const auto& o : f.obs) ptrs.push_back(&o);
  return stack_observations<double>(ptrs);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("default-size networks have about 600k parameters each") {
  ModelConfig m;
  m.k_spectral = 8;
  m.num_paths = 90;
  m.num_subbands = 4;
  m.feature_width = token_feature_width(320, 8, 90);
  Rng rng(0);
  const auto actor = init_actor<float>(m, rng);
  const auto critic = init_critic<float>(m, rng);
  const double a = static_cast<double>(parameter_count(actor));
  const double c = static_cast<double>(parameter_count(critic));
  CHECK(a == doctest::Approx(6e5).epsilon(0.2));
  CHECK(c == doctest::Approx(6e5).epsilon(0.2));
}

TEST_CASE("initialization: orthogonal weights, zero output layers, log-uniform rotary scales") {
  auto f = make_fixture(2);
  ModelConfig m = f.mcfg;
  m.embed_dim = 16;
  m.num_heads = 2;
  Rng rng(1);
  const auto actor = init_actor<double>(m, rng);
  const auto critic = init_critic<double>(m, rng);
  const auto& w = actor.trunk.w_in;
  CHECK((w.transpose() * w - Eigen::MatrixXd::Identity(16, 16)).norm() < 1e-10);
  const auto& wq = actor.trunk.layers[0].wq;
  CHECK((wq.transpose() * wq - Eigen::MatrixXd::Identity(16, 16)).norm() < 1e-10);
  CHECK(actor.w2.isZero());
  CHECK(actor.b2.isZero());
  CHECK(critic.w3.isZero());
  CHECK(critic.query.isZero());
  for (const auto& L : actor.trunk.layers) {
    CHECK(L.wire.rows() == m.head_dim() / 2);
    CHECK(L.wire.cols() == m.k_spectral);
    CHECK(L.wire.minCoeff() >= 0.1);
    CHECK(L.wire.maxCoeff() <= 10.0);
  }
  // Fresh actor: all logits zero, so the unmasked policy is uniform.
  const auto in = batch_of(f);
  const Eigen::MatrixXd logits = actor_forward(actor, m, in);
  CHECK(logits.isZero());
  const Eigen::VectorXd v = critic_forward(critic, m, in);
  CHECK(v.isZero());

  ModelConfig no_wire = m;
  no_wire.wire = false;
  CHECK(init_actor<double>(no_wire, rng).trunk.layers[0].wire.isZero());
}

TEST_CASE("rotary scales are log-uniform over the configured range") {
  ModelConfig m;
  m.feature_width = 10;
  m.k_spectral = 8;
  m.embed_dim = 128;
  m.num_heads = 2;  // 32 x 8 scales per layer
  m.num_layers = 4;
  Rng rng(2);
  const auto a = init_actor<double>(m, rng);
  std::vector<double> logs;
  for (const auto& L : a.trunk.layers) {
    for (Eigen::Index i = 0; i < L.wire.size(); ++i) logs.push_back(std::log(L.wire.data()[i]));
  }
  const double mean = std::accumulate(logs.begin(), logs.end(), 0.0) / static_cast<double>(logs.size());
  const double width = std::log(100.0);
  // Uniform on [log 0.1, log 10]: mean 0, variance width^2 / 12.
  CHECK(std::abs(mean) < 0.1);
  double var = 0.0;
  for (double x : logs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(logs.size());
  CHECK(var == doctest::Approx(width * width / 12.0).epsilon(0.1));
}

TEST_CASE("WiRE preserves norms and is the identity at zero coordinates") {
  Rng rng(5);
  const int tokens = 7, pairs = 3, ks = 4;
  Eigen::MatrixXd x(tokens, 2 * pairs), coords(tokens, ks), scales(pairs, ks);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < coords.size(); ++i) coords.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < scales.size(); ++i) scales.data()[i] = 0.1 + 5.0 * rng.uniform();
  Eigen::MatrixXd y = x;
  apply_wire<double>(y, coords, scales);
  for (int i = 0; i < tokens; ++i) {
    CHECK(y.row(i).norm() == doctest::Approx(x.row(i).norm()).epsilon(1e-12));
    for (int j = 0; j < pairs; ++j) CHECK(y.row(i).segment(2 * j, 2).norm() == doctest::Approx(x.row(i).segment(2 * j, 2).norm()).epsilon(1e-12));
  }
  CHECK((y - x).norm() > 1e-3);
  Eigen::MatrixXd z = x;
  apply_wire<double>(z, Eigen::MatrixXd::Zero(tokens, ks), scales);
  CHECK((z - x).norm() == 0.0);
}

TEST_CASE("WiRE dot products depend only on the coordinate difference") {
  Rng rng(6);
  const int pairs = 4, ks = 3;
  Eigen::MatrixXd scales(pairs, ks);
  for (Eigen::Index i = 0; i < scales.size(); ++i) scales.data()[i] = rng.normal();
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd q(1, 2 * pairs), k(1, 2 * pairs), ci(1, ks), cj(1, ks);
    for (auto* m : {&q, &k, &ci, &cj}) {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = rng.normal();
    }
    Eigen::MatrixXd qi = q, kj = k;
    apply_wire<double>(qi, ci, scales);
    apply_wire<double>(kj, cj, scales);
    Eigen::MatrixXd k_rel = k;
    apply_wire<double>(k_rel, cj - ci, scales);
    CHECK((qi * kj.transpose())(0, 0) == doctest::Approx((q * k_rel.transpose())(0, 0)).epsilon(1e-10));
  }
}

TEST_CASE("ring graph: rotated attention scores form a circulant matrix") {
  const int n = 12;
  const auto basis = spectral_basis(build_line_graph(ring(n)), 3);
  // The Fiedler pair spans cos/sin of the ring angle; its atan2 is that angle up to offset and orientation.
  Eigen::MatrixXd angle(n, 1);
  for (int i = 0; i < n; ++i) angle(i, 0) = std::atan2(basis.eigenvectors(i, 2), basis.eigenvectors(i, 1));
  for (int i = 1; i < n; ++i) {
    const double step = std::remainder(angle(i, 0) - angle(i - 1, 0), 2.0 * M_PI);
    CHECK(std::abs(std::abs(step) - 2.0 * M_PI / n) < 1e-9);
  }
  Eigen::MatrixXd scales(3, 1);
  scales << 1.0, 2.0, 5.0;  // integer frequencies keep the wrap-around consistent
  Rng rng(8);
  Eigen::MatrixXd q(1, 6);
  for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
  Eigen::MatrixXd x = q.replicate(n, 1);
  apply_wire<double>(x, angle, scales);
  const Eigen::MatrixXd s = x * x.transpose();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) CHECK(s(i, j) == doctest::Approx(s((i + 1) % n, (j + 1) % n)).epsilon(1e-9));
  }
  CHECK(std::abs(s(0, 1) - s(0, 3)) > 1e-3);
  // Symmetric offsets match (orientation of the angle does not matter).
  CHECK(s(0, 1) == doctest::Approx(s(0, n - 1)).epsilon(1e-9));
}

TEST_CASE("outputs are invariant to token order") {
  auto f = make_fixture(2, 1);
  Rng rng(9);
  auto actor = init_actor<double>(f.mcfg, rng);
  auto critic = init_critic<double>(f.mcfg, rng);
  perturb(actor, rng, 0.2);
  perturb(critic, rng, 0.2);
  const TokenBatch& o = f.obs[0];
  const int T = o.num_tokens();
  std::vector<int> perm(static_cast<std::size_t>(T));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = T - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
  TokenBatch p = o;
  for (int i = 0; i < T; ++i) {
    p.features.row(perm[static_cast<std::size_t>(i)]) = o.features.row(i);
    p.spectral.row(perm[static_cast<std::size_t>(i)]) = o.spectral.row(i);
  }
  for (auto& path : p.path_edges) {
    for (int& e : path) e = perm[static_cast<std::size_t>(e)];
  }
  const auto a = stack_observations<double>(o);
  const auto b = stack_observations<double>(p);
  CHECK((actor_forward(actor, f.mcfg, a) - actor_forward(actor, f.mcfg, b)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(std::abs(critic_forward(critic, f.mcfg, a)(0) - critic_forward(critic, f.mcfg, b)(0)) < 1e-10);
}

TEST_CASE("samples in a batch do not interact") {
  auto f = make_fixture(2, 3);
  Rng rng(10);
  auto actor = init_actor<double>(f.mcfg, rng);
  auto critic = init_critic<double>(f.mcfg, rng);
  perturb(actor, rng, 0.2);
  perturb(critic, rng, 0.2);
  const auto all = batch_of(f);
  const Eigen::MatrixXd logits = actor_forward(actor, f.mcfg, all);
  const Eigen::VectorXd values = critic_forward(critic, f.mcfg, all);
  for (int b = 0; b < 3; ++b) {
    const auto one = stack_observations<double>(f.obs[static_cast<std::size_t>(b)]);
    CHECK((actor_forward(actor, f.mcfg, one).row(0) - logits.row(b)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(critic_forward(critic, f.mcfg, one)(0) - values(b)) < 1e-12);
  }
}

TEST_CASE("critic attention weights are a distribution over tokens") {
  auto f = make_fixture(1, 3);
  Rng rng(12);
  auto critic = init_critic<double>(f.mcfg, rng);
  const auto in = batch_of(f);
  CriticCache<double> cache;
  critic_forward(critic, f.mcfg, in, &cache);
  // Zero query: uniform pooling.
  CHECK((cache.alpha.array() - 1.0 / in.tokens).abs().maxCoeff() < 1e-12);
  perturb(critic, rng, 0.5);
  critic_forward(critic, f.mcfg, in, &cache);
  CHECK(cache.alpha.minCoeff() >= 0.0);
  CHECK((cache.alpha.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("actor and critic gradients match finite differences") {
  for (bool wire : {true, false}) {
    CAPTURE(wire);
    auto f = make_fixture(1, 2);
    f.mcfg.wire = wire;
    Rng rng(13);
    auto actor = init_actor<double>(f.mcfg, rng);
    auto critic = init_critic<double>(f.mcfg, rng);
    perturb(actor, rng, 0.3);
    perturb(critic, rng, 0.3);
    const auto in = batch_of(f);
    Eigen::MatrixXd weights(in.batch, f.mcfg.num_actions());
    for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = rng.normal();
    Eigen::VectorXd vweights(in.batch);
    for (Eigen::Index i = 0; i < vweights.size(); ++i) vweights(i) = rng.normal();

    auto actor_loss = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
      ActorParams<double> p = actor;
      unflatten(p, x);
      ActorCache<double> cache;
      const Eigen::MatrixXd logits = actor_forward(p, f.mcfg, in, &cache);
      if (grad) {
        ActorParams<double> g = zeros_like(p);
        actor_backward(p, f.mcfg, in, cache, weights, g);
        *grad = flatten(g);
      }
      return (logits.array() * weights.array()).sum();
    };
    const auto ra = grad_check(actor_loss, flatten(actor));
    CHECK(ra.max_rel_error < 1e-4);

    auto critic_loss = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
      CriticParams<double> p = critic;
      unflatten(p, x);
      CriticCache<double> cache;
      const Eigen::VectorXd v = critic_forward(p, f.mcfg, in, &cache);
      if (grad) {
        CriticParams<double> g = zeros_like(p);
        critic_backward(p, f.mcfg, in, cache, vweights, g);
        *grad = flatten(g);
      }
      return v.dot(vweights);
    };
    const auto rc = grad_check(critic_loss, flatten(critic));
    CHECK(rc.max_rel_error < 1e-4);
  }
}

TEST_CASE("two-layer trunk gradient matches finite differences") {
  auto f = make_fixture(2, 2);
  Rng rng(14);
  auto actor = init_actor<double>(f.mcfg, rng);
  perturb(actor, rng, 0.3);
  const auto in = batch_of(f);
  Eigen::MatrixXd weights(in.batch, f.mcfg.num_actions());
  for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = rng.normal();
  auto loss = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    ActorParams<double> p = actor;
    unflatten(p, x);
    ActorCache<double> cache;
    const Eigen::MatrixXd logits = actor_forward(p, f.mcfg, in, &cache);
    if (grad) {
      ActorParams<double> g = zeros_like(p);
      actor_backward(p, f.mcfg, in, cache, weights, g);
      *grad = flatten(g);
    }
    return (logits.array() * weights.array()).sum();
  };
  CHECK(grad_check(loss, flatten(actor), 1e-4, 600, 3).max_rel_error < 1e-4);
}

TEST_CASE("masked distribution: invalid actions get exactly zero probability") {
  ActionMask mask;
  mask.valid = {0, 1, 0, 1, 1, 0, 0, 0, 0, 0};
  mask.valid_count = 3;
  Eigen::VectorXd logits(10);
  logits << 5.0, 0.1, 30.0, -2.0, 1.0, 0.0, 0.0, 7.0, -1.0, 2.0;
  const auto d = masked_distribution<double>(logits, mask);
  for (int a = 0; a < 10; ++a) {
    if (!mask[a]) {
      CHECK(d.p_masked(a) == 0.0);
      CHECK(d.logp_masked(a) == kMaskedLogit);
    }
  }
  CHECK(d.p_masked.sum() == doctest::Approx(1.0).epsilon(1e-14));
  const Eigen::VectorXd pu = d.logp_unmasked.array().exp();
  CHECK(pu.sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(d.mu == doctest::Approx(pu(1) + pu(3) + pu(4)).epsilon(1e-12));
  CHECK(d.mu > 0.0);
  CHECK(d.mu < 1e-10);
  CHECK(std::isfinite(d.log_mu));
  for (int a : {1, 3, 4}) CHECK(d.logp_masked(a) == doctest::Approx(d.logp_unmasked(a) - d.log_mu).epsilon(1e-12));

  Rng rng(0);
  std::vector<int> counts(10, 0);
  for (int i = 0; i < 30000; ++i) ++counts[static_cast<std::size_t>(sample_action(d, rng))];
  for (int a = 0; a < 10; ++a) {
    if (!mask[a]) CHECK(counts[static_cast<std::size_t>(a)] == 0);
    else CHECK(counts[static_cast<std::size_t>(a)] / 30000.0 == doctest::Approx(d.p_masked(a)).epsilon(0.05));
  }
  CHECK(greedy_action(d) == 4);
}

TEST_CASE("uniform logits over three valid actions of ten") {
  ActionMask mask;
  mask.valid = {1, 0, 0, 1, 0, 0, 1, 0, 0, 0};
  mask.valid_count = 3;
  const auto d = masked_distribution<double>(Eigen::VectorXd::Zero(10), mask);
  CHECK(d.mu == doctest::Approx(0.3).epsilon(1e-14));
  CHECK(-d.log_mu == doctest::Approx(-std::log(0.3)).epsilon(1e-14));
  CHECK(masked_entropy(d) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(d.p_masked(3) == doctest::Approx(1.0 / 3.0));

  ActionMask none;
  none.valid.assign(10, 0);
  const auto e = masked_distribution<double>(Eigen::VectorXd::Zero(10), none);
  Rng rng(1);
  CHECK_THROWS_AS(sample_action(e, rng), Error);
  CHECK(e.p_masked.isZero());
}

TEST_CASE("parameter trees flatten, cast and round-trip") {
  auto f = make_fixture(2, 1);
  Rng rng(15);
  auto actor = init_actor<float>(f.mcfg, rng);
  perturb(actor, rng, 0.1);
  const Eigen::VectorXf v = flatten(actor);
  CHECK(v.size() == parameter_count(actor));
  auto z = zeros_like(actor);
  unflatten(z, v);
  CHECK((flatten(z) - v).norm() == 0.0f);
  const auto d = cast_params<double>(actor);
  CHECK((flatten(d).cast<float>() - v).norm() == 0.0f);
  std::vector<std::string> names;
  visit_const(actor, [&](const std::string& n, const auto&) { names.push_back(n); });
  CHECK(names.front() == "trunk.in.w");
  CHECK(std::find(names.begin(), names.end(), "trunk.layer1.wire") != names.end());
  CHECK(names.back() == "head2.b");
}

TEST_CASE("model config validation") {
  ModelConfig m;
  m.feature_width = 10;
  m.embed_dim = 12;
  m.num_heads = 5;
  CHECK_THROWS_AS(m.validate(), ConfigError);
  m.num_heads = 4;  // head dim 3 is odd
  CHECK_THROWS_AS(m.validate(), ConfigError);
  m.num_heads = 3;
  CHECK_NOTHROW(m.validate());
  CHECK(m.hidden() == 36);
}

}  // TEST_SUITE
