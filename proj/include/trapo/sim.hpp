#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trapo/core.hpp"
#include "trapo/grpo.hpp"
#include "trapo/rewards.hpp"
#include "trapo/rng.hpp"

namespace trapo {

/// Synthetic question world. Questions are grouped in clusters that share a
/// gold answer, so a linear policy trained on some members of a cluster moves
/// the others too. A fraction of unlabeled questions carries an extra feature
/// along a bias direction, which the initial policy maps to a wrong answer.
/// With `bias_shared` (and K > n_clusters) every cluster shares one bias
/// direction and one distractor token that is nobody's gold, so the wrong
/// consensus on different clusters reinforces itself through shared weights.
struct WorldConfig {
  std::size_t n_labeled = 60;
  std::size_t n_unlabeled = 180;
  std::size_t d = 16;
  std::size_t K = 8;
  std::size_t L = 4;
  std::size_t n_clusters = 6;
  double cluster_spread = 0.5;
  double ood_fraction = 0.0;
  double bias_fraction = 0.3;
  double bias_strength = 5.0;
  std::uint64_t seed = 0;

  // Shape of the initial policy and of the shifted clusters.
  double prior_strength = 1.0;   // logit weight the initial policy puts on each cluster's gold
  double ood_shift = 1.5;        // translation of OOD cluster centers
  double bias_coef_min = 0.0;    // biased questions' bias-feature coefficient ~ U[bias_coef_min, 1]
  double init_scale = 0.01;      // std of the random initial weights
  double feature_scale = 1.0;    // norm of cluster centers and bias directions in feature space
  bool bias_shared = true;
};

inline WorldConfig default_v1() { return WorldConfig{}; }

inline void validate_world(const WorldConfig& w) {
  if (w.d == 0) throw ConfigError("d", "must be >= 1");
  if (w.K < 2) throw ConfigError("k", "must be >= 2");
  if (w.L < 1) throw ConfigError("l", "must be >= 1");
  if (w.n_clusters < 1) throw ConfigError("n_clusters", "must be >= 1");
  if (w.n_clusters > w.K) throw ConfigError("n_clusters", "cannot exceed K (clusters need distinct gold answers)");
  if (!(w.cluster_spread >= 0.0)) throw ConfigError("cluster_spread", "must be >= 0");
  if (!(w.ood_fraction >= 0.0 && w.ood_fraction <= 1.0)) throw ConfigError("ood_fraction", "must lie in [0, 1]");
  if (!(w.bias_fraction >= 0.0 && w.bias_fraction <= 1.0))
    throw ConfigError("bias_fraction", "must lie in [0, 1]");
  if (!(w.bias_strength >= 0.0)) throw ConfigError("bias_strength", "must be >= 0");
  if (!(w.bias_coef_min >= 0.0 && w.bias_coef_min <= 1.0))
    throw ConfigError("bias_coef_min", "must lie in [0, 1]");
  if (!(w.init_scale >= 0.0)) throw ConfigError("init_scale", "must be >= 0");
  if (!(w.feature_scale > 0.0)) throw ConfigError("feature_scale", "must be > 0");
}

/// Evaluation-only ground truth. Never passed to rewards, trajectory or grpo.
struct HiddenLabels {
  std::map<QuestionId, Token> gold;
  std::map<QuestionId, std::size_t> cluster;

  Token gold_of(QuestionId id) const { return gold.at(id); }
};

struct ClusterGeometry {
  std::vector<Eigen::VectorXd> centers;
  std::vector<Eigen::VectorXd> bias_directions;
  std::vector<Eigen::VectorXd> ood_directions;
  std::vector<Token> gold;
  std::vector<Token> bias_target;
};

struct World {
  WorldConfig config;
  Dataset dataset;
  HiddenLabels hidden;
  ClusterGeometry geometry;

  std::vector<const Question*> biased_questions() const {
    std::vector<const Question*> out;
    for (const auto& q : dataset.unlabeled)
      if (q.bias_target) out.push_back(&q);
    return out;
  }
};

namespace detail {

inline Eigen::VectorXd gaussian_vector(RandomStream& rng, std::size_t d) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
  return v;
}

/// Up to d orthonormal directions; any beyond d are plain random unit vectors.
inline std::vector<Eigen::VectorXd> random_directions(RandomStream& rng, std::size_t count, std::size_t d) {
  std::vector<Eigen::VectorXd> out;
  while (out.size() < count) {
    Eigen::VectorXd v = gaussian_vector(rng, d);
    if (out.size() < d)
      for (const auto& u : out) v -= u.dot(v) * u;
    const double n = v.norm();
    if (n < 1e-8) continue;
    out.push_back(v / n);
  }
  return out;
}

template <class T>
void shuffle(std::vector<T>& v, RandomStream& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(static_cast<std::uint32_t>(i))]);
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace detail

inline World generate_world(const WorldConfig& config) {
  validate_world(config);
  RandomStream rng(config.seed, 0, 0, StreamDomain::world);
  const std::size_t C = config.n_clusters;
  const std::size_t d = config.d;

  World world;
  world.config = config;
  world.dataset.d = d;
  world.dataset.K = config.K;
  world.dataset.L = config.L;

  auto dirs = detail::random_directions(rng, 3 * C, d);
  for (auto& v : dirs) v *= config.feature_scale;
  ClusterGeometry& geo = world.geometry;
  geo.centers.assign(dirs.begin(), dirs.begin() + static_cast<std::ptrdiff_t>(C));
  geo.bias_directions.assign(dirs.begin() + static_cast<std::ptrdiff_t>(C),
                             dirs.begin() + static_cast<std::ptrdiff_t>(2 * C));
  geo.ood_directions.assign(dirs.begin() + static_cast<std::ptrdiff_t>(2 * C), dirs.end());

  std::vector<Token> tokens(config.K);
  std::iota(tokens.begin(), tokens.end(), 0);
  detail::shuffle(tokens, rng);
  geo.gold.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(C));
  for (std::size_t c = 0; c < C; ++c) {
    Token b = static_cast<Token>(rng.below(static_cast<std::uint32_t>(config.K - 1)));
    if (b >= geo.gold[c]) ++b;
    geo.bias_target.push_back(b);
  }
  if (config.bias_shared && config.K > C) {
    for (std::size_t c = 0; c < C; ++c) {
      geo.bias_target[c] = tokens[C];
      geo.bias_directions[c] = geo.bias_directions[0];
    }
  }

  const double noise_scale = config.cluster_spread / std::sqrt(static_cast<double>(d));
  auto make_features = [&](std::size_t c, bool ood, double bias_coef) {
    Eigen::VectorXd x = geo.centers[c];
    if (ood) x += config.ood_shift * geo.ood_directions[c];
    x += bias_coef * geo.bias_directions[c];
    x += noise_scale * detail::gaussian_vector(rng, d);
    return detail::to_std(x);
  };

  QuestionId next_id = 0;
  for (std::size_t i = 0; i < config.n_labeled; ++i) {
    const std::size_t c = i % C;
    Question q;
    q.id = next_id++;
    q.features = make_features(c, false, 0.0);
    q.gold_answer = geo.gold[c];
    world.hidden.gold[q.id] = geo.gold[c];
    world.hidden.cluster[q.id] = c;
    world.dataset.labeled.push_back(std::move(q));
  }

  const std::size_t n_u = config.n_unlabeled;
  const auto n_ood = static_cast<std::size_t>(std::llround(config.ood_fraction * static_cast<double>(n_u)));
  const auto n_bias = static_cast<std::size_t>(std::llround(config.bias_fraction * static_cast<double>(n_u)));
  std::vector<std::size_t> order_ood(n_u), order_bias(n_u);
  std::iota(order_ood.begin(), order_ood.end(), 0);
  std::iota(order_bias.begin(), order_bias.end(), 0);
  detail::shuffle(order_ood, rng);
  detail::shuffle(order_bias, rng);
  std::vector<bool> is_ood(n_u, false), is_biased(n_u, false);
  for (std::size_t i = 0; i < n_ood; ++i) is_ood[order_ood[i]] = true;
  for (std::size_t i = 0; i < n_bias; ++i) is_biased[order_bias[i]] = true;

  for (std::size_t i = 0; i < n_u; ++i) {
    const std::size_t c = i % C;
    Question q;
    q.id = next_id++;
    q.domain_tag = is_ood[i] ? DomainTag::OOD : DomainTag::ID;
    double coef = 0.0;
    if (is_biased[i]) {
      coef = config.bias_coef_min + (1.0 - config.bias_coef_min) * rng.uniform();
      q.bias_target = geo.bias_target[c];
    }
    q.features = make_features(c, is_ood[i], coef);
    world.hidden.gold[q.id] = geo.gold[c];
    world.hidden.cluster[q.id] = c;
    world.dataset.unlabeled.push_back(std::move(q));
  }
  return world;
}

/// Trainable parameters plus the frozen reference copy taken at construction.
class Policy {
 public:
  explicit Policy(PolicyParams init) : params(init), ref_(std::move(init)) {}

  const PolicyParams& reference() const noexcept { return ref_; }

  PolicyParams params;

 private:
  PolicyParams ref_;
};

inline RolloutGroup rollout_group(const PolicyParams& params, const Question& question, std::size_t G,
                                  double temperature, RandomStream& stream, std::uint32_t epoch = 0) {
  if (!(temperature > 0.0)) throw std::invalid_argument("rollout_group: temperature must be > 0");
  const std::size_t L = params.L();
  std::vector<std::vector<double>> dists(L);
  for (std::size_t s = 0; s < L; ++s) dists[s] = detail::to_std(step_probabilities(params, question.features, s, temperature));

  RolloutGroup group;
  group.question_id = question.id;
  group.epoch = epoch;
  group.responses.assign(G, std::vector<Token>(L));
  group.step_distributions.assign(G, dists);
  group.answers.resize(G);
  for (std::size_t j = 0; j < G; ++j) {
    for (std::size_t s = 0; s < L; ++s) group.responses[j][s] = stream.categorical(dists[s]);
    group.answers[j] = group.responses[j][L - 1];
  }
  return group;
}

/// Final-step argmax under greedy decoding; ties go to the smaller token.
inline Token greedy_answer(const PolicyParams& params, const Question& question) {
  Token answer = 0;
  for (std::size_t s = 0; s < params.L(); ++s) {
    const Eigen::VectorXd z = step_logits(params, question.features, s);
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < z.size(); ++k)
      if (z[k] > z[best]) best = k;
    answer = static_cast<Token>(best);
  }
  return answer;
}

/// Fraction of (biased question, Monte Carlo draw) pairs whose sampled
/// majority is the question's bias target.
inline double biased_majority_rate(const PolicyParams& params, const World& world, std::size_t G,
                                   std::size_t draws, std::uint64_t seed) {
  std::size_t hits = 0, total = 0;
  for (const Question* q : world.biased_questions()) {
    RandomStream rng(seed, q->id, 0, StreamDomain::verify);
    for (std::size_t i = 0; i < draws; ++i) {
      const RolloutGroup g = rollout_group(params, *q, G, 1.0, rng);
      hits += majority_vote(g.answers).pseudo_label == *q->bias_target ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

/// Small random weights, a gold-answer prior along each cluster center, and,
/// when bias_strength > 0, the bias target boosted along each cluster's bias
/// direction. A biased init is checked by 256 Monte Carlo groups per biased
/// question: the sampled majority must be the bias target more often than not.
inline Policy init_policy(const World& world, double bias_strength, std::size_t G = 8) {
  const WorldConfig& cfg = world.config;
  const ClusterGeometry& geo = world.geometry;
  RandomStream rng(cfg.seed, 0, 0, StreamDomain::init);
  PolicyParams params(cfg.K, cfg.d, cfg.L);
  for (Eigen::Index r = 0; r < params.weights.rows(); ++r)
    for (Eigen::Index c = 0; c < params.weights.cols(); ++c) params.weights(r, c) = cfg.init_scale * rng.normal();

  const auto d = static_cast<Eigen::Index>(cfg.d);
  for (std::size_t c = 0; c < geo.centers.size(); ++c)
    params.weights.row(geo.gold[c]).head(d) += (cfg.prior_strength / cfg.feature_scale) * geo.centers[c].transpose();

  if (bias_strength > 0.0 && !world.biased_questions().empty()) {
    std::vector<bool> has_bias(geo.centers.size(), false);
    for (const Question* q : world.biased_questions()) has_bias[world.hidden.cluster.at(q->id)] = true;
    const bool shared = cfg.bias_shared && cfg.K > geo.centers.size();
    std::set<Token> boosted;  // a shared bias target is boosted once
    for (std::size_t c = 0; c < geo.centers.size(); ++c) {
      if (!has_bias[c]) continue;
      if (shared && !boosted.insert(geo.bias_target[c]).second) continue;
      params.weights.row(geo.bias_target[c]).head(d) += (bias_strength / cfg.feature_scale) * geo.bias_directions[c].transpose();
    }

    const double rate = biased_majority_rate(params, world, G, 256, cfg.seed);
    if (rate <= 0.5)
      throw std::runtime_error("init_policy: bias_strength " + std::to_string(bias_strength) +
                               " too small; biased majority rate " + std::to_string(rate));
  }
  return Policy(std::move(params));
}

}  // namespace trapo
