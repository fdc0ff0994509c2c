#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "trapo/core.hpp"
#include "trapo/grpo.hpp"
#include "trapo/rewards.hpp"
#include "trapo/sim.hpp"
#include "trapo/trajectory.hpp"

namespace trapo {

struct BoundConfig {
  double alpha = 1.0;
  double label_diameter = 1.0;
  double delta = 0.05;
};

inline BoundConfig validate_bound(const BoundConfig& b) {
  if (!(b.alpha >= 0.0)) throw ConfigError("alpha", "must be >= 0");
  if (!(b.label_diameter >= 0.0)) throw ConfigError("ly", "must be >= 0");
  if (!(b.delta > 0.0 && b.delta < 1.0)) throw ConfigError("delta", "must lie in (0, 1)");
  return b;
}

/// Computable terms of the trajectory-consistency bound at one epoch. The
/// domain-shift constants are not estimable and are not reported.
struct BoundReport {
  std::uint32_t epoch = 0;
  double empirical_risk_labeled = 0.0;
  double mean_divergence = 0.0;
  double mean_confidence = 0.0;
  double hoeffding_term = 0.0;
  double rtc = 0.0;
  std::size_t n = 0;
  std::size_t G = 0;
};

inline double trajectory_divergence(std::span<const double> t_u, std::span<const double> t_ref) {
  return 1.0 - tcs(t_u, t_ref);
}

inline double mean_voting_confidence(std::span<const double> confidences) {
  if (confidences.empty()) throw std::invalid_argument("mean_voting_confidence: no samples");
  double sum = 0.0;
  for (double c : confidences) sum += c;
  return sum / static_cast<double>(confidences.size());
}

inline double mean_voting_confidence(std::span<const RolloutGroup> groups) {
  std::vector<double> conf;
  conf.reserve(groups.size());
  for (const auto& g : groups) conf.push_back(majority_vote(g.answers).confidence);
  return mean_voting_confidence(conf);
}

/// sqrt(ln(2n/delta) / (2G)).
inline double hoeffding_term(std::size_t n, std::size_t G, double delta) {
  if (n < 1) throw std::domain_error("hoeffding_term: n must be >= 1");
  if (G < 1) throw std::domain_error("hoeffding_term: G must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw std::domain_error("hoeffding_term: delta must lie in (0, 1)");
  return std::sqrt(std::log(2.0 * static_cast<double>(n) / delta) / (2.0 * static_cast<double>(G)));
}

/// alpha * E[D_traj] + L_y * (1 - C + hoeffding).
inline double tc_risk(const BoundConfig& b, double mean_divergence, double mean_confidence, std::size_t n,
                      std::size_t G) {
  return b.alpha * mean_divergence + b.label_diameter * (1.0 - mean_confidence + hoeffding_term(n, G, b.delta));
}

inline BoundReport make_bound_report(const BoundConfig& b, std::uint32_t epoch, double empirical_risk_labeled,
                                     double mean_divergence, double mean_confidence, std::size_t n,
                                     std::size_t G) {
  BoundReport r;
  r.epoch = epoch;
  r.empirical_risk_labeled = empirical_risk_labeled;
  r.mean_divergence = mean_divergence;
  r.mean_confidence = mean_confidence;
  r.hoeffding_term = hoeffding_term(n, G, b.delta);
  r.rtc = b.alpha * mean_divergence + b.label_diameter * (1.0 - mean_confidence + r.hoeffding_term);
  r.n = n;
  r.G = G;
  return r;
}

/// Mean 0-1 error of the greedy answer against `gold` (one entry per question).
inline double empirical_risk(const PolicyParams& params, std::span<const Question> questions,
                             std::span<const Token> gold) {
  if (questions.empty()) throw std::invalid_argument("empirical_risk: empty split");
  if (gold.size() != questions.size()) throw std::invalid_argument("empirical_risk: gold count mismatch");
  std::size_t errors = 0;
  for (std::size_t i = 0; i < questions.size(); ++i) errors += greedy_answer(params, questions[i]) != gold[i] ? 1 : 0;
  return static_cast<double>(errors) / static_cast<double>(questions.size());
}

/// Labeled split: gold comes from the questions themselves.
inline double empirical_risk(const PolicyParams& params, std::span<const Question> labeled) {
  std::vector<Token> gold;
  gold.reserve(labeled.size());
  for (const auto& q : labeled) {
    if (!q.gold_answer) throw std::invalid_argument("empirical_risk: question without gold answer");
    gold.push_back(*q.gold_answer);
  }
  return empirical_risk(params, labeled, gold);
}

/// Evaluation-only path: unlabeled questions scored against hidden gold.
inline double empirical_risk(const PolicyParams& params, std::span<const Question> unlabeled,
                             const HiddenLabels& hidden) {
  std::vector<Token> gold;
  gold.reserve(unlabeled.size());
  for (const auto& q : unlabeled) gold.push_back(hidden.gold_of(q.id));
  return empirical_risk(params, unlabeled, gold);
}

}  // namespace trapo
