#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trapo/core.hpp"

namespace trapo {

struct RewardVector {
  QuestionId question_id = 0;
  std::uint32_t epoch = 0;
  std::vector<double> values;
  std::optional<Token> pseudo_label;
  std::optional<double> confidence;
  bool tie_flag = false;
};

struct MajorityVote {
  Token pseudo_label = 0;
  double confidence = 0.0;
  bool tie = false;
};

/// Binary verifiable reward: 1 iff the extracted answer equals the gold token.
inline int verify(Token answer, Token gold, std::size_t K) {
  const auto in_range = [K](Token t) { return t >= 0 && static_cast<std::size_t>(t) < K; };
  if (!in_range(answer)) throw std::out_of_range("verify: answer " + std::to_string(answer) + " outside [0, K)");
  if (!in_range(gold)) throw std::out_of_range("verify: gold " + std::to_string(gold) + " outside [0, K)");
  return answer == gold ? 1 : 0;
}

/// Most frequent answer; ties go to the smallest token and set `tie`.
inline MajorityVote majority_vote(std::span<const Token> answers) {
  if (answers.empty()) throw std::invalid_argument("majority_vote: empty answer list");
  const Token top = *std::max_element(answers.begin(), answers.end());
  if (*std::min_element(answers.begin(), answers.end()) < 0)
    throw std::out_of_range("majority_vote: negative token");
  std::vector<int> counts(static_cast<std::size_t>(top) + 1, 0);
  for (Token a : answers) ++counts[static_cast<std::size_t>(a)];

  MajorityVote vote;
  int best = -1;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] > best) {
      best = counts[k];
      vote.pseudo_label = static_cast<Token>(k);
      vote.tie = false;
    } else if (counts[k] == best) {
      vote.tie = true;
    }
  }
  vote.confidence = static_cast<double>(best) / static_cast<double>(answers.size());
  return vote;
}

namespace detail {

inline void check_group(const RolloutGroup& group) {
  if (group.size() == 0) throw std::invalid_argument("rollout group is empty");
  if (group.answers.size() != group.size() || group.step_distributions.size() != group.size())
    throw std::invalid_argument("rollout group has inconsistent sizes");
}

inline double step_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double pk : p)
    if (pk > 0.0) h -= pk * std::log(pk);
  return h;
}

}  // namespace detail

/// Label-free reward for every rollout of an unlabeled question.
///
/// * majority         - 1 iff the rollout agrees with the group's majority answer.
/// * self_certainty   - mean over steps of log pi(chosen) + log K, i.e. how far the
///                      chosen token sits above the uniform baseline.
/// * token_entropy    - negative mean step entropy.
/// * sentence_entropy - sequence log-probability (unnormalized).
inline RewardVector proxy_reward(RewardKind kind, const RolloutGroup& group) {
  detail::check_group(group);
  RewardVector out;
  out.question_id = group.question_id;
  out.epoch = group.epoch;
  out.values.resize(group.size());

  switch (kind) {
    case RewardKind::majority: {
      const MajorityVote vote = majority_vote(group.answers);
      for (std::size_t j = 0; j < group.size(); ++j)
        out.values[j] = group.answers[j] == vote.pseudo_label ? 1.0 : 0.0;
      out.pseudo_label = vote.pseudo_label;
      out.confidence = vote.confidence;
      out.tie_flag = vote.tie;
      return out;
    }
    case RewardKind::self_certainty:
    case RewardKind::sentence_entropy: {
      for (std::size_t j = 0; j < group.size(); ++j) {
        const auto& steps = group.step_distributions[j];
        const std::size_t L = steps.size();
        double logp = 0.0;
        for (std::size_t s = 0; s < L; ++s)
          logp += std::log(steps[s][static_cast<std::size_t>(group.responses[j][s])]);
        if (kind == RewardKind::sentence_entropy) {
          out.values[j] = logp;
        } else {
          const double K = static_cast<double>(steps.front().size());
          out.values[j] = logp / static_cast<double>(L) + std::log(K);
        }
      }
      return out;
    }
    case RewardKind::token_entropy: {
      for (std::size_t j = 0; j < group.size(); ++j) {
        const auto& steps = group.step_distributions[j];
        double h = 0.0;
        for (const auto& p : steps) h += detail::step_entropy(p);
        out.values[j] = -h / static_cast<double>(steps.size());
      }
      return out;
    }
    case RewardKind::verifiable:
      break;
  }
  throw std::invalid_argument("proxy_reward: '" + std::string(to_string(kind)) +
                              "' is not a label-free reward");
}

enum class Split { labeled, unlabeled };

/// Labeled-split questions are scored against their gold answer; unlabeled
/// ones get the configured proxy reward.
inline RewardVector hybrid_reward(const Question& question, Split split, const RolloutGroup& group,
                                  RewardKind kind, std::size_t K) {
  detail::check_group(group);
  if (split == Split::unlabeled) return proxy_reward(kind, group);
  if (!question.gold_answer)
    throw std::invalid_argument("hybrid_reward: labeled question " + std::to_string(question.id) +
                                " has no gold answer");

  RewardVector out;
  out.question_id = group.question_id;
  out.epoch = group.epoch;
  out.values.resize(group.size());
  for (std::size_t j = 0; j < group.size(); ++j)
    out.values[j] = verify(group.answers[j], *question.gold_answer, K);
  return out;
}

inline RewardVector hybrid_reward(const Question& question, const RolloutGroup& group, RewardKind kind,
                                  std::size_t K) {
  return hybrid_reward(question, question.labeled() ? Split::labeled : Split::unlabeled, group, kind, K);
}

}  // namespace trapo
